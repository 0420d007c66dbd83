"""Error taxonomy shared by every plane.

Each failure surfaces as a :class:`TransferError` whose ``kind`` is one of
:class:`ErrorKind`. Every kind also has its own subclass so callers can
``except BoundsViolation`` directly.
"""

from __future__ import annotations

import enum


class ErrorKind(enum.Enum):
    BoundsViolation = "BoundsViolation"
    GuestAbiMissing = "GuestAbiMissing"
    FrameMalformed = "FrameMalformed"
    PeerUnreachable = "PeerUnreachable"
    HoseUnavailable = "HoseUnavailable"
    Timeout = "Timeout"
    RegistryMiss = "RegistryMiss"
    AllocationFailed = "AllocationFailed"


class TransferError(Exception):
    kind: ErrorKind

    def __init__(self, detail: str, *, mode: str | None = None):
        super().__init__(detail)
        self.detail = detail
        self.mode = mode

    def __str__(self) -> str:
        prefix = f"[{self.mode}] " if self.mode else ""
        return f"{prefix}{self.kind.value}: {self.detail}"

    def with_mode(self, mode: str) -> "TransferError":
        self.mode = mode
        return self

    @staticmethod
    def of(kind: ErrorKind, detail: str) -> "TransferError":
        return _BY_KIND[kind](detail)


class BoundsViolation(TransferError):
    kind = ErrorKind.BoundsViolation


class GuestAbiMissing(TransferError):
    kind = ErrorKind.GuestAbiMissing


class FrameMalformed(TransferError):
    kind = ErrorKind.FrameMalformed


class PeerUnreachable(TransferError):
    kind = ErrorKind.PeerUnreachable


class HoseUnavailable(TransferError):
    kind = ErrorKind.HoseUnavailable


class Timeout(TransferError):
    kind = ErrorKind.Timeout


class RegistryMiss(TransferError):
    kind = ErrorKind.RegistryMiss


class AllocationFailed(TransferError):
    kind = ErrorKind.AllocationFailed


_BY_KIND = {cls.kind: cls for cls in TransferError.__subclasses__()}
