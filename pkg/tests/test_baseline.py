import base64
import json
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from oracles import base64_length, fnv1a64
from rrshim.baseline import (
    STATUS_DECODE_ERROR,
    STATUS_OK,
    BaselineClient,
    BaselineServer,
    SerializedMessage,
    baseline_transfer,
    deserialize,
    envelope_overhead,
    serialize,
)
from rrshim.core import checksum64
from rrshim.delivery import DeliverySink
from rrshim.errors import FrameMalformed, PeerUnreachable
from rrshim.guest_abi import generate_payload

MiB = 1 << 20


class TestCodec:
    def test_abc(self):
        msg = serialize(b"abc", 1, 2)
        assert "YWJj" in msg.text
        assert json.loads(msg.text) == {"src": 1, "dst": 2, "payload": "YWJj"}
        assert deserialize(msg) == b"abc"

    def test_empty(self):
        msg = serialize(b"", 1, 2)
        assert json.loads(msg.text)["payload"] == ""
        assert deserialize(msg.text) == b""

    def test_one_mebibyte_length_formula(self):
        data = generate_payload(5, MiB).tobytes()
        msg = serialize(data, 3, 4)
        assert deserialize(msg.encode()) == data
        assert len(msg.text) == base64_length(MiB) + envelope_overhead(3, 4)

    @settings(max_examples=200)
    @given(data=st.binary(max_size=5000), src=st.integers(0, 2**32 - 1), dst=st.integers(0, 2**32 - 1))
    def test_round_trip_and_size_bound(self, data, src, dst):
        msg = serialize(data, src, dst)
        assert deserialize(msg) == data
        assert len(msg.encode()) >= -(-4 * len(data) // 3)
        assert len(msg.text) == base64_length(len(data)) + envelope_overhead(src, dst)

    @pytest.mark.parametrize("bad", ["not json", '{"src": 1}', '{"payload": "@@@"}', '{"payload": 5}', "[]"])
    def test_decode_errors(self, bad):
        with pytest.raises(FrameMalformed):
            deserialize(bad)

    def test_message_is_text(self):
        assert isinstance(serialize(b"\xff\x00", 0, 0), SerializedMessage)
        assert base64.b64decode(json.loads(serialize(b"\xff\x00", 0, 0).text)["payload"]) == b"\xff\x00"


@pytest.fixture
def loopback(make_instance):
    started = []

    def start(max_memory=16 * MiB):
        sink = DeliverySink(make_instance("consumer", max_memory), 0)
        server = BaselineServer(("127.0.0.1", 0), sink).start()
        client = BaselineClient(server.address)
        started.append((server, client))
        return server, client, sink
    yield start
    for server, client in started:
        client.close()
        server.close()


def producer_region(make_instance, n, seed=7, max_memory=16 * MiB):
    src = make_instance("producer", max_memory)
    src.invoke("produce", seed, n)
    (cap,) = src.take_captures()
    return src, cap.region


def test_hello_over_loopback(loopback, make_instance):
    server, client, sink = loopback()
    src = make_instance("echo")
    r = src.guest_alloc(5)
    src.write_memory_host(b"hello", r.offset)
    t = baseline_transfer(client, server, src, r, 1, 2)
    assert sink.last().checksum == fnv1a64(b"hello")
    assert t.t_serialize > 0 and t.t_deserialize > 0


def test_phase_accounting(loopback, make_instance):
    server, client, sink = loopback()
    src, r = producer_region(make_instance, MiB)
    for _ in range(5):
        t = baseline_transfer(client, server, src, r)
        phases = t.t_locate + t.t_serialize + t.t_transfer + t.t_deserialize
        assert abs(phases - t.t_total) <= 0.05 * t.t_total
    assert sink.last().checksum == checksum64(generate_payload(7, MiB))


def test_decode_failure_never_runs_target(loopback):
    server, client, sink = loopback()
    assert client.send_message(b'{"src": 0, "dst": 0, "payload": "!!"}') == STATUS_DECODE_ERROR
    assert client.send_message(b"\x00\x01garbage") == STATUS_DECODE_ERROR
    assert sink.count == 0 and sink.instance.invoke("received") == [0]
    # the connection survives a decode error
    assert client.send_message(serialize(b"fine", 0, 0).encode()) == STATUS_OK
    assert sink.count == 1


def test_unreachable():
    client = BaselineClient(("127.0.0.1", 1), timeout=1)
    with pytest.raises(PeerUnreachable):
        client.send_message(b"{}")


@pytest.mark.slow
def test_serialization_grows_at_least_linearly(loopback, make_instance):
    """Serialize time over {1, 10, 100} MB scales at least with payload size.

    Median of three runs per size. A 0.7 factor on the size ratio absorbs
    timer and cache noise without admitting sublinear growth.
    """
    server, client, sink = loopback(max_memory=512 * MiB)
    src = make_instance("producer", 512 * MiB)
    medians = []
    sizes = [1_000_000, 10_000_000, 100_000_000]
    for n in sizes:
        src.invoke("produce", 7, n)
        (cap,) = src.take_captures()
        runs = [baseline_transfer(client, server, src, cap.region) for _ in range(3)]
        medians.append(statistics.median(t.t_serialize for t in runs))
        assert sink.last().checksum == checksum64(generate_payload(7, n))
    for (a, ta), (b, tb) in zip(zip(sizes, medians), zip(sizes[1:], medians[1:])):
        assert tb >= 0.7 * (b / a) * ta, (a, ta, b, tb)
