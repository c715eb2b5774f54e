import json
import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pabtrack.chirp import solve_chirp
from pabtrack.probe import (HEADER, MAGIC, ChirpReceipt, MalformedPacket, MeasurementError, PacingError,
                            ProbePacket, Receiver, check_pacing, late_packets, measure_path, send_chirp)

pytestmark = pytest.mark.network


@given(st.integers(0, 2**32 - 1), st.integers(1, 2**16 - 1), st.integers(0, 2**64 - 1),
       st.integers(HEADER.size, 1500), st.data())
def test_serialization_roundtrip(chirp_id, total_k, ts, size, data):
    index = data.draw(st.integers(0, total_k - 1))
    pkt = ProbePacket(chirp_id, index, total_k, ts)
    wire = pkt.serialize(size)
    assert len(wire) == size
    assert ProbePacket.deserialize(wire, size) == pkt


def test_wire_layout_is_big_endian():
    wire = ProbePacket(0x01020304, 5, 75, 2**40 + 7).serialize(1000)
    assert wire[:4] == MAGIC
    assert wire[4:8] == bytes([1, 2, 3, 4])
    assert struct.unpack(">HH", wire[8:12]) == (5, 75)
    assert int.from_bytes(wire[12:20], "big") == 2**40 + 7
    assert wire[20:] == bytes(980)


@pytest.mark.parametrize("wire", [b"XXXX" + bytes(996), b"PABC", HEADER.pack(MAGIC, 1, 9, 5, 0)])
def test_malformed_packets(wire):
    with pytest.raises(MalformedPacket):
        ProbePacket.deserialize(wire)


def test_index_must_be_below_total():
    with pytest.raises(ValueError):
        ProbePacket(1, 75, 75, 0)


def test_sub_microsecond_gaps_rejected():
    # 8000-bit packets at 80 Gbps is a 100 ns gap
    spec = solve_chirp(80_000, 80_000, k=20, k_min=5)
    assert spec.min_spacing == pytest.approx(100e-9)
    with pytest.raises(PacingError):
        check_pacing(spec)


def test_late_gap_and_slow_call_are_flagged():
    target = np.full(4, 100e-6)
    send = np.array([0, 100_000, 250_000, 350_000, 450_000])
    done = send + 5_000
    done[3] += 100_000
    assert late_packets(send, done, target).tolist() == [False, False, True, True, False]


def test_unreachable_receiver_times_out():
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    try:
        with pytest.raises(MeasurementError):
            measure_path(sink.getsockname(), solve_chirp(10, 100), timeout=0.2)
    finally:
        sink.close()


def test_full_chirp_over_loopback(receiver_process):
    dest, _ = receiver_process
    spec = solve_chirp(10, 100)
    res = measure_path(dest, spec)
    log = res.send_log
    assert log.actual_gaps.size == spec.k - 1
    assert res.receipt.complete and not res.receipt.lost.any()
    assert res.observation.outcomes.all()
    assert res.wall_time < 2.0
    ok = ~log.late[1:]
    err = np.abs(log.actual_gaps - log.target_gaps)[ok] / log.target_gaps[ok]
    assert np.percentile(err, 95) < 0.1
    order = np.array(res.receipt.recv_ns)[res.receipt.arrival_order]
    assert np.all(np.diff(order) >= 0)


def test_injected_stall_is_discarded(receiver_process):
    dest, _ = receiver_process
    spec = solve_chirp(10, 100)
    res = measure_path(dest, spec, stall={40: 2e-3})
    assert res.send_log.late[40]
    assert not set(res.observation.windows) & set(range(25, 41))


def test_receipt_is_logged(receiver_process):
    dest, log = receiver_process
    res = measure_path(dest, solve_chirp(10, 100))
    time.sleep(0.2)
    ids = [json.loads(line)["chirp_id"] for line in log.read_text().splitlines()]
    assert res.receipt.chirp_id in ids


def _raw_send(sock, dest, chirp_id, k, skip=()):
    for i in range(k):
        if i not in skip:
            sock.sendto(ProbePacket(chirp_id, i, k, time.monotonic_ns()).serialize(100), dest)


def test_lost_packet_marked_after_timeout():
    with Receiver("127.0.0.1", reply=False, min_timeout=0.05) as rx:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _raw_send(sock, rx.address, 7, 10, skip={3})
        receipt = rx.receipts.get(timeout=2)
        sock.close()
    assert receipt.lost.tolist() == [i == 3 for i in range(10)]
    assert np.isnan(receipt.recv_times()[3])


def test_interleaved_senders_with_equal_ids():
    with Receiver("127.0.0.1", reply=False) as rx:
        a = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        b = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        a.bind(("127.0.0.1", 0))
        b.bind(("127.0.0.1", 0))
        threads = [threading.Thread(target=_raw_send, args=(s, rx.address, 42, 30)) for s in (a, b)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        got = [rx.receipts.get(timeout=2) for _ in range(2)]
        sources = {tuple(r.source) for r in got}
        assert sources == {a.getsockname(), b.getsockname()}
        assert all(r.complete and r.chirp_id == 42 for r in got)
        a.close()
        b.close()


def test_malformed_packets_are_counted():
    with Receiver("127.0.0.1", reply=False) as rx:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.sendto(b"garbage", rx.address)
        sock.sendto(b"XXXX" + bytes(40), rx.address)
        _raw_send(sock, rx.address, 1, 5)
        receipt = rx.receipts.get(timeout=2)
        sock.close()
        assert receipt.complete
        assert rx.malformed == 2


def test_receipt_dict_roundtrip():
    r = ChirpReceipt(5, ("1.2.3.4", 99), 3, [10, None, 30], [1, None, 3], [0, 2])
    again = ChirpReceipt.from_dict(json.loads(json.dumps(r.to_dict())))
    assert again == r and again.n_lost == 1


def test_send_chirp_records_every_packet():
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    sender = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    spec = solve_chirp(10, 40, k=10, k_min=3)
    log = send_chirp(sender, sink.getsockname(), spec, chirp_id=9)
    assert log.send_ns.size == 10 and np.all(np.diff(log.send_ns) > 0)
    sink.settimeout(1)
    first = ProbePacket.deserialize(sink.recv(2000), 1000)
    assert (first.chirp_id, first.index, first.total_k) == (9, 0, 10)
    sink.close()
    sender.close()


def test_realtime_pacing_restores_policy():
    import os

    from pabtrack.probe import _realtime_priority

    before = os.sched_getscheduler(0)
    with _realtime_priority(True) as active:
        if active:
            assert os.sched_getscheduler(0) == os.SCHED_FIFO
    assert os.sched_getscheduler(0) == before
    with _realtime_priority(False) as active:
        assert not active
