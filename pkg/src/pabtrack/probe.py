"""UDP chirp probing: paced sender, timestamping receiver and receipts.

Wire format of every probe packet (big-endian, padded with zeros to the
packet size)::

    magic  4s   b"PABC"
    chirp  u32  sender-chosen random id
    index  u16  packet index within the chirp
    total  u16  K, packets in the chirp
    send   u64  sender monotonic clock, ns

The receiver groups packets by ``(chirp id, source address)`` and, once a
chirp is complete or has gone quiet, sends a JSON receipt back to the
source address.  The sender's actual send times and the receiver's
arrival times are then handed to :func:`pabtrack.chirp.interpret`; only
receiver-side gaps enter the output rates, so the two clocks never need
to agree.
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import queue
import secrets
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .chirp import ChirpObservation, ChirpSpec, EmptyObservationError, interpret, spacings

log = logging.getLogger(__name__)

MAGIC = b"PABC"
HEADER = struct.Struct(">4sIHHQ")
MIN_GAP = 2e-6  # below this the pacer cannot hold a gap
SPIN_WINDOW_NS = 200_000
RECEIPT_TYPE = "pabtrack-receipt"
_SO_TIMESTAMPNS = getattr(socket, "SO_TIMESTAMPNS", 35 if sys.platform.startswith("linux") else None)


class ProbeError(RuntimeError):
    pass


class PacingError(ProbeError):
    """The requested gaps are finer than the pacer can produce."""


class MeasurementError(ProbeError):
    """No usable receipt: receiver silent, or too many packets lost."""


class MalformedPacket(ValueError):
    pass


@dataclass(frozen=True)
class ProbePacket:
    chirp_id: int
    index: int
    total_k: int
    send_ts_ns: int
    magic: bytes = MAGIC

    def __post_init__(self):
        if len(self.magic) != 4:
            raise ValueError("magic must be 4 bytes")
        if not 0 <= self.chirp_id < 2**32:
            raise ValueError("chirp_id must fit in 32 bits")
        if not 0 < self.total_k < 2**16:
            raise ValueError("total_k must fit in 16 bits and be positive")
        if not 0 <= self.index < self.total_k:
            raise ValueError("packet index must be below total_k")
        if not 0 <= self.send_ts_ns < 2**64:
            raise ValueError("send timestamp must fit in 64 bits")

    def serialize(self, size: int = 1000) -> bytes:
        if size < HEADER.size:
            raise ValueError(f"packet size must be at least {HEADER.size} bytes")
        head = HEADER.pack(self.magic, self.chirp_id, self.index, self.total_k, self.send_ts_ns)
        return head + bytes(size - HEADER.size)

    @classmethod
    def deserialize(cls, data: bytes, size: int | None = None) -> "ProbePacket":
        if len(data) < HEADER.size or (size is not None and len(data) != size):
            raise MalformedPacket(f"bad length {len(data)}")
        magic, chirp_id, index, total_k, ts = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise MalformedPacket(f"bad magic {magic!r}")
        try:
            return cls(chirp_id, index, total_k, ts, magic)
        except ValueError as exc:
            raise MalformedPacket(str(exc)) from None


def packet_size(spec: ChirpSpec) -> int:
    size = spec.packet_bits / 8
    if size != int(size) or size < HEADER.size:
        raise PacingError(f"packet size {spec.packet_bits} bits is not a whole number of bytes >= {HEADER.size}")
    return int(size)


def check_pacing(spec: ChirpSpec, min_gap: float = MIN_GAP) -> np.ndarray:
    """Target gaps of ``spec``; raises :class:`PacingError` if any is too fine."""
    gaps = spacings(spec)
    if gaps.min() < min_gap:
        raise PacingError(f"gap {gaps.min() * 1e9:.0f} ns is below the pacing floor of {min_gap * 1e9:.0f} ns")
    return gaps


def _wait_until(deadline_ns: int, clock=time.monotonic_ns) -> None:
    # sleep the bulk, spin the last stretch
    remaining = deadline_ns - clock()
    if remaining > SPIN_WINDOW_NS:
        time.sleep((remaining - SPIN_WINDOW_NS) / 1e9)
    while clock() < deadline_ns:
        pass


@contextlib.contextmanager
def _realtime_priority(enabled: bool):
    """Run the block under SCHED_FIFO when asked and permitted, else unchanged."""
    if not enabled or not hasattr(os, "sched_setscheduler"):
        yield False
        return
    try:
        policy, param = os.sched_getscheduler(0), os.sched_getparam(0)
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(os.sched_get_priority_min(os.SCHED_FIFO)))
    except (OSError, AttributeError):
        yield False
        return
    try:
        yield True
    finally:
        os.sched_setscheduler(0, policy, param)


@dataclass
class SendLog:
    chirp_id: int
    send_ns: np.ndarray  # clock read just before each sendto
    done_ns: np.ndarray  # clock read just after it returned
    target_gaps: np.ndarray
    late: np.ndarray  # packets the discard rule must drop

    @property
    def actual_gaps(self) -> np.ndarray:
        return np.diff(self.send_ns) / 1e9

    @property
    def send_times(self) -> np.ndarray:
        return (self.send_ns - self.send_ns[0]) / 1e9


def late_packets(send_ns, done_ns, target_gaps, rel_tol: float = 0.1, abs_tol: float = 20e-6,
                 call_tol: float = 50e-6) -> np.ndarray:
    """Packets sent too long after their predecessor, or stalled inside sendto.

    A stall between reading the clock and the packet leaving would shift
    the true departure without showing up in the recorded gaps, so a send
    call slower than ``call_tol`` is treated like a late gap.  On loopback
    the call includes delivery to the receiving socket, hence the looser
    bound; 50 us is still well under the error that could flip an outcome
    on a K_min-packet window.
    """
    send_ns = np.asarray(send_ns, dtype=np.int64)
    gaps = np.diff(send_ns) / 1e9
    late = np.zeros(send_ns.size, dtype=bool)
    late[1:] = gaps > target_gaps + np.maximum(rel_tol * target_gaps, abs_tol)
    late |= (np.asarray(done_ns, dtype=np.int64) - send_ns) / 1e9 > call_tol
    return late


def send_chirp(sock: socket.socket, dest, spec: ChirpSpec, chirp_id: int | None = None,
               stall: dict[int, float] | None = None, rel_tol: float = 0.1, abs_tol: float = 20e-6,
               realtime: bool = False) -> SendLog:
    """Send the K packets of ``spec`` to ``dest`` with the solved spacings.

    Each deadline is measured from the previous packet's actual send time,
    so one late packet lengthens a single gap instead of compressing the
    rest of the train.  ``stall`` maps packet indices to extra seconds of
    delay and exists for fault injection.  ``realtime`` raises the process
    to SCHED_FIFO for the duration of the train where the OS allows it;
    on a single core this starves a co-located receiver that timestamps
    in user space, so leave it off unless the receiver uses kernel
    timestamps or runs elsewhere.
    """
    gaps = check_pacing(spec)
    size = packet_size(spec)
    chirp_id = secrets.randbits(32) if chirp_id is None else chirp_id
    stall = stall or {}
    sent = np.zeros(spec.k, dtype=np.int64)
    done = np.zeros(spec.k, dtype=np.int64)
    gap_ns = np.round(gaps * 1e9).astype(np.int64)
    padding = bytes(size - HEADER.size)
    clock = time.monotonic_ns
    with _realtime_priority(realtime):
        for i in range(spec.k):
            if i:
                _wait_until(int(sent[i - 1] + gap_ns[i - 1] + stall.get(i, 0.0) * 1e9))
            ts = clock()
            sock.sendto(HEADER.pack(MAGIC, chirp_id, i, spec.k, ts) + padding, dest)
            done[i] = clock()
            sent[i] = ts
    return SendLog(chirp_id, sent, done, gaps, late_packets(sent, done, gaps, rel_tol, abs_tol))


@dataclass
class ChirpReceipt:
    chirp_id: int
    source: tuple[str, int]
    total_k: int
    recv_ns: list[int | None]
    send_ns: list[int | None]
    arrival_order: list[int] = field(default_factory=list)

    @property
    def lost(self) -> np.ndarray:
        """Loss bitmap: True where no packet arrived."""
        return np.array([r is None for r in self.recv_ns], dtype=bool)

    @property
    def n_lost(self) -> int:
        return int(self.lost.sum())

    @property
    def complete(self) -> bool:
        return self.n_lost == 0

    def recv_times(self) -> np.ndarray:
        """Arrival times in seconds relative to the first arrival; NaN where lost."""
        got = [r for r in self.recv_ns if r is not None]
        if not got:
            return np.full(self.total_k, np.nan)
        base = min(got)
        return np.array([np.nan if r is None else (r - base) / 1e9 for r in self.recv_ns])

    def to_dict(self) -> dict:
        return {
            "type": RECEIPT_TYPE,
            "chirp_id": self.chirp_id,
            "source": list(self.source),
            "total_k": self.total_k,
            "recv_ns": self.recv_ns,
            "send_ns": self.send_ns,
            "arrival_order": self.arrival_order,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChirpReceipt":
        return cls(int(data["chirp_id"]), tuple(data["source"]), int(data["total_k"]),
                   list(data["recv_ns"]), list(data["send_ns"]), list(data.get("arrival_order", [])))


class _Pending:
    def __init__(self, chirp_id: int, source, total_k: int):
        self.chirp_id = chirp_id
        self.source = source
        self.total_k = total_k
        self.recv: list[int | None] = [None] * total_k
        self.send: list[int | None] = [None] * total_k
        self.order: list[int] = []
        self.last_arrival = time.monotonic()

    def add(self, pkt: ProbePacket, ts: int) -> None:
        if self.recv[pkt.index] is None:
            self.recv[pkt.index] = ts
            self.send[pkt.index] = pkt.send_ts_ns
            self.order.append(pkt.index)
        self.last_arrival = time.monotonic()

    @property
    def done(self) -> bool:
        return len(self.order) == self.total_k

    def silence_timeout(self, floor: float) -> float:
        # twice the chirp duration, judged from the echoed send timestamps
        sends = [s for s in self.send if s is not None]
        span = (max(sends) - min(sends)) / 1e9 if len(sends) > 1 else 0.0
        return max(floor, 2.0 * span)

    def receipt(self) -> ChirpReceipt:
        return ChirpReceipt(self.chirp_id, tuple(self.source), self.total_k, self.recv, self.send, self.order)


def _recv_with_timestamp(sock: socket.socket, bufsize: int, kernel: bool):
    if kernel:
        data, anc, _flags, addr = sock.recvmsg(bufsize, socket.CMSG_SPACE(16))
        for level, kind, payload in anc:
            if level == socket.SOL_SOCKET and kind == _SO_TIMESTAMPNS and len(payload) >= 16:
                sec, nsec = struct.unpack("qq", payload[:16])
                return data, addr, sec * 1_000_000_000 + nsec
        return data, addr, time.monotonic_ns()
    data, addr = sock.recvfrom(bufsize)
    return data, addr, time.monotonic_ns()


class Receiver:
    """Timestamping UDP receiver that assembles chirps into receipts.

    One thread only reads the socket and timestamps; a second thread
    groups packets, times out quiet chirps and sends receipts back to
    their source.  With ``kernel_timestamps`` the arrival times come from
    the kernel (``SO_TIMESTAMPNS``) when the platform offers it, which
    removes interpreter scheduling jitter from the receiver gaps.
    """

    def __init__(self, host: str = "0.0.0.0", port: int = 0, min_timeout: float = 0.05,
                 kernel_timestamps: bool = True, reply: bool = True, bufsize: int = 65535,
                 poll_interval: float = 0.005):
        self.host = host
        self.port = port
        self.min_timeout = min_timeout
        self.reply = reply
        self.bufsize = bufsize
        self.poll_interval = poll_interval
        self.kernel_timestamps = kernel_timestamps and _SO_TIMESTAMPNS is not None
        self.malformed = 0
        self.receipts: queue.Queue[ChirpReceipt] = queue.Queue()
        self._arrivals: queue.Queue = queue.Queue()
        self._pending: dict[tuple, _Pending] = {}
        self._finished: dict[tuple, float] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.sock: socket.socket | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def start(self) -> "Receiver":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        if self.kernel_timestamps:
            try:
                sock.setsockopt(socket.SOL_SOCKET, _SO_TIMESTAMPNS, 1)
            except OSError:
                self.kernel_timestamps = False
        sock.bind((self.host, self.port))
        sock.settimeout(0.05)
        self.sock = sock
        self._threads = [
            threading.Thread(target=self._read_loop, name="probe-recv", daemon=True),
            threading.Thread(target=self._assemble_loop, name="probe-assemble", daemon=True),
        ]
        for th in self._threads:
            th.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        for th in self._threads:
            th.join(timeout=1.0)
        if self.sock is not None:
            self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _read_loop(self) -> None:
        # kernel timestamps are taken at enqueue time, so the reader can
        # drain in batches instead of waking (and preempting a co-located
        # sender) on every packet
        batch = self.kernel_timestamps
        while not self._stop.is_set():
            if batch:
                time.sleep(self.poll_interval)
                self.sock.setblocking(False)
            try:
                while True:
                    self._arrivals.put(_recv_with_timestamp(self.sock, self.bufsize, self.kernel_timestamps))
                    if not batch:
                        break
            except (BlockingIOError, socket.timeout):
                continue
            except OSError:
                if self._stop.is_set():
                    return
                raise

    def _assemble_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr, ts = self._arrivals.get(timeout=self.poll_interval)
            except queue.Empty:
                self._expire()
                continue
            try:
                pkt = ProbePacket.deserialize(data)
            except MalformedPacket as exc:
                self.malformed += 1
                log.debug("dropped malformed packet from %s: %s", addr, exc)
                continue
            key = (pkt.chirp_id, addr)
            if key in self._finished:
                continue  # straggler after the receipt went out
            pending = self._pending.get(key)
            if pending is None:
                pending = self._pending[key] = _Pending(pkt.chirp_id, addr, pkt.total_k)
            if pkt.total_k != pending.total_k:
                self.malformed += 1
                continue
            pending.add(pkt, ts)
            if pending.done:
                self._emit(key)
            self._expire()

    def _expire(self) -> None:
        now = time.monotonic()
        for key, pending in list(self._pending.items()):
            if now - pending.last_arrival > pending.silence_timeout(self.min_timeout):
                self._emit(key)
        for key, when in list(self._finished.items()):
            if now - when > 10.0:
                del self._finished[key]

    def _emit(self, key) -> None:
        receipt = self._pending.pop(key).receipt()
        self._finished[key] = time.monotonic()
        self.receipts.put(receipt)
        if self.reply:
            try:
                self.sock.sendto(json.dumps(receipt.to_dict()).encode(), receipt.source)
            except OSError as exc:
                log.warning("could not return receipt for chirp %d: %s", receipt.chirp_id, exc)


def await_receipt(sock: socket.socket, chirp_id: int, timeout: float) -> ChirpReceipt:
    """Wait on the sender socket for the receipt of ``chirp_id``."""
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise MeasurementError(f"no receipt for chirp {chirp_id} within {timeout:.2f} s")
        sock.settimeout(remaining)
        try:
            data, _addr = sock.recvfrom(65535)
        except socket.timeout:
            continue
        except ConnectionRefusedError:
            raise MeasurementError("receiver unreachable (connection refused)") from None
        try:
            msg = json.loads(data)
        except (UnicodeDecodeError, json.JSONDecodeError):
            continue
        if isinstance(msg, dict) and msg.get("type") == RECEIPT_TYPE and msg.get("chirp_id") == chirp_id:
            return ChirpReceipt.from_dict(msg)


@dataclass
class ProbeResult:
    observation: ChirpObservation
    receipt: ChirpReceipt
    send_log: SendLog
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "chirp_id": self.receipt.chirp_id,
            "wall_time": self.wall_time,
            "send_ns": self.send_log.send_ns.tolist(),
            "late": np.flatnonzero(self.send_log.late).tolist(),
            "receipt": self.receipt.to_dict(),
            "observation": self.observation.to_dict(),
        }


def measure_path(dest, spec: ChirpSpec, epsilon: float = 5.0, timeout: float = 2.0, path: int = 0,
                 t: int = 0, stall: dict[int, float] | None = None, sock: socket.socket | None = None,
                 rel_tol: float = 0.1, abs_tol: float = 20e-6, realtime: bool = False) -> ProbeResult:
    """Probe one path with a chirp and interpret the returned receipt."""
    start = time.monotonic()
    own = sock is None
    sock = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        if own:
            sock.bind(("0.0.0.0", 0))
        send_log = send_chirp(sock, dest, spec, stall=stall, rel_tol=rel_tol, abs_tol=abs_tol,
                              realtime=realtime)
        receipt = await_receipt(sock, send_log.chirp_id, timeout + 2.0 * spec.duration)
    except OSError as exc:
        raise MeasurementError(f"probe to {dest} failed: {exc}") from exc
    finally:
        if own:
            sock.close()
    if receipt.n_lost > spec.k - spec.k_min:
        raise MeasurementError(f"chirp {receipt.chirp_id}: {receipt.n_lost} of {spec.k} packets lost")
    try:
        obs = interpret(send_log.send_times, receipt.recv_times(), spec, epsilon, path=path, t=t,
                        rel_tol=rel_tol, abs_tol=abs_tol, exclude=send_log.late)
    except EmptyObservationError as exc:
        raise MeasurementError(f"chirp {receipt.chirp_id}: {exc}") from None
    return ProbeResult(obs, receipt, send_log, time.monotonic() - start)


def write_receipt(fh, result: ProbeResult | ChirpReceipt) -> None:
    rec = result.to_dict()
    fh.write(json.dumps(rec) + "\n")
    fh.flush()


class LiveProber:
    """Measurement callback for the tracker: path index -> receiver address."""

    def __init__(self, addresses: dict[int, tuple[str, int]], epsilon: float = 5.0, timeout: float = 2.0,
                 max_retries: int = 3, receipts=None, realtime: bool = False):
        self.addresses = addresses
        self.realtime = realtime
        self.epsilon = epsilon
        self.timeout = timeout
        self.max_retries = max_retries
        self.receipts = receipts
        self.wall_times: list[float] = []

    def __call__(self, path: int, spec: ChirpSpec) -> ChirpObservation:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                res = measure_path(self.addresses[path], spec, self.epsilon, self.timeout, path=path,
                                   realtime=self.realtime)
            except MeasurementError as exc:
                last = exc
                log.warning("path %d attempt %d failed: %s", path, attempt + 1, exc)
                continue
            self.wall_times.append(res.wall_time)
            if self.receipts is not None:
                write_receipt(self.receipts, res)
            return res.observation
        raise MeasurementError(f"path {path}: giving up after {self.max_retries + 1} attempts") from last
