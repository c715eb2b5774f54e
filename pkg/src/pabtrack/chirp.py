"""Chirp trains: spacing design and interpretation of send/receive timestamps.

Rates are in Mbps, packet sizes in bits and times in seconds.  Spacing
``i`` (1-based in the formulas, 0-based in arrays) is the gap between
packets ``i`` and ``i + 1``; window ``k`` averages gaps ``k .. k+K_min-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MBPS = 1e6


class ChirpError(ValueError):
    pass


class EmptyObservationError(ChirpError):
    """Too few usable packets survived to form a single window."""


@dataclass(frozen=True)
class ChirpSpec:
    k: int
    k_min: int
    packet_bits: float
    min_spacing: float
    theta: float

    def __post_init__(self):
        if not self.k > self.k_min >= 1:
            raise ChirpError(f"need K > K_min >= 1, got K={self.k}, K_min={self.k_min}")
        if self.min_spacing <= 0:
            raise ChirpError("minimum spacing must be positive")
        if self.theta < 1:
            raise ChirpError("spacing factor must be >= 1")

    @property
    def n_rates(self) -> int:
        """K' = K - K_min, the number of probed windows."""
        return self.k - self.k_min

    @property
    def duration(self) -> float:
        return float(spacings(self).sum())


def solve_chirp(r_min: float, r_max: float, k: int = 75, k_min: int = 15,
                packet_bits: float = 8000.0) -> ChirpSpec:
    """Pick theta and T so the first window probes ``r_min`` and the last ``r_max``."""
    if not 0 < r_min <= r_max:
        raise ChirpError(f"invalid rate range [{r_min}, {r_max}]")
    if not k > k_min >= 1:
        raise ChirpError(f"need K > K_min >= 1, got K={k}, K_min={k_min}")
    n_rates = k - k_min
    if r_max > r_min and n_rates < 2:
        raise ChirpError("K too small to probe two distinct endpoint rates")

    if r_max == r_min:
        theta = 1.0
        t_min = packet_bits / (r_max * MBPS)
    else:
        theta = (r_max / r_min) ** (1.0 / (n_rates - 1))
        # (theta - 1) / (theta^K_min - 1) via expm1/log1p stays exact near theta = 1
        log_theta = np.log(theta)
        ratio = np.expm1(log_theta) / np.expm1(k_min * log_theta)
        t_min = k_min * packet_bits / (r_max * MBPS) * ratio
    return ChirpSpec(k=k, k_min=k_min, packet_bits=float(packet_bits),
                     min_spacing=float(t_min), theta=float(theta))


def spacings(spec: ChirpSpec) -> np.ndarray:
    """Target gaps tau(i) = T theta^(K-(i+1)) for i = 1..K-1."""
    i = np.arange(1, spec.k)
    return spec.min_spacing * spec.theta ** (spec.k - (i + 1))


def window_rates(gaps: np.ndarray | ChirpSpec, k_min: int | None = None,
                 packet_bits: float | None = None) -> np.ndarray:
    """Average input rate of every K_min-gap sliding window, in Mbps."""
    if isinstance(gaps, ChirpSpec):
        k_min = gaps.k_min if k_min is None else k_min
        packet_bits = gaps.packet_bits if packet_bits is None else packet_bits
        gaps = spacings(gaps)
    if k_min is None or packet_bits is None:
        raise ChirpError("k_min and packet_bits are required with a raw gap vector")
    gaps = np.asarray(gaps, dtype=float)
    if gaps.size < k_min:
        raise ChirpError("gap vector shorter than the window")
    sums = np.convolve(gaps, np.ones(k_min), mode="valid")
    return k_min * packet_bits / (sums * MBPS)


@dataclass
class ChirpObservation:
    """Per-window input rates, output rates and binary outcomes of one chirp."""

    path: int
    rates: np.ndarray
    out_rates: np.ndarray
    outcomes: np.ndarray
    t: int = 0
    windows: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        self.out_rates = np.asarray(self.out_rates, dtype=float)
        self.outcomes = np.asarray(self.outcomes, dtype=np.int8)
        if not (self.rates.shape == self.out_rates.shape == self.outcomes.shape):
            raise ChirpError("observation vectors must have equal length")
        if self.windows is None:
            self.windows = np.arange(self.rates.size)

    def __len__(self):
        return int(self.rates.size)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "t": self.t,
            "rates": self.rates.tolist(),
            "out_rates": self.out_rates.tolist(),
            "outcomes": self.outcomes.tolist(),
            "windows": np.asarray(self.windows).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChirpObservation":
        return cls(path=int(data["path"]), rates=data["rates"], out_rates=data["out_rates"],
                   outcomes=data["outcomes"], t=int(data.get("t", 0)),
                   windows=np.asarray(data.get("windows", range(len(data["rates"])))))


def outcomes(rates: np.ndarray, out_rates: np.ndarray, epsilon: float) -> np.ndarray:
    """z(k) = 1 when the output rate is within epsilon of the input rate."""
    return (np.asarray(out_rates) >= np.asarray(rates) - epsilon).astype(np.int8)


def discarded_packets(send_times: np.ndarray, target_gaps: np.ndarray,
                      rel_tol: float = 0.1, abs_tol: float = 20e-6) -> np.ndarray:
    """Mask of packets sent late relative to their target gap.

    Packet ``i`` is discarded when the actual gap since packet ``i-1``
    exceeds ``tau(i-1) + max(rel_tol * tau(i-1), abs_tol)``.  The slack
    absorbs ordinary timer jitter; only genuine sender stalls trip it.
    """
    send_times = np.asarray(send_times, dtype=float)
    target_gaps = np.asarray(target_gaps, dtype=float)
    bad = np.zeros(send_times.size, dtype=bool)
    valid = np.isfinite(send_times)
    actual = np.diff(send_times)
    limit = target_gaps + np.maximum(rel_tol * target_gaps, abs_tol)
    late = valid[1:] & valid[:-1] & (actual > limit)
    bad[1:] = late
    return bad


def interpret(send_times, recv_times, spec: ChirpSpec, epsilon: float = 5.0, path: int = 0,
              t: int = 0, rel_tol: float = 0.1, abs_tol: float = 20e-6,
              exclude=None) -> ChirpObservation:
    """Turn per-packet timestamps (seconds, NaN = lost) into an observation.

    Input rates use the actual send gaps, output rates the receiver
    inter-arrival gaps only.  Any window touching a lost or discarded
    packet is dropped; ``exclude`` marks extra packets the sender knows
    to be unreliable.
    """
    send = np.asarray(send_times, dtype=float)
    recv = np.asarray(recv_times, dtype=float)
    if send.shape != (spec.k,) or recv.shape != (spec.k,):
        raise ChirpError(f"expected {spec.k} timestamps per side")

    target = spacings(spec)
    bad = ~np.isfinite(send) | ~np.isfinite(recv)
    bad |= discarded_packets(send, target, rel_tol, abs_tol)
    if exclude is not None:
        bad |= np.asarray(exclude, dtype=bool)
    if spec.k - bad.sum() < spec.k_min + 1:
        raise EmptyObservationError("fewer than K_min + 1 usable packets")

    # window k spans packets k .. k + K_min
    n_win = spec.n_rates
    bad_counts = np.convolve(bad.astype(int), np.ones(spec.k_min + 1, dtype=int), mode="valid")
    keep = np.flatnonzero(bad_counts[:n_win] == 0)
    if keep.size == 0:
        raise EmptyObservationError("no window free of lost or discarded packets")

    span_in = send[keep + spec.k_min] - send[keep]
    span_out = recv[keep + spec.k_min] - recv[keep]
    bits = spec.k_min * spec.packet_bits
    rates = bits / (span_in * MBPS)
    with np.errstate(divide="ignore"):
        out_rates = np.where(span_out > 0, bits / (np.maximum(span_out, 1e-300) * MBPS), np.inf)
    return ChirpObservation(path=path, rates=rates, out_rates=out_rates,
                            outcomes=outcomes(rates, out_rates, epsilon), t=t, windows=keep)
