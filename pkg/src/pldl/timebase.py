"""Imperfect-oscillator clock models and two-way (PTP-style) offset/drift estimation.

Every device in the facility stamps samples with its own local oscillator.
This module maps those per-device timelines onto one global timeline: an
affine clock model (offset + linear drift) with optional i.i.d. timestamp
jitter, two-way message exchanges to estimate instantaneous offset and path
delay, and least-squares drift estimation over a window of exchanges.

Timestamps are held as integer nanoseconds internally so that differences
like t2-t1 stay exact at large absolute times; seconds appear only at API
boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

NS = 1_000_000_000


class InsufficientSamples(ValueError):
    """Drift estimation needs at least two samples with distinct times."""


def _to_ns(t_s: float) -> int:
    return round(t_s * NS)


@dataclass
class ClockModel:
    """Affine local-oscillator model: local = true*(1 + drift_ppm*1e-6) + offset.

    jitter_std_s adds zero-mean Gaussian noise to every reading (rounded to
    whole nanoseconds). The RNG is owned by the instance; do not share one
    instance across threads without external serialization.
    """

    clock_id: str
    offset_s: float = 0.0
    drift_ppm: float = 0.0
    jitter_std_s: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.jitter_std_s < 0:
            raise ValueError("jitter_std_s must be >= 0")
        if not math.isfinite(self.drift_ppm):
            raise ValueError("drift_ppm must be finite")
        self._rng = np.random.default_rng(self.seed)

    def local_time_ns(self, t_true_ns: int) -> int:
        """Local reading, in integer nanoseconds, for a true time in ns."""
        skew_ns = round(t_true_ns * (self.drift_ppm * 1e-6))
        out = t_true_ns + skew_ns + _to_ns(self.offset_s)
        if self.jitter_std_s > 0.0:
            out += round(float(self._rng.normal(0.0, self.jitter_std_s)) * NS)
        return out

    def local_time(self, t_true_s: float) -> float:
        """Local reading in seconds for a true time in seconds.

        Deterministic when jitter_std_s == 0.
        """
        if t_true_s < 0:
            raise ValueError("t_true_s must be >= 0")
        return self.local_time_ns(_to_ns(t_true_s)) / NS


def local_time(clock: ClockModel, t_true_s: float) -> float:
    return clock.local_time(t_true_s)


@dataclass(frozen=True)
class ExchangeRecord:
    """Timestamps of one two-way exchange, integer ns in each clock domain.

    t1/t4 are read on the initiator (request send, reply receive); t2/t3 on
    the responder (request receive, reply send).
    """

    t1_ns: int
    t2_ns: int
    t3_ns: int
    t4_ns: int

    def __post_init__(self):
        if self.t4_ns < self.t1_ns:
            raise ValueError("t4 must be >= t1 in the initiator domain")
        if self.t3_ns < self.t2_ns:
            raise ValueError("t3 must be >= t2 in the responder domain")

    @property
    def t1(self) -> float:
        return self.t1_ns / NS

    @property
    def t2(self) -> float:
        return self.t2_ns / NS

    @property
    def t3(self) -> float:
        return self.t3_ns / NS

    @property
    def t4(self) -> float:
        return self.t4_ns / NS


@dataclass(frozen=True)
class ClockEstimate:
    """Estimated correction mapping a local clock back to global time."""

    offset_est_s: float
    delay_est_s: float
    drift_est_ppm: float
    residual_std_s: float
    n_exchanges: int

    def __post_init__(self):
        if self.delay_est_s < 0:
            raise ValueError("delay_est_s must be >= 0 after clamping")
        if self.residual_std_s < 0:
            raise ValueError("residual_std_s must be >= 0")


IDENTITY_ESTIMATE = ClockEstimate(0.0, 0.0, 0.0, 0.0, 0)


class OffsetDelay(NamedTuple):
    offset_s: float
    delay_s: float
    negative_delay: bool


def two_way_exchange(
    initiator: ClockModel,
    responder: ClockModel,
    t_start_s: float,
    delay_fwd_s: float,
    delay_rev_s: float,
    turnaround_s: float = 0.0,
) -> ExchangeRecord:
    """Simulate one request/reply exchange and return its four timestamps."""
    if delay_fwd_s < 0 or delay_rev_s < 0 or turnaround_s < 0:
        raise ValueError("delays and turnaround must be >= 0")
    t0 = _to_ns(t_start_s)
    fwd = _to_ns(delay_fwd_s)
    rev = _to_ns(delay_rev_s)
    turn = _to_ns(turnaround_s)
    t1 = initiator.local_time_ns(t0)
    t2 = responder.local_time_ns(t0 + fwd)
    # timestamp counters never step backwards between two reads on the same
    # clock, even when read jitter would say otherwise
    t3 = max(responder.local_time_ns(t0 + fwd + turn), t2)
    t4 = max(initiator.local_time_ns(t0 + fwd + turn + rev), t1)
    return ExchangeRecord(t1_ns=t1, t2_ns=t2, t3_ns=t3, t4_ns=t4)


def estimate_offset_delay(rec: ExchangeRecord) -> OffsetDelay:
    """Classic two-way closed form.

    offset = ((t2-t1) - (t4-t3)) / 2, delay = ((t2-t1) + (t4-t3)) / 2.
    A negative computed delay (gross asymmetry or corrupt timestamps) is
    clamped to zero and flagged rather than rejected.
    """
    d_fwd = rec.t2_ns - rec.t1_ns
    d_rev = rec.t4_ns - rec.t3_ns
    offset_ns = (d_fwd - d_rev) / 2.0
    delay_ns = (d_fwd + d_rev) / 2.0
    negative = delay_ns < 0.0
    if negative:
        delay_ns = 0.0
    return OffsetDelay(offset_ns / NS, delay_ns / NS, negative)


def estimate_drift(
    samples: Sequence[tuple[float, float]],
    window: Optional[int] = 64,
    delays_s: Optional[Sequence[float]] = None,
) -> ClockEstimate:
    """Least-squares drift estimate from (t_true_s, offset_est_s) samples.

    Fits offset(t) = a + b*t over the most recent `window` samples (None
    uses all). drift_est_ppm is the slope in ppm, offset_est_s the
    intercept, residual_std_s the RMS regression residual. delays_s, when
    given, fills delay_est_s with the mean estimated one-way delay.
    """
    pts = list(samples)
    if window is not None and window > 0:
        pts = pts[-window:]
    if len(pts) < 2:
        raise InsufficientSamples("need >= 2 (t, offset) samples")
    t = np.asarray([p[0] for p in pts], dtype=np.float64)
    off = np.asarray([p[1] for p in pts], dtype=np.float64)
    tc = t - t.mean()
    sxx = float(np.dot(tc, tc))
    if sxx == 0.0:
        raise InsufficientSamples("samples have zero time spread")
    slope = float(np.dot(tc, off - off.mean())) / sxx
    intercept = float(off.mean() - slope * t.mean())
    resid = off - (intercept + slope * t)
    delay = 0.0
    if delays_s is not None and len(delays_s) > 0:
        delay = max(float(np.mean(np.asarray(delays_s, dtype=np.float64))), 0.0)
    return ClockEstimate(
        offset_est_s=intercept,
        delay_est_s=delay,
        drift_est_ppm=slope * 1e6,
        residual_std_s=float(np.sqrt(np.mean(resid**2))),
        n_exchanges=len(pts),
    )


def to_global_ns(est: ClockEstimate, t_local_ns: int) -> int:
    """Map a local timestamp (ns) back to the global timeline (ns)."""
    scale = 1.0 + est.drift_est_ppm * 1e-6
    return round((t_local_ns - est.offset_est_s * NS) / scale)


def to_global(est: ClockEstimate, t_local_s: float) -> float:
    """Inverse of the estimated clock map, seconds in/out.

    With the estimate equal to the true model parameters and zero jitter,
    to_global(local_time(t)) == t to within 1e-12 s.
    """
    return to_global_ns(est, _to_ns(t_local_s)) / NS


@dataclass(frozen=True)
class SyncSession:
    """Result of a simulated multi-exchange synchronization run."""

    records: tuple[ExchangeRecord, ...]
    offsets: tuple[tuple[float, float], ...]  # (t_true_s, offset_est_s)
    delays: tuple[float, ...]
    negative_delays: int
    estimate: ClockEstimate


def run_sync_session(
    initiator: ClockModel,
    responder: ClockModel,
    n_exchanges: int,
    interval_s: float = 1.0,
    delay_fwd_s: float = 1e-6,
    delay_rev_s: Optional[float] = None,
    turnaround_s: float = 0.0,
    t0_s: float = 0.0,
    window: Optional[int] = 64,
) -> SyncSession:
    """Run n periodic two-way exchanges and estimate offset, delay and drift.

    delay_rev_s defaults to delay_fwd_s (symmetric link).
    """
    if n_exchanges < 1:
        raise ValueError("n_exchanges must be >= 1")
    rev = delay_fwd_s if delay_rev_s is None else delay_rev_s
    records: list[ExchangeRecord] = []
    offsets: list[tuple[float, float]] = []
    delays: list[float] = []
    negative = 0
    for k in range(n_exchanges):
        t = t0_s + k * interval_s
        rec = two_way_exchange(initiator, responder, t, delay_fwd_s, rev, turnaround_s)
        od = estimate_offset_delay(rec)
        records.append(rec)
        offsets.append((t, od.offset_s))
        delays.append(od.delay_s)
        negative += int(od.negative_delay)
    if n_exchanges >= 2:
        est = estimate_drift(offsets, window=window, delays_s=delays)
    else:
        od = estimate_offset_delay(records[0])
        est = ClockEstimate(od.offset_s, od.delay_s, 0.0, 0.0, 1)
    return SyncSession(tuple(records), tuple(offsets), tuple(delays), negative, est)
