"""Position labels for IQ captures.

Ingests position/orientation streams (motion-capture-like or
XY-positioner-like), aligns them with block timestamps on the global
timeline, and attaches one label per block at the block midpoint. Also
generates serpentine raster paths and constant-speed simulated motion for
automated desk experiments.

Label record format (files, TCP, dataset sidecars): one JSON object per
line with fields source_id, t_ns, x, y, z, qw, qx, qy, qz, quality.
"""

from __future__ import annotations

import json
import math
import socket
import socketserver
import threading
from bisect import bisect_left
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .ingest import IQBlock, StreamDescriptor, sample_index_to_ns
from .timebase import IDENTITY_ESTIMATE, ClockEstimate, to_global_ns


class StaleLabel(LookupError):
    pass


class EmptyPath(ValueError):
    pass


@dataclass(frozen=True)
class PositionSample:
    source_id: str
    t_ns: int
    x: float
    y: float
    z: float = 0.0
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0
    quality: float = 1.0

    def __post_init__(self):
        norm = math.sqrt(self.qw**2 + self.qx**2 + self.qy**2 + self.qz**2)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm} not within 1e-6 of 1")
        if not (0.0 <= self.quality <= 1.0):
            raise ValueError("quality must lie in [0, 1]")


@dataclass(frozen=True)
class LabelPolicy:
    max_gap_ns: int
    interpolation: str = "linear"

    def __post_init__(self):
        if self.max_gap_ns <= 0:
            raise ValueError("max_gap_ns must be > 0")
        if self.interpolation not in ("linear", "nearest"):
            raise ValueError("interpolation must be 'linear' or 'nearest'")


def policy_for_rate(rate_hz: float, periods: float = 3.0,
                    interpolation: str = "linear") -> LabelPolicy:
    """Staleness bound of `periods` nominal label periods (default 3)."""
    if rate_hz <= 0:
        raise ValueError("rate_hz must be > 0")
    return LabelPolicy(max_gap_ns=round(periods / rate_hz * 1e9),
                       interpolation=interpolation)


def _lerp(a: float, b: float, w: float) -> float:
    return a + (b - a) * w


def _interp(lo: PositionSample, hi: PositionSample, t_ns: int) -> PositionSample:
    w = (t_ns - lo.t_ns) / (hi.t_ns - lo.t_ns)
    # normalized linear quaternion interpolation, shorter arc
    qw2, qx2, qy2, qz2 = hi.qw, hi.qx, hi.qy, hi.qz
    dot = lo.qw * qw2 + lo.qx * qx2 + lo.qy * qy2 + lo.qz * qz2
    if dot < 0.0:
        qw2, qx2, qy2, qz2 = -qw2, -qx2, -qy2, -qz2
    qw = _lerp(lo.qw, qw2, w)
    qx = _lerp(lo.qx, qx2, w)
    qy = _lerp(lo.qy, qy2, w)
    qz = _lerp(lo.qz, qz2, w)
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n == 0.0:  # antipodal endpoints at w=0.5; fall back to the earlier one
        qw, qx, qy, qz, n = lo.qw, lo.qx, lo.qy, lo.qz, 1.0
    return PositionSample(
        source_id=lo.source_id,
        t_ns=t_ns,
        x=_lerp(lo.x, hi.x, w),
        y=_lerp(lo.y, hi.y, w),
        z=_lerp(lo.z, hi.z, w),
        qw=qw / n,
        qx=qx / n,
        qy=qy / n,
        qz=qz / n,
        quality=_lerp(lo.quality, hi.quality, w),
    )


def align(series: Sequence[PositionSample], t_query_ns: int,
          policy: LabelPolicy) -> PositionSample:
    """Value of a sorted label series at one query time.

    Exact hits return the stored sample unchanged under both policies.
    Queries outside the series span are served by the nearest end sample
    while within max_gap_ns of it; 'linear' additionally requires the
    bracketing gap to be <= max_gap_ns.
    """
    if not series:
        raise StaleLabel("empty label series")
    times = [s.t_ns for s in series]
    i = bisect_left(times, t_query_ns)
    if i < len(series) and times[i] == t_query_ns:
        return series[i]
    if i == 0 or i == len(series):  # outside the span
        edge = series[0] if i == 0 else series[-1]
        if abs(t_query_ns - edge.t_ns) > policy.max_gap_ns:
            raise StaleLabel(
                f"query {t_query_ns} lies {abs(t_query_ns - edge.t_ns)} ns "
                f"outside the series span"
            )
        return edge
    lo, hi = series[i - 1], series[i]
    if policy.interpolation == "nearest":
        d_lo = t_query_ns - lo.t_ns
        d_hi = hi.t_ns - t_query_ns
        near, dist = (lo, d_lo) if d_lo <= d_hi else (hi, d_hi)
        if dist > policy.max_gap_ns:
            raise StaleLabel(f"nearest label is {dist} ns away")
        return near
    if hi.t_ns - lo.t_ns > policy.max_gap_ns:
        raise StaleLabel(f"bracketing gap {hi.t_ns - lo.t_ns} ns exceeds bound")
    return _interp(lo, hi, t_query_ns)


@dataclass(frozen=True)
class LabeledCapture:
    """IQ blocks with one label per block per source (None when stale)."""

    blocks: tuple
    labels: tuple  # tuple[dict[str, Optional[PositionSample]], ...]
    descriptor: StreamDescriptor
    policy: LabelPolicy
    provenance: str = ""
    stream_clock_est: ClockEstimate = IDENTITY_ESTIMATE

    def __post_init__(self):
        if len(self.blocks) != len(self.labels):
            raise ValueError("need exactly one label set per block")

    @property
    def stale_counts(self) -> dict:
        out: dict[str, int] = {}
        for per_block in self.labels:
            for src, lab in per_block.items():
                out[src] = out.get(src, 0) + (lab is None)
        return out


def block_midpoint_global_ns(blk: IQBlock, desc: StreamDescriptor,
                             clock_est: ClockEstimate) -> int:
    """Midpoint of a block's span on the global timeline."""
    dur = sample_index_to_ns(blk.n_samples, desc.sample_rate_sps)
    return to_global_ns(clock_est, blk.start_time_local_ns + dur // 2)


def label_capture(
    blocks: Sequence[IQBlock],
    series_by_source: dict,
    stream_clock_est: ClockEstimate,
    policy: LabelPolicy,
    descriptor: StreamDescriptor,
    label_clock_ests: Optional[dict] = None,
    provenance: str = "",
) -> LabeledCapture:
    """Attach per-source labels to every block at its midpoint.

    Block timestamps map to global time through stream_clock_est; label
    timestamps through their source's entry in label_clock_ests (identity
    when absent). Stale lookups become None labels, never failures. IQ
    payloads pass through untouched.
    """
    blocks = tuple(blocks)
    for a, b in zip(blocks, blocks[1:]):
        if b.seq <= a.seq:
            raise ValueError("blocks must be seq-ordered")
    label_clock_ests = label_clock_ests or {}

    mapped: dict[str, list[PositionSample]] = {}
    for src, series in series_by_source.items():
        est = label_clock_ests.get(src, IDENTITY_ESTIMATE)
        srt = sorted(series, key=lambda s: s.t_ns)
        mapped[src] = [
            s if est is IDENTITY_ESTIMATE else replace(s, t_ns=to_global_ns(est, s.t_ns))
            for s in srt
        ]

    labels = []
    for blk in blocks:
        t_mid = block_midpoint_global_ns(blk, descriptor, stream_clock_est)
        per_block: dict[str, Optional[PositionSample]] = {}
        for src, series in mapped.items():
            try:
                per_block[src] = align(series, t_mid, policy)
            except StaleLabel:
                per_block[src] = None
        labels.append(per_block)

    return LabeledCapture(
        blocks=blocks,
        labels=tuple(labels),
        descriptor=descriptor,
        policy=policy,
        provenance=provenance,
        stream_clock_est=stream_clock_est,
    )


# ----------------------------------------------------------- scan paths


def raster_path(x0: float, x1: float, y0: float, y1: float,
                step: float) -> list:
    """Serpentine grid over [x0,x1] x [y0,y1] with the given pitch.

    Returns (x, y) waypoints; consecutive waypoints differ in exactly one
    coordinate by at most `step`.
    """
    if x1 < x0 or y1 < y0:
        raise ValueError("need x1 >= x0 and y1 >= y0")
    if step <= 0:
        raise ValueError("step must be > 0")
    # tolerate float ratios that land a hair under an integer
    cols = int(math.floor((x1 - x0) / step + 1e-9)) + 1
    rows = int(math.floor((y1 - y0) / step + 1e-9)) + 1
    path = []
    for r in range(rows):
        xs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        path.extend((x0 + c * step, y0 + r * step) for c in xs)
    return path


def simulate_motion(
    path: Sequence[tuple],
    speed_mps: float,
    rate_hz: float,
    seed: int = 0,
    source_id: str = "sim",
    position_noise_std_m: float = 0.0,
) -> list:
    """Constant-speed traversal of a waypoint path sampled at rate_hz.

    Identity orientation, quality 1. A zero-length path yields the single
    t=0 sample. position_noise_std_m > 0 adds seeded Gaussian noise.
    """
    if not path:
        raise EmptyPath("path has no waypoints")
    if speed_mps <= 0 or rate_hz <= 0:
        raise ValueError("speed_mps and rate_hz must be > 0")
    pts = [(float(x), float(y)) for x, y in path]
    seg_len = [
        math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(pts, pts[1:])
    ]
    cum = [0.0]
    for L in seg_len:
        cum.append(cum[-1] + L)
    total = cum[-1]
    duration = total / speed_mps
    n = int(math.floor(duration * rate_hz + 1e-9)) + 1

    noise = None
    if position_noise_std_m > 0.0:
        import numpy as np

        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, position_noise_std_m, size=(n, 2))

    out = []
    seg = 0
    for k in range(n):
        t = k / rate_hz
        d = min(t * speed_mps, total)
        while seg < len(seg_len) and d > cum[seg + 1]:
            seg += 1
        if seg_len:
            w = 0.0 if seg_len[seg] == 0 else (d - cum[seg]) / seg_len[seg]
            x = _lerp(pts[seg][0], pts[seg + 1][0], w)
            y = _lerp(pts[seg][1], pts[seg + 1][1], w)
        else:
            x, y = pts[0]
        if noise is not None:
            x += float(noise[k, 0])
            y += float(noise[k, 1])
        out.append(
            PositionSample(source_id=source_id, t_ns=round(t * 1e9), x=x, y=y)
        )
    return out


# ------------------------------------------------------ record I/O / TCP

_FIELDS = ("source_id", "t_ns", "x", "y", "z", "qw", "qx", "qy", "qz", "quality")


def format_label_line(s: PositionSample) -> str:
    return json.dumps({f: getattr(s, f) for f in _FIELDS}, separators=(",", ":"))


def parse_label_line(line: str) -> PositionSample:
    obj = json.loads(line)
    missing = [f for f in _FIELDS if f not in obj]
    if missing:
        raise ValueError(f"label record missing fields: {missing}")
    return PositionSample(**{f: obj[f] for f in _FIELDS})


def write_label_file(path: str, samples: Sequence[PositionSample]):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_label_line(s) + "\n")


def read_label_file(path: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(parse_label_line(line))
    return out


class LabelCollector:
    """Line-delimited TCP collector for live label streams.

    Each connection writes label records, one per line. Records accumulate
    per source_id under a lock; series() returns time-sorted snapshots.
    """

    def __init__(self, port: int = 0, bind_addr: str = "127.0.0.1"):
        self._by_source: dict[str, list[PositionSample]] = {}
        self._lock = threading.Lock()
        self.malformed = 0
        collector = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.decode("utf-8", "replace").strip()
                    if not line:
                        continue
                    try:
                        s = parse_label_line(line)
                    except (ValueError, TypeError):
                        with collector._lock:
                            collector.malformed += 1
                        continue
                    with collector._lock:
                        collector._by_source.setdefault(s.source_id, []).append(s)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((bind_addr, port), Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            daemon=True,
        )
        self._thread.start()

    def series(self) -> dict:
        with self._lock:
            return {
                src: sorted(samples, key=lambda s: s.t_ns)
                for src, samples in self._by_source.items()
            }

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def send_labels(host: str, port: int, samples: Sequence[PositionSample]):
    """Push label records to a collector over TCP (test/demo helper)."""
    with socket.create_connection((host, port), timeout=5.0) as sock:
        payload = "".join(format_label_line(s) + "\n" for s in samples)
        sock.sendall(payload.encode("utf-8"))
