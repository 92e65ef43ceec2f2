"""Throughput and layout measurement harness.

Three benches: paced synthetic source into a ring (sustained rate and
drops), the frame pipeline across worker counts (throughput plus a
bit-identical output check), and contiguous component arrays against
interleaved heterogeneous records (traversal time ratio). Numbers are
recorded, not judged; the only hard failures are determinism breaks.
"""

from __future__ import annotations

import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ingest import BYTES_PER_SAMPLE, IQBlock, StreamDescriptor
from .phy import ChannelSpec, OfdmConfig, run_split8
from .ringstore import RingConfig, RingStore


class DeterminismViolation(AssertionError):
    pass


def measure_copy_ceiling(n_bytes: int = 1 << 26, repeats: int = 3) -> float:
    """Best-of-n memcpy rate in bytes/second; the desk-scale rate ceiling."""
    src = np.zeros(n_bytes, dtype=np.uint8)
    dst = np.empty_like(src)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        np.copyto(dst, src)
        best = min(best, time.perf_counter() - t0)
    return n_bytes / best


def machine_metadata(include_copy_ceiling: bool = False) -> dict:
    meta = {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }
    if include_copy_ceiling:
        meta["copy_ceiling_bytes_per_s"] = measure_copy_ceiling()
    return meta


@dataclass(frozen=True)
class BenchReport:
    achieved_bytes_per_s: float = 0.0
    drops: int = 0
    stage_throughput: dict = field(default_factory=dict)  # stage -> frames/s
    scaling: tuple = ()  # rows: {workers, seconds, frames_per_s, identical}
    layout_ratio: Optional[float] = None  # contiguous / interleaved time
    machine: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def __post_init__(self):
        if self.achieved_bytes_per_s < 0:
            raise ValueError("achieved rate must be >= 0")


def bench_ingest(
    rate_bps: float,
    seconds: float,
    block_bytes: Optional[int] = None,
    fifo_depth_s: float = 0.25,
    ring_budget_bytes: int = 256 << 20,
) -> BenchReport:
    """Drive a paced synthetic source into a ring at the target byte rate.

    fifo_depth_s models the capture front-end buffer: a block whose append
    starts more than that far behind its scheduled production time is lost,
    the way a DMA ring overruns. Shortfall is data, never an exception.
    achieved = bytes_appended / seconds by definition.
    """
    if rate_bps <= 0 or seconds <= 0:
        raise ValueError("rate and duration must be > 0")
    if fifo_depth_s < 0:
        raise ValueError("fifo_depth_s must be >= 0")
    if block_bytes is None:
        # aim for ~20 blocks/s so pacing is visible at low rates
        block_bytes = min(1 << 20, max(4096, int(rate_bps / 20)))
    block_bytes -= block_bytes % BYTES_PER_SAMPLE
    n_samples = block_bytes // BYTES_PER_SAMPLE

    desc = StreamDescriptor(stream_id="bench", sample_rate_sps=rate_bps / BYTES_PER_SAMPLE)
    ring = RingStore(RingConfig(ram_budget_bytes=ring_budget_bytes, descriptor=desc))
    rng = np.random.default_rng(0)
    template = (rng.normal(size=n_samples) + 1j * rng.normal(size=n_samples)).astype(
        np.complex64
    )

    n_blocks = max(1, math.ceil(rate_bps * seconds / block_bytes))
    block_period = block_bytes / rate_bps
    appended_bytes = 0
    drops = 0
    seq = 0
    pending_drop = False
    t0 = time.perf_counter()
    for k in range(n_blocks):
        deadline = k * block_period
        now = time.perf_counter() - t0
        if now < deadline:
            time.sleep(deadline - now)
            now = deadline
        if now - deadline > fifo_depth_s:
            drops += 1
            seq += 1  # the slot is lost; later blocks keep their schedule
            pending_drop = True
            continue
        blk = IQBlock(
            stream_id="bench",
            seq=seq,
            start_sample_index=k * n_samples,
            start_time_local_ns=round(k * block_period * 1e9),
            samples=template.copy(),  # honest per-block copy cost
            drop_flag=pending_drop,
        )
        ring.append(blk)
        appended_bytes += block_bytes
        seq += 1
        pending_drop = False
    elapsed = time.perf_counter() - t0

    return BenchReport(
        achieved_bytes_per_s=appended_bytes / seconds,
        drops=drops,
        machine=machine_metadata(),
        elapsed_s=elapsed,
    )


def bench_pipeline(
    cfg: OfdmConfig,
    worker_counts: Sequence[int],
    channel: Optional[ChannelSpec] = None,
    n_frames: int = 20,
    seed: int = 0,
) -> BenchReport:
    """Time run_split8 at each worker count on identical input.

    Outputs must be bit-identical across counts; a mismatch raises
    DeterminismViolation. Throughput rows are measurements, not gates.
    """
    counts = list(worker_counts)
    if not counts:
        raise ValueError("worker_counts must be non-empty")
    if channel is None:
        channel = ChannelSpec(taps=(1.0 + 0j, 0.2 - 0.1j), snr_db=20.0, seed=7)

    rows = []
    reference = None
    stage_throughput: dict = {}
    for workers in counts:
        t0 = time.perf_counter()
        report = run_split8(cfg, channel, n_frames, workers=workers, seed=seed)
        dt = time.perf_counter() - t0
        fields = report.deterministic_fields()
        if reference is None:
            reference = fields
            stage_throughput = {
                stage: (n_frames / s if s > 0 else math.inf)
                for stage, s in report.stage_timings.items()
            }
        elif fields != reference:
            raise DeterminismViolation(
                f"workers={workers} output differs from workers={counts[0]}"
            )
        rows.append(
            {
                "workers": workers,
                "seconds": dt,
                "frames_per_s": n_frames / dt if dt > 0 else math.inf,
                "identical": True,
            }
        )

    bits = cfg.data_bits_per_frame * n_frames
    best = min(r["seconds"] for r in rows)
    return BenchReport(
        achieved_bytes_per_s=(bits / 8) / best if best > 0 else 0.0,
        stage_throughput=stage_throughput,
        scaling=tuple(rows),
        machine=machine_metadata(),
        elapsed_s=sum(r["seconds"] for r in rows),
    )


def bench_layout(n_elements: int = 10**8) -> BenchReport:
    """Identical arithmetic over two layouts of the same I/Q data.

    Contiguous: one float32 array per component. Interleaved: one record
    per element with the components buried among unrelated fields. The
    elementwise energy i*i + q*q is order-independent, so both layouts
    must produce bitwise-identical results; only the traversal time may
    differ. Keep n_elements above last-level cache size for a meaningful
    ratio (default 1e8 values).
    """
    if n_elements <= 0:
        raise ValueError("n_elements must be > 0")
    rng = np.random.default_rng(0)
    i = rng.normal(size=n_elements).astype(np.float32)
    q = rng.normal(size=n_elements).astype(np.float32)

    rec_dtype = np.dtype(
        [("i", np.float32), ("q", np.float32), ("tag", np.uint32), ("seq", np.uint32)]
    )
    recs = np.zeros(n_elements, dtype=rec_dtype)
    recs["i"] = i
    recs["q"] = q

    def checksum(energy: np.ndarray) -> int:
        return int(np.sum(energy.view(np.uint32), dtype=np.uint64))

    # warm both paths once, then time one full pass each
    _ = i[:1024] * i[:1024] + q[:1024] * q[:1024]
    _ = recs["i"][:1024] * recs["i"][:1024]

    t0 = time.perf_counter()
    e_cont = i * i + q * q
    t_cont = time.perf_counter() - t0

    t0 = time.perf_counter()
    ri, rq = recs["i"], recs["q"]
    e_rec = ri * ri + rq * rq
    t_rec = time.perf_counter() - t0

    if checksum(e_cont) != checksum(e_rec):
        raise DeterminismViolation("layouts disagree on identical arithmetic")

    return BenchReport(
        layout_ratio=t_cont / t_rec,
        machine=machine_metadata(),
        elapsed_s=t_cont + t_rec,
    )
