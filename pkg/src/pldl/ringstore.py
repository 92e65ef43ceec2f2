"""RAM-budgeted retention of recent IQ blocks.

A ring holds the most recent blocks of one stream inside a fixed byte
budget, evicting whole blocks oldest-first. Budget accounting covers
sample payload bytes only. Snapshots are independent copies; trigger
sessions freeze a pre-window and keep collecting until their post-window
has elapsed.

Concurrency: one writer (append/trigger_freeze), any number of readers
(snapshot/state). Payload copies happen outside the lock; block payloads
are never mutated in place.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .ingest import IQBlock, StreamDescriptor, byte_rate


class OutOfOrderAppend(ValueError):
    pass


class StreamMismatch(ValueError):
    pass


class WindowEvicted(LookupError):
    pass


@dataclass(frozen=True)
class RingConfig:
    ram_budget_bytes: int
    descriptor: StreamDescriptor

    def __post_init__(self):
        if self.ram_budget_bytes <= 0:
            raise ValueError("ram_budget_bytes must be > 0")


@dataclass(frozen=True)
class RingState:
    oldest_sample_index: Optional[int]
    newest_sample_index: Optional[int]  # index of the newest retained sample
    bytes_used: int
    block_count: int
    seqs: tuple[int, ...]


def plan_capacity(ram_budget_bytes: float, desc: StreamDescriptor) -> float:
    """Seconds of continuous stream a byte budget can retain."""
    return ram_budget_bytes / byte_rate(desc)


def _copy_block(blk: IQBlock) -> IQBlock:
    return replace(blk, samples=np.array(blk.samples, copy=True))


@dataclass
class CaptureSession:
    """A trigger-frozen capture: fixed pre-window plus a growing post-window.

    Blocks are copies, immune to later ring eviction. complete flips once a
    block covering end_sample_index has arrived (or was already retained).
    """

    trigger_sample_index: int
    start_sample_index: int
    end_sample_index: int
    pre_window_truncated: bool
    blocks: list = None  # list[IQBlock]
    complete: bool = False

    def __post_init__(self):
        if self.blocks is None:
            self.blocks = []

    def _offer(self, blk: IQBlock):
        """Writer-side: copy in any block overlapping the remaining window."""
        if self.complete:
            return
        if blk.end_sample_index > self.end_sample_index:
            self.complete = True
        if blk.start_sample_index <= self.end_sample_index and blk.end_sample_index > self.start_sample_index:
            self.blocks.append(_copy_block(blk))

    def result(self) -> list:
        """Seq-ordered copies spanning the session window; call when complete."""
        if not self.complete:
            raise RuntimeError("capture session still collecting")
        return list(self.blocks)


class RingStore:
    """Bounded in-memory block ring for one stream."""

    def __init__(self, cfg: RingConfig):
        self.cfg = cfg
        self._blocks: deque[IQBlock] = deque()
        self._bytes = 0
        self._last_seq: Optional[int] = None
        self._sessions: list[CaptureSession] = []
        self._lock = threading.Lock()

    @property
    def bytes_used(self) -> int:
        return self._bytes

    def state(self) -> RingState:
        with self._lock:
            if not self._blocks:
                return RingState(None, None, 0, 0, ())
            return RingState(
                oldest_sample_index=self._blocks[0].start_sample_index,
                newest_sample_index=self._blocks[-1].end_sample_index - 1,
                bytes_used=self._bytes,
                block_count=len(self._blocks),
                seqs=tuple(b.seq for b in self._blocks),
            )

    def append(self, blk: IQBlock) -> int:
        """Retain a block, evicting oldest-first back under budget.

        Returns the eviction count. A single block larger than the whole
        budget cannot be retained and is itself evicted (counted).
        """
        if blk.stream_id != self.cfg.descriptor.stream_id:
            raise StreamMismatch(
                f"block stream {blk.stream_id!r} != ring stream "
                f"{self.cfg.descriptor.stream_id!r}"
            )
        with self._lock:
            if self._last_seq is not None and blk.seq <= self._last_seq:
                raise OutOfOrderAppend(f"seq {blk.seq} <= last {self._last_seq}")
            self._last_seq = blk.seq
            for s in self._sessions:
                s._offer(blk)
            self._sessions = [s for s in self._sessions if not s.complete]
            self._blocks.append(blk)
            self._bytes += blk.nbytes
            evicted = 0
            while self._bytes > self.cfg.ram_budget_bytes and self._blocks:
                old = self._blocks.popleft()
                self._bytes -= old.nbytes
                evicted += 1
            return evicted

    def snapshot(self, t0_sample: int, t1_sample: int) -> list:
        """Copies of retained blocks overlapping [t0, t1] (sample indices,
        inclusive), in seq order. Raises WindowEvicted when t0 falls before
        the retained window of a non-empty ring."""
        if t0_sample > t1_sample:
            raise ValueError("t0_sample must be <= t1_sample")
        with self._lock:
            if not self._blocks:
                return []
            if t0_sample < self._blocks[0].start_sample_index:
                raise WindowEvicted(
                    f"window start {t0_sample} precedes retained start "
                    f"{self._blocks[0].start_sample_index}"
                )
            picked = [
                b
                for b in self._blocks
                if b.start_sample_index <= t1_sample
                and b.end_sample_index > t0_sample
            ]
        return [_copy_block(b) for b in picked]  # copy outside the lock

    def trigger_freeze(self, pre_s: float, post_s: float) -> CaptureSession:
        """Freeze pre_s seconds of history and collect post_s seconds more.

        The trigger instant is the newest retained sample. When pre_s
        reaches past the retained window the session starts truncated and
        says so via pre_window_truncated.
        """
        if pre_s < 0 or post_s < 0:
            raise ValueError("pre_s and post_s must be >= 0")
        fs = self.cfg.descriptor.sample_rate_sps
        pre_n = round(pre_s * fs)
        post_n = round(post_s * fs)
        with self._lock:
            if self._blocks:
                trigger = self._blocks[-1].end_sample_index - 1
                oldest = self._blocks[0].start_sample_index
            else:
                trigger = 0
                oldest = 0
            start = trigger - pre_n
            truncated = start < oldest
            if truncated:
                start = oldest
            sess = CaptureSession(
                trigger_sample_index=trigger,
                start_sample_index=start,
                end_sample_index=trigger + post_n,
                pre_window_truncated=truncated,
            )
            for b in self._blocks:
                sess._offer(b)
            if self._blocks and self._blocks[-1].end_sample_index > sess.end_sample_index:
                sess.complete = True
            if not sess.complete:
                self._sessions.append(sess)
        return sess
