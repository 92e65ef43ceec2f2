"""Experiment lifecycle engine: the in-process control plane.

An experiment walks CREATED -> ARMED -> CAPTURING -> FINALIZING ->
COMPLETE, with abort/fail escapes from any non-terminal state. Arming
allocates the ring and opens the source; starting spawns a paced capture
thread; a trigger freezes a window around the newest sample; stop or
trigger completion finalizes: labels are aligned, the dataset exported,
and the experiment lands in COMPLETE with exactly one dataset id.

Specs are immutable once created; a changed setup is a new experiment.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from . import dataset as dataset_mod
from .ingest import (
    EndOfStream,
    FileReplayConfig,
    NetworkListenerConfig,
    OfdmLinkConfig,
    PrngConfig,
    ReceiveTimeout,
    ToneConfig,
    open_source,
)
from .labeling import (
    LabeledCapture,
    LabelPolicy,
    label_capture,
    policy_for_rate,
    raster_path,
    simulate_motion,
)
from .phy import OfdmConfig
from .ringstore import RingConfig, RingStore
from .timebase import IDENTITY_ESTIMATE

STATES = ("CREATED", "ARMED", "CAPTURING", "FINALIZING", "COMPLETE", "FAILED", "ABORTED")
TERMINAL_STATES = frozenset({"COMPLETE", "FAILED", "ABORTED"})
EVENTS = ("arm", "start", "trigger", "stop", "abort", "finalize_done", "fail")

_TABLE = {
    ("CREATED", "arm"): "ARMED",
    ("ARMED", "start"): "CAPTURING",
    ("CAPTURING", "trigger"): "CAPTURING",  # snapshot requested, still capturing
    ("CAPTURING", "stop"): "FINALIZING",
    ("FINALIZING", "finalize_done"): "COMPLETE",
}


class ValidationError(ValueError):
    """Spec rejected; .errors holds per-field messages."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


class NotFound(KeyError):
    pass


class IllegalTransition(RuntimeError):
    def __init__(self, state: str, event: str):
        self.state, self.event = state, event
        super().__init__(f"event {event!r} not legal in state {state!r}")


class RangeNotSatisfiable(ValueError):
    pass


def next_state(state: str, event: str) -> str:
    """Pure transition table; IllegalTransition outside the documented graph."""
    if event not in EVENTS:
        raise IllegalTransition(state, event)
    if state not in TERMINAL_STATES:
        if event == "abort":
            return "ABORTED"
        if event == "fail":
            return "FAILED"
    got = _TABLE.get((state, event))
    if got is None:
        raise IllegalTransition(state, event)
    return got


SOURCE_KINDS = {
    "tone": ToneConfig,
    "prng": PrngConfig,
    "ofdm": OfdmLinkConfig,
    "file": FileReplayConfig,
    "udp": NetworkListenerConfig,
}


def source_config_from_dict(d: dict):
    """Build a source config from {"kind": ..., <fields>}."""
    d = dict(d)
    kind = d.pop("kind", None)
    cls = SOURCE_KINDS.get(kind)
    if cls is None:
        raise ValidationError([("sources.kind", f"unknown source kind {kind!r}")])
    if kind == "ofdm":
        from .phy import ChannelSpec

        d["ofdm"] = OfdmConfig(**d.get("ofdm", {}))
        d["channel"] = ChannelSpec(**d.get("channel", {}))
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ValidationError([("sources", str(exc))]) from exc


@dataclass(frozen=True)
class MotionSourceConfig:
    """Simulated positioner sweeping a serpentine raster while publishing."""

    source_id: str = "sim"
    rate_hz: float = 100.0
    x_span_m: float = 1.0
    y_span_m: float = 1.0
    step_m: float = 0.25
    speed_mps: float = 0.5
    noise_std_m: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rate_hz <= 0 or self.speed_mps <= 0 or self.step_m <= 0:
            raise ValueError("rate, speed and step must be > 0")

    def series(self):
        path = raster_path(0.0, self.x_span_m, 0.0, self.y_span_m, self.step_m)
        return simulate_motion(
            path,
            self.speed_mps,
            self.rate_hz,
            seed=self.seed,
            source_id=self.source_id,
            position_noise_std_m=self.noise_std_m,
        )


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    sources: tuple  # source configs; exactly one capture stream
    ring_budget_bytes: int
    output_dir: str
    label_sources: tuple = ()  # MotionSourceConfig entries
    label_policy: Optional[LabelPolicy] = None
    pipeline: Optional[OfdmConfig] = None
    trigger_pre_s: float = 0.1
    trigger_post_s: float = 0.1

    def validate(self):
        errors = []
        if not self.name:
            errors.append(("name", "must be non-empty"))
        if len(self.sources) < 1:
            errors.append(("sources", "at least one source required"))
        elif len(self.sources) > 1:
            errors.append(("sources", "one capture stream per experiment"))
        if self.ring_budget_bytes <= 0:
            errors.append(("ring_budget_bytes", "must be > 0"))
        if not self.output_dir:
            errors.append(("output_dir", "must be non-empty"))
        if self.trigger_pre_s < 0 or self.trigger_post_s < 0:
            errors.append(("trigger", "pre/post seconds must be >= 0"))
        ids = [ls.source_id for ls in self.label_sources]
        if len(set(ids)) != len(ids):
            errors.append(("label_sources", "source ids must be unique"))
        if errors:
            raise ValidationError(errors)


@dataclass
class _Record:
    experiment_id: str
    spec: ExperimentSpec
    state: str = "CREATED"
    history: list = field(default_factory=list)  # (state, wall ns)
    error: Optional[str] = None
    dataset_id: Optional[str] = None
    lock: threading.RLock = field(default_factory=threading.RLock)
    source: object = None
    ring: Optional[RingStore] = None
    session: object = None
    thread: Optional[threading.Thread] = None
    stop_event: threading.Event = field(default_factory=threading.Event)
    started_at: Optional[float] = None
    label_series: dict = field(default_factory=dict)
    finalize_claimed: bool = False


@dataclass(frozen=True)
class StatusReport:
    experiment_id: str
    name: str
    state: str
    history: tuple
    error: Optional[str]
    dataset_id: Optional[str]
    ring_occupancy_bytes: int
    ring_block_count: int
    drop_stats: dict
    label_staleness: dict  # source_id -> seconds past the policy gap, 0 if fresh
    capture_elapsed_s: float

    def to_dict(self) -> dict:
        return asdict(self)


_CAPTURE_BLOCK_S = 0.02  # pacing quantum for simulated sources


class ExperimentEngine:
    """Owns all experiments and the dataset registry of one process."""

    def __init__(self, data_root: Optional[str] = None):
        self.data_root = data_root or os.environ.get("PLDL_DATA_DIR", ".")
        self._records: dict[str, _Record] = {}
        self._datasets: dict[str, str] = {}  # dataset_id -> directory
        self._registry_lock = threading.Lock()

    # ------------------------------------------------------------ lifecycle

    def create_experiment(self, spec: ExperimentSpec) -> str:
        spec.validate()
        experiment_id = uuid.uuid4().hex[:12]
        rec = _Record(experiment_id=experiment_id, spec=spec)
        rec.history.append(("CREATED", time.time_ns()))
        with self._registry_lock:
            self._records[experiment_id] = rec
        return experiment_id

    def _get(self, experiment_id: str) -> _Record:
        rec = self._records.get(experiment_id)
        if rec is None:
            raise NotFound(experiment_id)
        return rec

    def _apply(self, rec: _Record, event: str) -> str:
        new = next_state(rec.state, event)
        rec.state = new
        rec.history.append((new, time.time_ns()))
        return new

    def transition(self, experiment_id: str, event: str, **kwargs) -> str:
        rec = self._get(experiment_id)
        with rec.lock:
            if event == "arm":
                self._apply(rec, event)
                try:
                    self._arm(rec)
                except Exception as exc:
                    rec.error = f"arm failed: {exc}"
                    self._apply(rec, "fail")
                    raise
            elif event == "start":
                self._apply(rec, event)
                self._start(rec)
            elif event == "trigger":
                self._apply(rec, event)
                self._trigger(rec, **kwargs)
            elif event == "stop":
                self._apply(rec, event)  # CAPTURING -> FINALIZING
            elif event == "abort":
                self._apply(rec, event)
                self._teardown(rec)
            elif event == "fail":
                rec.error = kwargs.get("detail", rec.error) or "operator fail"
                self._apply(rec, event)
                self._teardown(rec)
            else:  # finalize_done: only legal in FINALIZING; runs the export
                next_state(rec.state, event)
            state = rec.state
        if event in ("stop", "finalize_done"):
            self._stop_and_finalize(rec)
            state = rec.state
        return state

    def _arm(self, rec: _Record):
        rec.source = open_source(rec.spec.sources[0])
        rec.ring = RingStore(
            RingConfig(
                ram_budget_bytes=rec.spec.ring_budget_bytes,
                descriptor=rec.source.descriptor,
            )
        )
        rec.label_series = {
            ls.source_id: ls.series() for ls in rec.spec.label_sources
        }

    def _start(self, rec: _Record):
        rec.started_at = time.perf_counter()
        rec.thread = threading.Thread(
            target=self._capture_loop, args=(rec,), daemon=True
        )
        rec.thread.start()

    def _trigger(self, rec: _Record, pre_s: Optional[float] = None,
                 post_s: Optional[float] = None):
        pre = rec.spec.trigger_pre_s if pre_s is None else pre_s
        post = rec.spec.trigger_post_s if post_s is None else post_s
        rec.session = rec.ring.trigger_freeze(pre, post)

    def _capture_loop(self, rec: _Record):
        src, ring = rec.source, rec.ring
        fs = src.descriptor.sample_rate_sps
        n = max(1, int(round(fs * _CAPTURE_BLOCK_S)))
        # network sources deliver at the sender's pace; simulated ones are
        # paced here so ring occupancy tracks the nominal rate in real time
        paced = not isinstance(rec.spec.sources[0], NetworkListenerConfig)
        t0 = rec.started_at
        k = 0
        while not rec.stop_event.is_set():
            if paced:
                deadline = t0 + k * (n / fs)
                now = time.perf_counter()
                if now < deadline:
                    time.sleep(min(deadline - now, 0.05))
                    continue
            try:
                blk = src.next_block(n)
            except EndOfStream:
                self._finalize(rec, rec.session)
                return
            except ReceiveTimeout:
                continue
            except Exception as exc:
                with rec.lock:
                    if rec.state == "CAPTURING":
                        rec.error = f"capture failed: {exc}"
                        self._apply(rec, "fail")
                        self._teardown(rec)
                return
            ring.append(blk)
            k += 1
            session = rec.session
            if session is not None and session.complete:
                self._finalize(rec, session)
                return

    def _stop_and_finalize(self, rec: _Record):
        rec.stop_event.set()
        if rec.thread is not None:
            rec.thread.join()
        self._finalize(rec, rec.session, already_finalizing=True)

    def _finalize(self, rec: _Record, session, already_finalizing: bool = False):
        with rec.lock:
            if not already_finalizing:
                if rec.state != "CAPTURING":
                    return  # someone else finalized or aborted first
                self._apply(rec, "stop")
            elif rec.state != "FINALIZING":
                return
            if rec.finalize_claimed:
                return
            rec.finalize_claimed = True
        rec.stop_event.set()
        try:
            if session is not None and session.complete:
                blocks = session.result()
            else:
                blocks = self._all_retained(rec.ring)
            capture = self._label(rec, blocks)
            os.makedirs(rec.spec.output_dir, exist_ok=True)
            manifest = dataset_mod.export(capture, rec.spec.output_dir)
            with rec.lock:
                rec.dataset_id = manifest.dataset_id
                self._apply(rec, "finalize_done")
            with self._registry_lock:
                self._datasets[manifest.dataset_id] = rec.spec.output_dir
        except Exception as exc:
            with rec.lock:
                rec.error = f"finalize failed: {exc}"
                if rec.state not in TERMINAL_STATES:
                    self._apply(rec, "fail")
        finally:
            self._teardown(rec)

    def _all_retained(self, ring: RingStore) -> tuple:
        state = ring.state()
        if state.block_count == 0:
            return ()
        return ring.snapshot(state.oldest_sample_index, state.newest_sample_index)

    def _label(self, rec: _Record, blocks) -> LabeledCapture:
        spec = rec.spec
        policy = spec.label_policy
        if policy is None:
            rates = [ls.rate_hz for ls in spec.label_sources]
            policy = policy_for_rate(min(rates)) if rates else LabelPolicy(
                max_gap_ns=10**9
            )
        provenance = {"experiment": spec.name}
        if spec.pipeline is not None:
            digest = hashlib.sha256(
                json.dumps(asdict(spec.pipeline), sort_keys=True).encode()
            ).hexdigest()
            provenance["pipeline_config_sha256"] = digest
        return label_capture(
            blocks,
            rec.label_series,
            stream_clock_est=IDENTITY_ESTIMATE,
            policy=policy,
            descriptor=rec.source.descriptor,
            provenance=json.dumps(provenance, sort_keys=True),
        )

    def _teardown(self, rec: _Record):
        rec.stop_event.set()
        if rec.thread is not None and rec.thread is not threading.current_thread():
            rec.thread.join(timeout=5.0)
        if rec.source is not None:
            try:
                rec.source.close()
            except Exception:
                pass

    # ------------------------------------------------------------- queries

    def status(self, experiment_id: str) -> StatusReport:
        rec = self._get(experiment_id)
        with rec.lock:
            occupancy = blocks = 0
            if rec.ring is not None:
                ring_state = rec.ring.state()
                occupancy = ring_state.bytes_used
                blocks = ring_state.block_count
            drops = asdict(rec.source.drop_stats()) if rec.source is not None else {}
            staleness = self._staleness(rec)
            elapsed = (
                time.perf_counter() - rec.started_at if rec.started_at else 0.0
            )
            return StatusReport(
                experiment_id=rec.experiment_id,
                name=rec.spec.name,
                state=rec.state,
                history=tuple(rec.history),
                error=rec.error,
                dataset_id=rec.dataset_id,
                ring_occupancy_bytes=occupancy,
                ring_block_count=blocks,
                drop_stats=drops,
                label_staleness=staleness,
                capture_elapsed_s=elapsed,
            )

    def _staleness(self, rec: _Record) -> dict:
        if not rec.label_series or rec.started_at is None:
            return {src: 0.0 for src in rec.label_series}
        now_ns = round((time.perf_counter() - rec.started_at) * 1e9)
        policy = rec.spec.label_policy
        gap_ns = policy.max_gap_ns if policy else 10**9
        out = {}
        for src, series in rec.label_series.items():
            last = series[-1].t_ns if series else -gap_ns
            out[src] = max(0.0, (now_ns - last - gap_ns) / 1e9)
        return out

    def list_experiments(self) -> list:
        with self._registry_lock:
            return sorted(self._records)

    # ------------------------------------------------------------- datasets

    def list_datasets(self) -> list:
        with self._registry_lock:
            ids = set(self._datasets)
        ids.update(dataset_mod.list_datasets(self.data_root))
        return sorted(ids)

    def _dataset_dir(self, dataset_id: str) -> str:
        with self._registry_lock:
            directory = self._datasets.get(dataset_id)
        if directory is None:
            if dataset_id in dataset_mod.list_datasets(self.data_root):
                directory = self.data_root
        if directory is None:
            raise NotFound(dataset_id)
        return directory

    def fetch_manifest(self, dataset_id: str) -> dict:
        directory = self._dataset_dir(dataset_id)
        try:
            manifest = dataset_mod.read_manifest(directory, dataset_id)
        except dataset_mod.MissingFile as exc:
            raise NotFound(dataset_id) from exc
        return asdict(manifest)

    def fetch_data(
        self, dataset_id: str, start: int = 0, end: Optional[int] = None
    ) -> bytes:
        """Exact byte slice [start, end) of the dataset's sample file."""
        directory = self._dataset_dir(dataset_id)
        path = os.path.join(directory, dataset_id + ".iq")
        if not os.path.exists(path):
            raise NotFound(dataset_id)
        size = os.path.getsize(path)
        if end is None:
            end = size
        if start < 0 or end < start or start > size or end > size:
            raise RangeNotSatisfiable(f"range [{start}, {end}) outside 0..{size}")
        with open(path, "rb") as fh:
            fh.seek(start)
            return fh.read(end - start)

    def close(self):
        for experiment_id in self.list_experiments():
            rec = self._records[experiment_id]
            with rec.lock:
                if rec.state not in TERMINAL_STATES:
                    try:
                        self.transition(experiment_id, "abort")
                    except IllegalTransition:
                        pass
