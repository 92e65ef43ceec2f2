"""Desk-scale labeled radio data logging: simulated multi-channel IQ
streams, a RAM-budgeted capture ring, a software split-8 PHY, time
transfer, position labeling and bit-exact dataset export."""

from .ingest import IQBlock, StreamDescriptor, byte_rate, open_source
from .ringstore import RingConfig, RingStore, plan_capacity
from .phy import ChannelSpec, OfdmConfig, ebn0_db_to_snr_db, run_split8
from .timebase import (
    ClockEstimate,
    ClockModel,
    estimate_drift,
    estimate_offset_delay,
    run_sync_session,
    two_way_exchange,
)
from .labeling import LabeledCapture, LabelPolicy, PositionSample
from .fronthaul import (
    ApObservation,
    TopologySpec,
    centralized_mrc,
    check_capacity,
    link_loads,
    run_chain,
)
from .dataset import export, import_dataset, list_datasets, verify
from .bench import bench_ingest, bench_layout, bench_pipeline
from .control import ExperimentEngine, ExperimentSpec
from .service import create_app

__version__ = "0.1.0"

__all__ = [
    "ApObservation",
    "ChannelSpec",
    "ClockEstimate",
    "ClockModel",
    "ExperimentEngine",
    "ExperimentSpec",
    "IQBlock",
    "LabelPolicy",
    "LabeledCapture",
    "OfdmConfig",
    "PositionSample",
    "RingConfig",
    "RingStore",
    "StreamDescriptor",
    "TopologySpec",
    "bench_ingest",
    "bench_layout",
    "bench_pipeline",
    "byte_rate",
    "centralized_mrc",
    "check_capacity",
    "create_app",
    "ebn0_db_to_snr_db",
    "estimate_drift",
    "estimate_offset_delay",
    "export",
    "import_dataset",
    "link_loads",
    "list_datasets",
    "open_source",
    "plan_capacity",
    "run_chain",
    "run_split8",
    "run_sync_session",
    "two_way_exchange",
    "verify",
    "__version__",
]
