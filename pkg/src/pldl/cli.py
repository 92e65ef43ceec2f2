"""Operator command line: thin verbs over the library modules.

Every flow here is a composition of public module calls; nothing is
computed in the CLI itself, so JSON output matches what a direct caller
gets. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict

from . import bench as bench_mod
from . import control, dataset, fronthaul
from .phy import ChannelSpec, OfdmConfig, ebn0_db_to_snr_db, run_split8
from .timebase import ClockModel, run_sync_session


def _data_dir(args) -> str:
    return args.data_dir or os.environ.get("PLDL_DATA_DIR", ".")


def _emit(args, payload: dict, text_lines):
    if args.format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        for line in text_lines:
            print(line)


def _cmd_simulate(args) -> int:
    cfg = OfdmConfig(modulation=args.modulation)
    snr = (
        math.inf
        if args.ebn0_db is None
        else ebn0_db_to_snr_db(cfg, args.ebn0_db)
    )
    channel = ChannelSpec(taps=(1.0 + 0j,), snr_db=snr, seed=args.seed)
    report = run_split8(
        cfg,
        channel,
        args.frames,
        workers=args.workers,
        method=args.method,
        csi_mode=args.csi,
        seed=args.seed,
    )
    payload = {
        "ber": report.ber,
        "ser": report.ser,
        "per": report.per,
        "evm_rms": report.evm_rms,
        "bits_total": report.bits_total,
        "bit_errors": report.bit_errors,
        "workers": report.workers,
    }
    _emit(args, payload, [
        f"frames {args.frames}  bits {report.bits_total}",
        f"ber {report.ber:.3e}  ser {report.ser:.3e}  per {report.per:.3e}",
        f"evm_rms {report.evm_rms:.4f}  workers {report.workers}",
    ])
    return 0


def _cmd_capture(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    out_dir = raw.get("output_dir") or _data_dir(args)
    spec = control.ExperimentSpec(
        name=raw.get("name", "cli-capture"),
        sources=tuple(
            control.source_config_from_dict(s) for s in raw.get("sources", [])
        ),
        ring_budget_bytes=raw.get("ring_budget_bytes", 64 << 20),
        output_dir=out_dir,
        label_sources=tuple(
            control.MotionSourceConfig(**ls) for ls in raw.get("label_sources", [])
        ),
        trigger_pre_s=raw.get("trigger_pre_s", 0.1),
        trigger_post_s=raw.get("trigger_post_s", 0.1),
    )
    engine = control.ExperimentEngine(data_root=out_dir)
    experiment_id = engine.create_experiment(spec)
    engine.transition(experiment_id, "arm")
    engine.transition(experiment_id, "start")
    time.sleep(args.seconds)
    engine.transition(experiment_id, "stop")
    status = engine.status(experiment_id)
    if status.state != "COMPLETE":
        print(f"capture ended in {status.state}: {status.error}", file=sys.stderr)
        return 1
    payload = {
        "experiment_id": experiment_id,
        "dataset_id": status.dataset_id,
        "output_dir": out_dir,
    }
    _emit(args, payload, [f"dataset {status.dataset_id} written to {out_dir}"])
    return 0


def _cmd_bench(args) -> int:
    payload = {}
    lines = []
    if args.rate is not None:
        rep = bench_mod.bench_ingest(args.rate, args.seconds)
        payload["ingest"] = {
            "achieved_bytes_per_s": rep.achieved_bytes_per_s,
            "drops": rep.drops,
            "elapsed_s": rep.elapsed_s,
            "machine": rep.machine,
        }
        lines.append(
            f"ingest: {rep.achieved_bytes_per_s:.3e} B/s achieved, "
            f"{rep.drops} drops in {rep.elapsed_s:.2f} s"
        )
    if args.workers:
        counts = [int(w) for w in args.workers.split(",")]
        rep = bench_mod.bench_pipeline(
            OfdmConfig(), counts, n_frames=args.frames, seed=args.seed
        )
        payload["pipeline"] = {"scaling": list(rep.scaling)}
        for row in rep.scaling:
            lines.append(
                f"pipeline workers={row['workers']}: "
                f"{row['frames_per_s']:.1f} frames/s identical={row['identical']}"
            )
    if args.layout is not None:
        rep = bench_mod.bench_layout(args.layout)
        payload["layout"] = {"ratio": rep.layout_ratio}
        lines.append(f"layout contiguous/interleaved time ratio {rep.layout_ratio:.3f}")
    if not payload:
        print("bench: nothing to do (pass --rate, --workers or --layout)",
              file=sys.stderr)
        return 2
    drops = payload.get("ingest", {}).get("drops", 0)
    _emit(args, payload, lines)
    return 1 if drops else 0


def _cmd_export(args) -> int:
    capture = dataset.import_dataset(args.in_dir, args.id)
    manifest = dataset.export(capture, args.out_dir, args.id)
    payload = {"dataset_id": manifest.dataset_id, "out_dir": args.out_dir,
               "data_sha256": manifest.data_sha256}
    _emit(args, payload, [f"re-exported {args.id} to {args.out_dir}"])
    return 0


def _cmd_verify(args) -> int:
    if args.dataset:
        directory, _, dataset_id = args.dataset.rpartition("/")
        directory = directory or "."
    else:
        directory, dataset_id = _data_dir(args), args.id
    if not dataset_id:
        print("verify: need --dataset <dir>/<id> or --id", file=sys.stderr)
        return 2
    report = dataset.verify(directory, dataset_id)
    payload = {"dataset_id": dataset_id, "ok": report.ok,
               "violations": list(report.violations)}
    lines = [f"{dataset_id}: {'ok' if report.ok else 'FAILED'}"]
    lines += [f"  - {v}" for v in report.violations]
    _emit(args, payload, lines)
    return 0 if report.ok else 1


def _cmd_serve(args) -> int:
    from .service import main as serve_main

    serve_main(host=args.host, port=args.port, data_root=_data_dir(args))
    return 0


def _cmd_sync_demo(args) -> int:
    initiator = ClockModel(clock_id="a", offset_s=args.offset_s,
                           drift_ppm=args.drift_ppm,
                           jitter_std_s=args.jitter_s, seed=args.seed)
    responder = ClockModel(clock_id="b", offset_s=0.0, drift_ppm=0.0,
                           jitter_std_s=args.jitter_s, seed=args.seed + 1)
    session = run_sync_session(initiator, responder, args.exchanges,
                               delay_fwd_s=args.delay_s)
    est = session.estimate
    payload = {
        "offset_est_s": est.offset_est_s,
        "delay_est_s": est.delay_est_s,
        "drift_est_ppm": est.drift_est_ppm,
        "residual_std_s": est.residual_std_s,
        "n_exchanges": est.n_exchanges,
    }
    _emit(args, payload, [
        f"offset {est.offset_est_s:.3e} s  delay {est.delay_est_s:.3e} s",
        f"drift {est.drift_est_ppm:.4f} ppm over {est.n_exchanges} exchanges",
        f"residual std {est.residual_std_s:.3e} s",
    ])
    return 0


def _cmd_fronthaul(args) -> int:
    topo = fronthaul.TopologySpec(
        kind=args.kind,
        ap_count=args.aps,
        per_ap_rate_bps=args.rate,
        link_capacity_bps=args.capacity,
        combine_mode=args.combine,
        combine_rate_hz=args.combine_rate,
    )
    loads = fronthaul.link_loads(topo)
    violations = fronthaul.check_capacity(loads, topo)
    payload = {
        "loads_bps": loads,
        "violations": [asdict(v) for v in violations],
    }
    lines = [f"{link}: {load} b/s" for link, load in sorted(loads.items())]
    lines += [
        f"OVER CAPACITY {v.link}: {v.load_bps} > {v.capacity_bps}"
        for v in violations
    ]
    _emit(args, payload, lines)
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pldl",
        description="labeled physical-layer data logging toolkit",
    )
    parser.add_argument("--format", choices=("text", "json"), default="text")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--data-dir", default=None,
                        help="dataset root (default $PLDL_DATA_DIR or .)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="run the frame pipeline")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--ebn0-db", type=float, default=None)
    p.add_argument("--modulation", choices=("qpsk", "qam16"), default="qpsk")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--method", choices=("mr", "zf", "mmse"), default="zf")
    p.add_argument("--csi", choices=("estimated", "ideal"), default="estimated")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("capture", help="timed capture from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seconds", type=float, default=1.0)
    p.set_defaults(func=_cmd_capture)

    p = sub.add_parser("bench", help="throughput and layout measurements")
    p.add_argument("--rate", type=float, default=None, help="ingest bytes/s")
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--workers", default="", help="comma list, e.g. 1,2,4")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--layout", type=int, default=None,
                   help="layout bench element count (default off; 1e8 typical)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("export", help="re-export a dataset directory entry")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--id", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("verify", help="check dataset integrity")
    p.add_argument("--dataset", default=None, help="<dir>/<id>")
    p.add_argument("--id", default=None)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("serve", help="start the REST service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("sync-demo", help="two-way time transfer demo")
    p.add_argument("--exchanges", type=int, default=100)
    p.add_argument("--offset-s", type=float, default=1e-4)
    p.add_argument("--drift-ppm", type=float, default=2.0)
    p.add_argument("--jitter-s", type=float, default=0.0)
    p.add_argument("--delay-s", type=float, default=1e-6)
    p.set_defaults(func=_cmd_sync_demo)

    p = sub.add_parser("fronthaul", help="topology load and capacity check")
    p.add_argument("--kind", choices=("star", "daisy", "tree"), default="star")
    p.add_argument("--aps", type=int, default=32)
    p.add_argument("--rate", type=int, default=3_200_000_000 // 32)
    p.add_argument("--capacity", type=int, default=100_000_000_000)
    p.add_argument("--combine", choices=("raw_forward", "fixed_combine"),
                   default="raw_forward")
    p.add_argument("--combine-rate", type=int, default=1000)
    p.set_defaults(func=_cmd_fronthaul)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print(f"pldl {args.verb}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
