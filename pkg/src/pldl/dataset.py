"""Bit-exact dataset export, import and verification.

A dataset is a directory triple:
  <id>.iq            raw cf32 payload, block after block, channel-major
  <id>.labels.jsonl  label records, one per line (labeling wire format)
  <id>.manifest.json descriptor, global time range, per-block index,
                     SHA-256 digests and provenance

The manifest's block index records each block's boundaries, timestamps,
drop flag and per-source label line numbers, so import reconstructs the
original LabeledCapture exactly and any payload byte flip is caught by
the digests.
"""

from __future__ import annotations

import hashlib
import json
import os
import uuid
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .ingest import BYTES_PER_SAMPLE, IQBlock, StreamDescriptor
from .labeling import (
    LabeledCapture,
    LabelPolicy,
    format_label_line,
    parse_label_line,
)
from .timebase import ClockEstimate, to_global_ns

FORMAT_VERSION = 1


class HashMismatch(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


class VersionUnsupported(ValueError):
    pass


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _paths(directory: str, dataset_id: str) -> dict:
    base = os.path.join(directory, dataset_id)
    return {
        "iq": base + ".iq",
        "labels": base + ".labels.jsonl",
        "manifest": base + ".manifest.json",
    }


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    descriptor: dict
    time_range_global_ns: tuple
    sample_count: int
    label_sources: tuple
    provenance: dict
    data_sha256: str
    labels_sha256: str
    format_version: int
    blocks: tuple  # per-block index entries

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def export(
    capture: LabeledCapture,
    directory: str,
    dataset_id: Optional[str] = None,
) -> DatasetManifest:
    """Write one labeled capture as a dataset directory entry."""
    dataset_id = dataset_id or uuid.uuid4().hex[:12]
    os.makedirs(directory, exist_ok=True)
    paths = _paths(directory, dataset_id)

    label_lines: list[str] = []
    block_entries = []
    sample_count = 0
    with open(paths["iq"], "wb") as fh:
        for blk, per_block in zip(capture.blocks, capture.labels):
            fh.write(blk.samples.tobytes())
            sample_count += blk.samples.size
            entry_labels = {}
            for src in sorted(per_block):
                lab = per_block[src]
                if lab is None:
                    entry_labels[src] = None
                else:
                    entry_labels[src] = len(label_lines)
                    label_lines.append(format_label_line(lab))
            block_entries.append(
                {
                    "seq": blk.seq,
                    "start_sample_index": blk.start_sample_index,
                    "start_time_local_ns": blk.start_time_local_ns,
                    "n_samples": blk.n_samples,
                    "channel_count": blk.channel_count,
                    "drop_flag": blk.drop_flag,
                    "labels": entry_labels,
                }
            )

    with open(paths["labels"], "w", encoding="utf-8") as fh:
        for line in label_lines:
            fh.write(line + "\n")

    est = capture.stream_clock_est
    if capture.blocks:
        first, last = capture.blocks[0], capture.blocks[-1]
        fs = capture.descriptor.sample_rate_sps
        span_ns = round(last.n_samples / fs * 1e9)
        t0 = to_global_ns(est, first.start_time_local_ns)
        t1 = to_global_ns(est, last.start_time_local_ns + span_ns)
    else:
        t0 = t1 = 0

    sources = sorted({src for pb in capture.labels for src in pb})
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        descriptor=asdict(capture.descriptor),
        time_range_global_ns=(t0, t1),
        sample_count=sample_count,
        label_sources=tuple(sources),
        provenance={
            "description": capture.provenance,
            "label_policy": asdict(capture.policy),
            "stream_clock_est": asdict(capture.stream_clock_est),
        },
        data_sha256=_sha256_file(paths["iq"]),
        labels_sha256=_sha256_file(paths["labels"]),
        format_version=FORMAT_VERSION,
        blocks=tuple(block_entries),
    )
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest


def read_manifest(directory: str, dataset_id: str) -> DatasetManifest:
    paths = _paths(directory, dataset_id)
    if not os.path.exists(paths["manifest"]):
        raise MissingFile(paths["manifest"])
    with open(paths["manifest"], "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != FORMAT_VERSION:
        raise VersionUnsupported(
            f"format_version {obj.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    obj["time_range_global_ns"] = tuple(obj["time_range_global_ns"])
    obj["label_sources"] = tuple(obj["label_sources"])
    obj["blocks"] = tuple(obj["blocks"])
    return DatasetManifest(**obj)


def import_dataset(directory: str, dataset_id: str) -> LabeledCapture:
    """Reconstruct the exported capture, verifying digests first."""
    manifest = read_manifest(directory, dataset_id)
    paths = _paths(directory, dataset_id)
    for key in ("iq", "labels"):
        if not os.path.exists(paths[key]):
            raise MissingFile(paths[key])
    for key, expect in (("iq", manifest.data_sha256), ("labels", manifest.labels_sha256)):
        got = _sha256_file(paths[key])
        if got != expect:
            raise HashMismatch(f"{paths[key]}: sha256 {got} != manifest {expect}")

    with open(paths["labels"], "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    labels_flat = [parse_label_line(ln) for ln in lines]

    desc = StreamDescriptor(**manifest.descriptor)
    raw = np.fromfile(paths["iq"], dtype=np.complex64)
    blocks = []
    labels = []
    cursor = 0
    for e in manifest.blocks:
        n, c = e["n_samples"], e["channel_count"]
        payload = raw[cursor : cursor + n * c].reshape(c, n)
        cursor += n * c
        blocks.append(
            IQBlock(
                stream_id=desc.stream_id,
                seq=e["seq"],
                start_sample_index=e["start_sample_index"],
                start_time_local_ns=e["start_time_local_ns"],
                samples=payload,
                drop_flag=e["drop_flag"],
            )
        )
        labels.append(
            {
                src: (None if idx is None else labels_flat[idx])
                for src, idx in e["labels"].items()
            }
        )

    prov = manifest.provenance
    return LabeledCapture(
        blocks=tuple(blocks),
        labels=tuple(labels),
        descriptor=desc,
        policy=LabelPolicy(**prov["label_policy"]),
        provenance=prov.get("description", ""),
        stream_clock_est=ClockEstimate(**prov["stream_clock_est"]),
    )


@dataclass(frozen=True)
class VerifyReport:
    dataset_id: str
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def verify(directory: str, dataset_id: str) -> VerifyReport:
    """Non-mutating integrity check; violations are data, not exceptions."""
    v: list[str] = []
    paths = _paths(directory, dataset_id)
    try:
        manifest = read_manifest(directory, dataset_id)
    except MissingFile:
        return VerifyReport(dataset_id, (f"missing manifest {paths['manifest']}",))
    except VersionUnsupported as exc:
        return VerifyReport(dataset_id, (f"unsupported version: {exc}",))
    except (ValueError, TypeError, KeyError) as exc:
        return VerifyReport(dataset_id, (f"manifest schema: {exc!r}",))

    for digest, name in (
        (manifest.data_sha256, "data_sha256"),
        (manifest.labels_sha256, "labels_sha256"),
    ):
        if not (isinstance(digest, str) and len(digest) == 64
                and all(ch in "0123456789abcdef" for ch in digest)):
            v.append(f"manifest schema: {name} is not 64 hex chars")

    if not os.path.exists(paths["iq"]):
        v.append(f"missing data file {paths['iq']}")
    else:
        size = os.path.getsize(paths["iq"])
        expect = manifest.sample_count * BYTES_PER_SAMPLE
        if size != expect:
            v.append(f"data length {size} != sample_count*8 = {expect}")
        if _sha256_file(paths["iq"]) != manifest.data_sha256:
            v.append("data sha256 mismatch")

    if not os.path.exists(paths["labels"]):
        v.append(f"missing labels file {paths['labels']}")
    else:
        if _sha256_file(paths["labels"]) != manifest.labels_sha256:
            v.append("labels sha256 mismatch")
        with open(paths["labels"], "r", encoding="utf-8") as fh:
            n_lines = sum(1 for ln in fh if ln.strip())
        max_idx = -1
        for e in manifest.blocks:
            for idx in e["labels"].values():
                if idx is not None:
                    max_idx = max(max_idx, idx)
        if max_idx >= n_lines:
            v.append(f"label index {max_idx} beyond {n_lines} stored lines")

    total = sum(e["n_samples"] * e["channel_count"] for e in manifest.blocks)
    if total != manifest.sample_count:
        v.append(f"block index total {total} != sample_count {manifest.sample_count}")

    return VerifyReport(dataset_id, tuple(v))


def list_datasets(directory: str) -> list:
    """Dataset ids that have a manifest in the directory."""
    if not os.path.isdir(directory):
        return []
    out = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".manifest.json"):
            out.append(name[: -len(".manifest.json")])
    return out
