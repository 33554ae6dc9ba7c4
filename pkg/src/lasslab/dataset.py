"""Normalization, prefix splitting, and on-disk records.

Physical trajectories become model-ready records: per-channel affine
normalization fitted on the observed prefix only (nothing from the future
leaks into inference-time statistics), time rescaled by the horizon, and a
prefix/target partition on the normalized axis. Records serialize to one
CSV plus a JSON sidecar each under a manifest; decimal text carries 17
significant digits so float64 round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics.trajectory import Trajectory

FORMAT_VERSION = "lasslab-dataset-v1"
SPLIT_TAGS = ("pretrain", "finetune", "test", "zero-shot")


class DatasetError(ValueError):
    pass


class InsufficientPrefixError(DatasetError):
    pass


@dataclass
class NormalizationSpec:
    """Per-channel affine x_norm = (x - offset) / scale, plus the time scale."""

    scale: np.ndarray
    offset: np.ndarray
    t_max: float

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise DatasetError("normalization scales must be positive")


@dataclass
class PrefixSplit:
    """Observed-prefix boundary on the normalized time axis."""

    prefix_ratio: float
    t_obs: float
    n_observed: int

    def observed_idx(self) -> np.ndarray:
        return np.arange(self.n_observed)


@dataclass
class Record:
    record_id: str
    channels: list[str]
    times: np.ndarray    # normalized, in [0, 1]
    dts: np.ndarray      # increments; dts[0] = 0 marks the sequence start
    values: np.ndarray   # (n_channels, n_times), normalized
    norm: NormalizationSpec
    split: PrefixSplit
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.dts = np.asarray(self.dts, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.channels), self.times.size):
            raise DatasetError("record value shape mismatch")
        if self.times[0] < 0 or self.times[-1] > 1 + 1e-12:
            raise DatasetError("normalized times must lie in [0, 1]")
        if np.any(self.dts[1:] <= 0):
            raise DatasetError("time increments must be positive")
        prefix = self.values[:, : self.split.n_observed]
        if prefix.size and np.abs(prefix).max() > 1.0 + 0.05:
            raise DatasetError("prefix values outside the normalized guard band")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def split_tag(self) -> str:
        return self.meta.get("split", "pretrain")


@dataclass
class DatasetManifest:
    dataset_id: str
    record_count: int
    channels: list[str]
    splits: dict[str, list[str]]
    format_version: str = FORMAT_VERSION


def _prefix_count(ratio: float, n: int) -> int:
    if not (0.0 < ratio < 1.0):
        raise DatasetError(f"prefix ratio {ratio} outside (0, 1)")
    n_obs = max(4, int(math.floor(ratio * n)))
    if n < 4:
        raise InsufficientPrefixError(f"trajectory has {n} samples, need at least 4")
    if n_obs >= n:
        n_obs = n - 1
        if n_obs < 4:
            raise InsufficientPrefixError("no room for both a 4-sample prefix and a target")
    return n_obs


def normalize_record(traj: Trajectory, prefix_ratio: float) -> Record:
    """Affine-map each channel's prefix min/max to [-1, 1]; time to [0, 1].

    Constant channels (e.g. the clearing-time context channel) keep unit
    scale with the constant as offset, so they normalize to exactly zero.
    """
    n = traj.times.size
    n_obs = _prefix_count(prefix_ratio, n)
    prefix = traj.values[:, :n_obs]
    lo, hi = prefix.min(axis=1), prefix.max(axis=1)
    span = hi - lo
    const = span <= 1e-12 * np.maximum(1.0, np.abs(hi))
    scale = np.where(const, 1.0, span / 2.0)
    offset = np.where(const, hi, (hi + lo) / 2.0)
    values = (traj.values - offset[:, None]) / scale[:, None]
    times = traj.times / traj.t_max
    dts = np.concatenate([[0.0], np.diff(times)])
    return Record(
        record_id=str(traj.meta.get("scenario_id", "record")),
        channels=list(traj.channels),
        times=times,
        dts=dts,
        values=values,
        norm=NormalizationSpec(scale, offset, traj.t_max),
        split=PrefixSplit(prefix_ratio, prefix_ratio, n_obs),
        meta=dict(traj.meta),
    )


def denormalize(rec: Record, predictions: np.ndarray) -> np.ndarray:
    """Exact affine inverse, channel by channel."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape[0] != rec.n_channels:
        raise DatasetError(
            f"prediction has {predictions.shape[0]} channels, record has {rec.n_channels}"
        )
    return predictions * rec.norm.scale[:, None] + rec.norm.offset[:, None]


def split_prefix(rec: Record, ratio: float) -> Record:
    """Re-derive the observed/target partition; values untouched."""
    n_obs = _prefix_count(ratio, rec.times.size)
    return Record(
        record_id=rec.record_id,
        channels=rec.channels,
        times=rec.times,
        dts=rec.dts,
        values=rec.values,
        norm=rec.norm,
        split=PrefixSplit(ratio, ratio, n_obs),
        meta=rec.meta,
    )


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def _record_csv(rec: Record) -> str:
    lines = [",".join(["time"] + rec.channels)]
    for i in range(rec.times.size):
        lines.append(",".join([_g17(rec.times[i])] + [_g17(v) for v in rec.values[:, i]]))
    return "\n".join(lines) + "\n"


def write_dataset(records: list[Record], out_dir) -> DatasetManifest:
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {}
    channels: set[str] = set()
    entries = []
    for rec in records:
        tag = rec.split_tag
        if tag not in SPLIT_TAGS:
            raise DatasetError(f"record {rec.record_id} has unknown split tag {tag!r}")
        splits.setdefault(tag, []).append(rec.record_id)
        channels.update(rec.channels)
        csv_text = _record_csv(rec)
        csv_path = out / "records" / f"{rec.record_id}.csv"
        csv_path.write_text(csv_text, encoding="utf-8", newline="\n")
        meta = {
            "record_id": rec.record_id,
            "channels": rec.channels,
            "normalization": {
                "scale": [float(s) for s in rec.norm.scale],
                "offset": [float(o) for o in rec.norm.offset],
                "t_max": rec.norm.t_max,
            },
            "prefix": {
                "ratio": rec.split.prefix_ratio,
                "t_obs": rec.split.t_obs,
                "n_observed": rec.split.n_observed,
            },
            "meta": rec.meta,
            "csv_sha256": hashlib.sha256(csv_text.encode()).hexdigest(),
        }
        (out / "records" / f"{rec.record_id}.meta.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8", newline="\n"
        )
        entries.append(rec.record_id)
    manifest = DatasetManifest(
        dataset_id=out.name or "dataset",
        record_count=len(records),
        channels=sorted(channels),
        splits={k: sorted(v) for k, v in sorted(splits.items())},
    )
    (out / "manifest.json").write_text(
        json.dumps(
            {
                "format_version": manifest.format_version,
                "dataset_id": manifest.dataset_id,
                "record_count": manifest.record_count,
                "channels": manifest.channels,
                "splits": manifest.splits,
                "records": entries,
            },
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
        newline="\n",
    )
    return manifest


def read_dataset(dir_path) -> tuple[list[Record], DatasetManifest]:
    root = Path(dir_path)
    raw = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if raw.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"format version mismatch: file has {raw.get('format_version')!r}, "
            f"reader expects {FORMAT_VERSION!r}"
        )
    records = []
    seen: set[str] = set()
    for rid in raw["records"]:
        meta_raw = json.loads((root / "records" / f"{rid}.meta.json").read_text(encoding="utf-8"))
        csv_text = (root / "records" / f"{rid}.csv").read_text(encoding="utf-8")
        digest = hashlib.sha256(csv_text.encode()).hexdigest()
        if digest != meta_raw["csv_sha256"]:
            raise DatasetError(f"checksum mismatch for record {rid}")
        lines = csv_text.strip().split("\n")
        channels = lines[0].split(",")[1:]
        times, cols = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != len(channels) + 1:
                raise DatasetError(f"malformed CSV row at {rid}.csv line {lineno}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DatasetError(f"malformed CSV row at {rid}.csv line {lineno}")
            times.append(vals[0])
            cols.append(vals[1:])
        times = np.asarray(times)
        values = np.asarray(cols).T
        norm = NormalizationSpec(
            np.asarray(meta_raw["normalization"]["scale"]),
            np.asarray(meta_raw["normalization"]["offset"]),
            meta_raw["normalization"]["t_max"],
        )
        split = PrefixSplit(
            meta_raw["prefix"]["ratio"], meta_raw["prefix"]["t_obs"], meta_raw["prefix"]["n_observed"]
        )
        rec = Record(
            record_id=rid,
            channels=channels,
            times=times,
            dts=np.concatenate([[0.0], np.diff(times)]),
            values=values,
            norm=norm,
            split=split,
            meta=meta_raw["meta"],
        )
        records.append(rec)
        seen.add(rid)
    tagged = {rid for ids in raw["splits"].values() for rid in ids}
    if tagged != seen:
        raise DatasetError("split tags do not partition the record set")
    manifest = DatasetManifest(
        dataset_id=raw["dataset_id"],
        record_count=raw["record_count"],
        channels=raw["channels"],
        splits=raw["splits"],
    )
    if manifest.record_count != len(records):
        raise DatasetError("manifest record count disagrees with records on disk")
    return records, manifest
