"""Normalization round trips, prefix rules, and lossless serialization."""

import numpy as np
import pytest

from lasslab.dataset import (
    DatasetError,
    InsufficientPrefixError,
    denormalize,
    normalize_record,
    read_dataset,
    split_prefix,
    write_dataset,
)
from lasslab.dynamics import ScenarioSweep, Trajectory, make_scenario_batch


def _traj(values, t_max=2.0, channels=None, meta=None):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    times = np.linspace(0, t_max, values.shape[1])
    channels = channels or [f"c{i}" for i in range(values.shape[0])]
    return Trajectory(channels, times, values, t_max, meta or {"scenario_id": "t0", "split": "pretrain"})


def test_channel_spanning_range_gets_identity_affine():
    x = np.array([-1.0, 1.0, 0.0, 0.5, -0.5, 0.25, -0.25, 0.75, -0.75, 0.1])
    rec = normalize_record(_traj(x), prefix_ratio=0.5)  # prefix spans [-1, 1] exactly
    assert np.allclose(rec.norm.scale, 1.0) and np.allclose(rec.norm.offset, 0.0)
    assert np.allclose(rec.values[0], x)


def test_constant_channel_guard():
    rec = normalize_record(_traj(np.full(10, 0.06)), prefix_ratio=0.5)
    assert rec.norm.scale[0] == 1.0
    assert rec.norm.offset[0] == 0.06
    assert np.all(rec.values[0] == 0.0)


def test_round_trip_to_1e12():
    trajs, _ = make_scenario_batch(
        "swing", ScenarioSweep([0.1], overrides={"t_max": 2.0, "dt": 0.02}), [0]
    )
    rec = normalize_record(trajs[0], prefix_ratio=0.4)
    assert rec.split.t_obs == 0.4
    back = denormalize(rec, rec.values)
    ref = trajs[0].values
    rel = np.abs(back - ref) / np.maximum(1.0, np.abs(ref))
    assert rel.max() < 1e-12


def test_denormalize_constant_channel_from_zeros():
    rec = normalize_record(_traj(np.full(12, 3.5)), prefix_ratio=0.5)
    out = denormalize(rec, np.zeros((1, 5)))
    assert np.all(out == 3.5)


def test_denormalize_channel_mismatch():
    rec = normalize_record(_traj(np.linspace(0, 1, 8)), prefix_ratio=0.5)
    with pytest.raises(DatasetError, match="channels"):
        denormalize(rec, np.zeros((2, 8)))


def test_random_round_trip_property():
    rng = np.random.default_rng(0)
    for _ in range(100):
        vals = rng.standard_normal((3, 20)) * rng.uniform(0.1, 50)
        rec = normalize_record(_traj(vals), prefix_ratio=rng.uniform(0.25, 0.9))
        back = denormalize(rec, rec.values)
        assert np.abs(back - vals).max() / max(1.0, np.abs(vals).max()) < 1e-12


def test_prefix_floor_rule():
    rec = normalize_record(_traj(np.linspace(0, 1, 100)), prefix_ratio=0.2)
    assert rec.split.n_observed == 20
    tiny = normalize_record(_traj(np.linspace(0, 1, 12)), prefix_ratio=0.2)
    assert tiny.split.n_observed == 4  # floor rule bottoms out at 4


def test_prefix_boundary_case():
    rec = normalize_record(_traj(np.linspace(0, 1, 1000)), prefix_ratio=0.999)
    assert rec.split.n_observed == 999


def test_prefix_monotonicity():
    # high-frequency signal: the 20% prefix already spans the full range,
    # so larger splits stay inside the normalized guard band
    rec = normalize_record(_traj(np.sin(10 * np.pi * np.linspace(0, 1, 200))), prefix_ratio=0.2)
    prev = set()
    for ratio in (0.2, 0.4, 0.6, 0.8):
        cur = set(split_prefix(rec, ratio).split.observed_idx().tolist())
        assert prev <= cur
        prev = cur


def test_bad_ratio_rejected():
    rec = normalize_record(_traj(np.linspace(0, 1, 10)), prefix_ratio=0.5)
    for ratio in (0.0, 1.0, -0.3, 2.0):
        with pytest.raises(DatasetError):
            split_prefix(rec, ratio)


def test_too_few_samples_rejected():
    with pytest.raises(InsufficientPrefixError):
        normalize_record(_traj(np.linspace(0, 1, 3)), prefix_ratio=0.5)


def _records(n=3, split="pretrain"):
    rng = np.random.default_rng(42)
    recs = []
    for i in range(n):
        vals = rng.standard_normal((2, 15)) * 3
        t = _traj(vals, meta={"scenario_id": f"r{i}", "split": split, "seed": i})
        recs.append(normalize_record(t, prefix_ratio=0.4))
    return recs


def test_write_read_round_trip(tmp_path):
    recs = _records()
    manifest = write_dataset(recs, tmp_path / "ds")
    assert manifest.record_count == 3
    loaded, m2 = read_dataset(tmp_path / "ds")
    assert m2.record_count == 3 and m2.splits == {"pretrain": ["r0", "r1", "r2"]}
    for a, b in zip(recs, loaded):
        assert a.record_id == b.record_id
        assert a.channels == b.channels
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.norm.scale, b.norm.scale)
        assert np.array_equal(a.norm.offset, b.norm.offset)
        assert a.norm.t_max == b.norm.t_max
        assert a.split == b.split
        assert a.meta == b.meta


def test_empty_dataset_valid(tmp_path):
    manifest = write_dataset([], tmp_path / "ds")
    assert manifest.record_count == 0
    loaded, m2 = read_dataset(tmp_path / "ds")
    assert loaded == [] and m2.record_count == 0


def test_sixteen_record_batch_preserves_tags(tmp_path):
    recs = _records(8, "pretrain") + [
        split_prefix(r, 0.4) for r in _records(8, "test")
    ]
    for i, r in enumerate(recs):
        r.record_id = f"u{i}"
        r.meta = dict(r.meta, scenario_id=f"u{i}")
    manifest = write_dataset(recs, tmp_path / "ds")
    assert manifest.record_count == 16
    _, m2 = read_dataset(tmp_path / "ds")
    assert sorted(len(v) for v in m2.splits.values()) == [8, 8]


def test_version_mismatch_detected(tmp_path):
    write_dataset(_records(1), tmp_path / "ds")
    mpath = tmp_path / "ds" / "manifest.json"
    mpath.write_text(mpath.read_text().replace("lasslab-dataset-v1", "v999"))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(tmp_path / "ds")


def test_checksum_mismatch_detected(tmp_path):
    write_dataset(_records(1), tmp_path / "ds")
    csv = tmp_path / "ds" / "records" / "r0.csv"
    csv.write_text(csv.read_text().replace("0.4", "0.5", 1))
    with pytest.raises(DatasetError, match="checksum"):
        read_dataset(tmp_path / "ds")


def test_malformed_row_reports_line_number(tmp_path):
    import hashlib, json

    write_dataset(_records(1), tmp_path / "ds")
    csv = tmp_path / "ds" / "records" / "r0.csv"
    lines = csv.read_text().strip().split("\n")
    lines[3] = lines[3] + ",zzz"
    text = "\n".join(lines) + "\n"
    csv.write_text(text)
    meta_path = tmp_path / "ds" / "records" / "r0.meta.json"
    meta = json.loads(meta_path.read_text())
    meta["csv_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="line 4"):
        read_dataset(tmp_path / "ds")
