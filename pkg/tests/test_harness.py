import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedmob.config import from_dict
from fedmob.errors import ConfigError
from fedmob.harness import (ExperimentSpec, ResultRow, SweepResults, emit_reports, level_slices,
                            prepare_dataset, read_summary_csv, row_stats, run_mode, run_sweep,
                            sample_community_groups, train_centralized)
from oracles import population_std

TINY = {
    "seed": 5,
    "city": {"communities": 6, "hotspots": 2, "ev_count": 12, "horizon_days": 4},
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 1, "d_ff": 16},
    "data": {"window_len": 8},
    "federation": {"rounds": 2, "local_epochs": 2},
    "experiment": {"ev_counts": [6, 12], "communities_per_group": 2, "rounds": 2,
                   "seeds": [1], "modes": ["fltn", "plain_fl", "centralized"]},
}


@pytest.fixture(scope="module")
def tiny_cfg():
    return from_dict(TINY)


@pytest.fixture(scope="module")
def tiny_sweep(tiny_cfg):
    return run_sweep(tiny_cfg)


def test_result_row_statistics_fixture():
    row = ResultRow.from_accuracies("100", (1, 2, 3), (90.63, 92.93, 91.11))
    assert abs(row.average - 91.5567) < 0.005
    assert abs(row.std_dev - 0.9906) < 0.0005
    assert row.maximum == 92.93 and row.minimum == 90.63


def test_single_community_row_has_zero_spread():
    row = ResultRow.from_accuracies("x", (4,), (0.7,))
    assert row.std_dev == 0.0 and row.average == row.maximum == row.minimum == 0.7


def test_empty_row_is_a_missing_cell():
    row = ResultRow.from_accuracies("x", (), ())
    assert row.empty and row.average is None


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30))
def test_row_stats_match_oracle(values):
    avg, sd, hi, lo = row_stats(values)
    assert avg == pytest.approx(sum(values) / len(values), abs=1e-12)
    assert sd == pytest.approx(population_std(values), abs=1e-9)
    assert lo - 1e-12 <= avg <= hi + 1e-12


def test_thirty_distinct_communities_from_ten_bands():
    rng = np.random.default_rng(0)
    density = {c: int(rng.integers(0, 500)) for c in range(1, 78)}
    groups = sample_community_groups(density, 10, 3, seed=1)
    flat = [c for g in groups for c in g]
    assert len(groups) == 10 and all(len(g) == 3 for g in groups)
    assert len(set(flat)) == 30


def test_single_band_full_draw_is_identity():
    density = {c: c * 3 for c in range(1, 9)}
    assert sample_community_groups(density, 1, 8, seed=2) == [tuple(range(1, 9))]


def test_group_sampling_is_seeded():
    density = {c: (c * 37) % 11 for c in range(1, 31)}
    assert sample_community_groups(density, 5, 2, 9) == sample_community_groups(density, 5, 2, 9)


def test_denser_band_comes_first():
    density = {c: 100 - c for c in range(1, 21)}
    groups = sample_community_groups(density, 4, 2, seed=3)
    assert all(max(a) < min(b) for a, b in zip(groups, groups[1:]))


def test_group_sampling_rejects_impossible_requests():
    density = {c: 1 for c in range(1, 7)}
    with pytest.raises(ConfigError):
        sample_community_groups(density, 7, 1, 0)
    with pytest.raises(ConfigError):
        sample_community_groups(density, 3, 3, 0)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=50))
def test_level_slices_partition_samples(battery):
    levels = (0.2, 0.4, 0.6, 0.8, 1.0)
    idx = level_slices(battery, levels)
    assert idx.shape == (len(battery),)
    assert np.all((idx >= 0) & (idx < len(levels)))
    for b, i in zip(battery, idx):
        assert b <= levels[i] + 1e-9
        if i > 0:
            assert b > levels[i - 1] - 1e-9


def test_level_slices_exact_levels():
    assert level_slices([0.2, 0.4, 1.0, 0.39, 0.21], (0.2, 0.4, 1.0)).tolist() == [0, 1, 2, 1, 1]


def test_experiment_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(modes=("fltn", "fltn"))
    with pytest.raises(ConfigError):
        ExperimentSpec(modes=("gossip",))
    with pytest.raises(ConfigError):
        ExperimentSpec(ev_counts=(20, 10))
    with pytest.raises(ConfigError):
        ExperimentSpec(charge_levels=(0.0, 0.5))


def test_pooled_train_size_is_sum_of_ev_samples(tiny_cfg):
    ds = prepare_dataset(tiny_cfg)
    X, y = ds.pooled_train
    per_ev = sum(len(ds.samples.for_ev(e).train) for e in set(ds.samples.ev_ids.tolist()))
    assert len(X) == len(y) == per_ev


def test_single_class_data_scores_one(tiny_cfg):
    ds = prepare_dataset(tiny_cfg)
    ds.samples.y[:] = 3
    res = train_centralized(tiny_cfg, ds, seed=1, epochs=30)
    assert res.accuracy == 1.0


def test_run_results_are_deterministic(tiny_cfg):
    ds = prepare_dataset(tiny_cfg)
    a = run_mode(tiny_cfg, ds, "fltn", 2)
    b = run_mode(tiny_cfg, ds, "fltn", 2)
    assert all(a.models[k].identical(b.models[k]) for k in a.models)
    assert np.array_equal(a.predictions, b.predictions)
    assert len(a.reports) == tiny_cfg.federation.rounds


def test_slice_accuracy_covers_every_test_sample(tiny_cfg):
    res = run_mode(tiny_cfg, prepare_dataset(tiny_cfg), "plain_fl", 1)
    levels = tiny_cfg.experiment.charge_levels
    idx = level_slices(res.battery, levels)
    per = res.slice_accuracy(levels)
    total = sum(np.sum(idx == i) * per[l] for i, l in enumerate(levels) if per[l] is not None)
    assert total == pytest.approx(res.accuracy * res.targets.size)


def test_sweep_shape(tiny_cfg, tiny_sweep):
    exp = tiny_cfg.experiment
    assert len(tiny_sweep.rows) == len(exp.ev_counts) * len(exp.modes)
    assert len(tiny_sweep.charge_cells) == len(exp.ev_counts) * len(exp.charge_levels)
    assert len(tiny_sweep.groups) == len(exp.ev_counts)
    for _, _, row in tiny_sweep.charge_cells:
        if not row.empty:
            assert row.minimum <= row.average <= row.maximum
    assert set(tiny_sweep.entropy) == {"fltn", "plain_fl"}


def test_emitted_summary_recomputes(tmp_path, tiny_sweep):
    manifest = emit_reports(tiny_sweep, tmp_path)
    for name in manifest["files"]:
        assert (tmp_path / name).exists()
    summary = read_summary_csv(tmp_path / "summary.csv")
    rows = {(m, n): r for m, n, r in tiny_sweep.rows}
    assert len(summary) == len(rows)
    for rec in summary:
        row = rows[(rec["mode"], rec["ev_count"])]
        if row.empty:
            assert rec["avg"] is None
            continue
        avg, sd, hi, lo = row_stats(row.accuracies)
        assert abs(rec["avg"] - avg) < 1e-9 and abs(rec["std"] - sd) < 1e-9
        assert rec["min"] == lo and rec["max"] == hi


def test_emission_is_byte_identical(tmp_path, tiny_sweep):
    emit_reports(tiny_sweep, tmp_path / "a")
    emit_reports(tiny_sweep, tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_empty_results_write_manifest_only(tmp_path):
    manifest = emit_reports(SweepResults({}, (1,)), tmp_path)
    assert os.listdir(tmp_path) == ["manifest.json"]
    assert manifest["files"] == []
    assert json.loads((tmp_path / "manifest.json").read_text())["complete"] is True
