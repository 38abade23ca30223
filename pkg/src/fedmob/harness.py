"""Experiment orchestration: single runs in any mode, the centralized
baseline, EV-count and charge-level sweeps, and report emission.

Functions here take a run configuration object (see :mod:`fedmob.config`)
with ``city``, ``model``, ``data``, ``optimizer``, ``federation``,
``experiment`` and ``seed`` attributes.
"""
import csv
import dataclasses
import json
import logging
import os
import subprocess
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ReportIOError
from .federation import (MODES, community_accuracy, init_state, make_round_plan, run_round)
from .mobility import dwell_durations, generate_fleet, modal_dropoff, trips_by_ev
from .privacy import entropy_comparison, mean_layer_entropy, turnover_stats
from .seeding import derive_seed, make_rng
from .seqmodel.encoding import TokenizerConfig, build_samples
from .seqmodel.network import EncoderNet
from .seqmodel.training import predict, train_local

log = logging.getLogger(__name__)

FL_MODES = ("fltn", "plain_fl")
ACCURACY_COLUMNS = ("mode", "ev_count", "community", "accuracy", "seed")
SUMMARY_COLUMNS = ("mode", "ev_count", "avg", "std", "min", "max")
CHARGE_LEVEL_COLUMNS = ("ev_count", "charge_level", "max", "min", "avg", "sd")
ENTROPY_COLUMNS = ("round", "layer", "bins", "entropy")
ENTROPY_DELTA_COLUMNS = ("round", "layer", "bins", "absolute", "relative")
DWELL_COLUMNS = ("duration", "count")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    modes: Tuple[str, ...] = ("fltn",)
    ev_counts: Tuple[int, ...] = (50, 100, 150, 200, 250, 300, 350, 400, 450, 500)
    communities_per_group: int = 3
    charge_levels: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    rounds: int = 10
    seeds: Tuple[int, ...] = (1, 2, 3)
    # centralized epochs; None means rounds * local_epochs
    central_epochs: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "ev_counts", tuple(int(n) for n in self.ev_counts))
        object.__setattr__(self, "charge_levels", tuple(float(c) for c in self.charge_levels))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ConfigError(f"experiment.modes must be a non-empty subset of {MODES}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("experiment.modes has duplicates")
        if not self.ev_counts:
            raise ConfigError("experiment.ev_counts must not be empty")
        if any(n < 1 for n in self.ev_counts) or list(self.ev_counts) != sorted(set(self.ev_counts)):
            raise ConfigError("experiment.ev_counts must be positive and strictly ascending")
        if not self.charge_levels or any(not 0 < c <= 1 for c in self.charge_levels):
            raise ConfigError("experiment.charge_levels must lie in (0, 1]")
        if list(self.charge_levels) != sorted(set(self.charge_levels)):
            raise ConfigError("experiment.charge_levels must be strictly ascending")
        if self.communities_per_group < 1:
            raise ConfigError("experiment.communities_per_group must be >= 1")
        if self.rounds < 1:
            raise ConfigError("experiment.rounds must be >= 1")
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if self.central_epochs is not None and self.central_epochs < 1:
            raise ConfigError("experiment.central_epochs must be >= 1")


# -- statistics ------------------------------------------------------------------

def row_stats(values):
    """``(average, population std, max, min)`` of a non-empty sequence."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("row statistics need at least one value")
    return float(v.mean()), float(v.std()), float(v.max()), float(v.min())


@dataclass(frozen=True)
class ResultRow:
    """One table row: accuracies of the sampled communities and their
    summary. ``std_dev`` divides by n (population form)."""

    label: str
    communities: Tuple[int, ...]
    accuracies: Tuple[float, ...]
    average: Optional[float]
    std_dev: Optional[float]
    maximum: Optional[float]
    minimum: Optional[float]

    @classmethod
    def from_accuracies(cls, label, communities, accuracies):
        if len(communities) != len(accuracies):
            raise ConfigError("one accuracy per community is required")
        acc = tuple(float(a) for a in accuracies)
        if not acc:
            return cls(str(label), tuple(communities), acc, None, None, None, None)
        avg, sd, hi, lo = row_stats(acc)
        return cls(str(label), tuple(int(c) for c in communities), acc, avg, sd, hi, lo)

    @property
    def empty(self):
        return not self.accuracies


def level_slices(battery, levels):
    """Index of the smallest level >= each battery value (values above the
    top level fall in the top slice). The slices partition the samples."""
    levels = np.asarray(levels, dtype=np.float64)
    idx = np.searchsorted(levels, np.asarray(battery, dtype=np.float64) - 1e-9, side="left")
    return np.minimum(idx, levels.size - 1)


# -- single runs -----------------------------------------------------------------

@dataclass
class Dataset:
    fleet: object
    samples: object
    tokenizer: TokenizerConfig

    @property
    def pooled_train(self):
        s = self.samples.train
        return s.X, s.y

    def trip_density(self):
        """Community -> number of trip endpoints (pick-ups plus drop-offs)."""
        counts = {c.id: 0 for c in self.fleet.city}
        for t in self.fleet.trips:
            counts[t.pickup] += 1
            counts[t.dropoff] += 1
        return counts


def prepare_dataset(cfg, ev_count=None, seed=None):
    city = cfg.city if ev_count is None else dataclasses.replace(cfg.city, ev_count=int(ev_count))
    fleet = generate_fleet(city, cfg.seed if seed is None else seed)
    tok = cfg.tokenizer
    samples = build_samples(fleet.trips, fleet.charges, tok, cfg.data.test_fraction,
                            cfg.data.sample_levels)
    return Dataset(fleet, samples, tok)


@dataclass
class RunResult:
    """Outcome of one run: final models, per-round reports, and the test
    predictions with the battery level and home community of each sample."""

    mode: str
    seed: int
    ev_count: int
    models: Dict[str, object]
    reports: List[object]
    predictions: np.ndarray
    targets: np.ndarray
    battery: np.ndarray
    homes: np.ndarray
    layout_fingerprint: int = 0

    @property
    def accuracy(self):
        return float(np.mean(self.predictions == self.targets)) if self.targets.size else None

    def community_accuracy(self, communities=None):
        """Community -> accuracy over the test samples of EVs homed there.
        Communities without any such sample are left out."""
        wanted = np.unique(self.homes) if communities is None else communities
        out = {}
        for c in wanted:
            m = self.homes == c
            if m.any():
                out[int(c)] = float(np.mean(self.predictions[m] == self.targets[m]))
        return out

    def slice_accuracy(self, levels, communities=None):
        """Level -> accuracy on the charge-level slice, or None when empty.
        With ``communities``, a level -> {community: accuracy} mapping."""
        idx = level_slices(self.battery, levels)
        correct = self.predictions == self.targets
        if communities is None:
            return {float(l): (float(np.mean(correct[idx == i])) if np.any(idx == i) else None)
                    for i, l in enumerate(levels)}
        out = {}
        for i, l in enumerate(levels):
            per = {}
            for c in communities:
                m = (idx == i) & (self.homes == c)
                if m.any():
                    per[int(c)] = float(np.mean(correct[m]))
            out[float(l)] = per
        return out

    def submission_entropy(self):
        """Round -> layer -> mean entropy of the bundles submitted that round."""
        return {r.round: dict(r.submission_entropy) for r in self.reports if r.submission_entropy}


def _home_of(dataset):
    return {ev: modal_dropoff(trips) for ev, trips in trips_by_ev(dataset.fleet.trips).items()}


def _collect_test(dataset, predict_ev):
    preds, ys, bats, homes = [], [], [], []
    home = _home_of(dataset)
    test = dataset.samples.test
    for ev_id in sorted(set(test.ev_ids.tolist())):
        part = test.for_ev(ev_id)
        preds.append(predict_ev(ev_id, home[ev_id], part.X))
        ys.append(part.y)
        bats.append(part.battery)
        homes.append(np.full(len(part), home[ev_id], dtype=np.int64))
    if not preds:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0), z
    return (np.concatenate(preds), np.concatenate(ys), np.concatenate(bats),
            np.concatenate(homes))


def central_epochs(cfg):
    exp = cfg.experiment
    return exp.central_epochs or cfg.federation.rounds * cfg.federation.local_epochs


def train_centralized(cfg, dataset, seed, epochs=None):
    """Pool every EV's training samples and fit one model."""
    net = EncoderNet(cfg.model)
    theta0 = net.init_weights(derive_seed(seed, "init"))
    X, y = dataset.pooled_train
    epochs = central_epochs(cfg) if epochs is None else epochs
    weights, _ = train_local(net, theta0, (X, y), epochs, cfg.optimizer,
                             derive_seed(seed, "central"))
    pred, ys, bat, homes = _collect_test(dataset, lambda ev, h, Xe: predict(net, weights, Xe))
    return RunResult("centralized", seed, cfg_ev_count(dataset), {"central": weights}, [],
                     pred, ys, bat, homes, weights.fingerprint)


def run_centralized_baseline(cfg, dataset, seed):
    """Pooled-data accuracy on the chronological test split."""
    return train_centralized(cfg, dataset, seed).accuracy


def cfg_ev_count(dataset):
    return dataset.fleet.config.ev_count


def run_federated(cfg, dataset, mode, seed, threads=1, on_round=None):
    """Run ``cfg.federation.rounds`` rounds of FLTN or plain FL.

    ``on_round(state, report)`` is called after every round, which is where
    the CLI writes checkpoints.
    """
    if mode not in FL_MODES:
        raise ConfigError(f"run_federated handles {FL_MODES}, not {mode!r}")
    fed = cfg.federation
    net = EncoderNet(cfg.model)
    state = init_state(net, dataset.fleet.trips, dataset.fleet.charges, dataset.samples,
                       cfg.city.communities, seed)
    bins = fed.entropy_bins
    entropy_fn = lambda bundles: mean_layer_entropy(bundles, bins)
    evaluate_fn = community_accuracy if fed.evaluate_each_round else None
    reports = []
    for t in range(1, fed.rounds + 1):
        plan = make_round_plan(state, t, fed)
        state, report = run_round(state, plan, fed, cfg.optimizer, augment=(mode == "fltn"),
                                  threads=threads, evaluate_fn=evaluate_fn,
                                  entropy_fn=entropy_fn)
        report.mode = mode
        reports.append(report)
        log.info("%s round %d: %d participants, accuracy %s", mode, t, report.participants,
                 report.accuracy)
        if on_round is not None:
            on_round(state, report)
    models = state.community_models()
    pred, ys, bat, homes = _collect_test(
        dataset, lambda ev, h, Xe: predict(net, models[h], Xe))
    return RunResult(mode, seed, cfg_ev_count(dataset), {str(c): m for c, m in models.items()},
                     reports, pred, ys, bat, homes, net.fingerprint)


def run_mode(cfg, dataset, mode, seed, threads=1, on_round=None):
    if mode == "centralized":
        return train_centralized(cfg, dataset, seed)
    return run_federated(cfg, dataset, mode, seed, threads, on_round)


# -- sweeps ----------------------------------------------------------------------

def sample_community_groups(density, groups, per_group, seed):
    """Rank communities by trip density, cut the ranking into ``groups``
    bands and draw ``per_group`` communities from each band without
    replacement. Returns one sorted tuple per band, densest band first."""
    ranked = sorted(density, key=lambda c: (-density[c], c))
    if groups < 1 or groups > len(ranked):
        raise ConfigError(f"cannot form {groups} groups from {len(ranked)} communities")
    bands = np.array_split(np.array(ranked), groups)
    smallest = min(len(b) for b in bands)
    if per_group < 1 or per_group > smallest:
        raise ConfigError(f"per_group={per_group} exceeds the smallest band ({smallest})")
    rng = make_rng(seed, "community-groups")
    return [tuple(sorted(int(c) for c in rng.choice(band, per_group, replace=False)))
            for band in bands]


@dataclass
class SweepResults:
    config: dict
    seeds: Tuple[int, ...]
    accuracy_records: List[tuple] = field(default_factory=list)
    rows: List[Tuple[str, int, ResultRow]] = field(default_factory=list)
    charge_cells: List[tuple] = field(default_factory=list)
    entropy: Dict[str, Dict[int, Dict[str, float]]] = field(default_factory=dict)
    entropy_bins: int = 64
    dwell: Optional[Dict[int, int]] = None
    groups: List[Tuple[int, ...]] = field(default_factory=list)

    @property
    def empty(self):
        return not (self.accuracy_records or self.rows or self.charge_cells
                    or self.entropy or self.dwell)


def _sweep_config(cfg):
    exp = cfg.experiment
    fed = dataclasses.replace(cfg.federation, rounds=exp.rounds)
    return dataclasses.replace(cfg, federation=fed)


def _mean_by_key(dicts):
    acc = {}
    for d in dicts:
        for k, v in d.items():
            acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def run_sweep(cfg, threads=1, progress=None):
    """EV-count sweep over every mode and seed, plus the charge-level table.

    Community groups come from the trip density of the largest fleet at the
    first seed. Per-community accuracies are averaged over seeds before the
    row statistics are taken; a community with no homed test EV is left out
    of its row.
    """
    cfg = _sweep_config(cfg)
    exp = cfg.experiment
    ref = prepare_dataset(cfg, exp.ev_counts[-1], exp.seeds[0])
    groups = sample_community_groups(ref.trip_density(), len(exp.ev_counts),
                                     exp.communities_per_group, cfg.seed)
    out = SweepResults(cfg.to_dict(), exp.seeds, entropy_bins=cfg.federation.entropy_bins,
                       groups=groups)
    n_epochs = cfg.city.horizon_days
    out.dwell = turnover_stats(dwell_durations(ref.fleet.trips, n_epochs=n_epochs)).counts \
        if ref.fleet.trips else None
    level_mode = "fltn" if "fltn" in exp.modes else exp.modes[0]
    for i, n in enumerate(exp.ev_counts):
        comms = groups[i]
        per_mode = {m: [] for m in exp.modes}
        slices = []
        for seed in exp.seeds:
            data = ref if (n == exp.ev_counts[-1] and seed == exp.seeds[0]) \
                else prepare_dataset(cfg, n, seed)
            for mode in exp.modes:
                res = run_mode(cfg, data, mode, seed, threads)
                per = res.community_accuracy(comms)
                per_mode[mode].append(per)
                for c, a in sorted(per.items()):
                    out.accuracy_records.append((mode, n, c, a, seed))
                if mode == level_mode:
                    slices.append(res.slice_accuracy(exp.charge_levels, comms))
                if mode in FL_MODES and n == exp.ev_counts[-1] and seed == exp.seeds[0]:
                    out.entropy[mode] = res.submission_entropy()
                if progress:
                    progress(mode, n, seed, res)
        for mode in exp.modes:
            mean_acc = _mean_by_key(per_mode[mode])
            present = [c for c in comms if c in mean_acc]
            out.rows.append((mode, n, ResultRow.from_accuracies(
                str(n), present, [mean_acc[c] for c in present])))
        for level in exp.charge_levels:
            mean_acc = _mean_by_key([s[level] for s in slices])
            present = [c for c in comms if c in mean_acc]
            row = ResultRow.from_accuracies(f"{n}@{level}", present,
                                            [mean_acc[c] for c in present])
            out.charge_cells.append((n, level, row))
    return out


def run_ev_count_sweep(cfg, threads=1):
    """The ResultRows of :func:`run_sweep`."""
    return [row for _, _, row in run_sweep(cfg, threads).rows]


def run_charge_level_sweep(cfg, threads=1):
    """``(ev_count, level, ResultRow)`` cells; empty rows are missing cells."""
    return run_sweep(cfg, threads).charge_cells


# -- reports ---------------------------------------------------------------------

def git_describe(path=None):
    path = path or os.path.dirname(os.path.abspath(__file__))
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=path,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def _num(x):
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_num(x) for x in row])
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc


def entropy_rows(per_round, bins):
    return [(r, layer, bins, h) for r, layers in sorted(per_round.items())
            for layer, h in layers.items()]


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "fedmob"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path):
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    finally:
        import matplotlib.pyplot as plt
        plt.close(fig)


def plot_accuracy(path, rows):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in sorted({m for m, _, _ in rows}):
        pts = [(n, r.average, r.std_dev) for m, n, r in rows if m == mode and not r.empty]
        if pts:
            n, a, s = zip(*pts)
            ax.errorbar(n, a, yerr=s, marker="o", capsize=3, label=mode)
    ax.set_xlabel("EVs")
    ax.set_ylabel("accuracy")
    ax.legend()
    _save_svg(fig, path)


def plot_entropy(path, entropy):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, per_round in sorted(entropy.items()):
        if per_round:
            rounds = sorted(per_round)
            ax.plot(rounds, [np.mean(list(per_round[r].values())) for r in rounds],
                    marker="o", label=mode)
    ax.set_xlabel("round")
    ax.set_ylabel("mean layer entropy (nats)")
    ax.legend()
    _save_svg(fig, path)


def plot_dwell(path, counts):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    d, c = zip(*sorted(counts.items()))
    ax.bar(d, c)
    ax.set_yscale("log")
    ax.set_xlabel("dwell (epochs)")
    ax.set_ylabel("runs")
    _save_svg(fig, path)


def build_manifest(config, seeds, files, complete=True, extra=None):
    manifest = {"tool": "fedmob", "config": config, "seeds": list(seeds),
                "git": git_describe(), "complete": bool(complete), "files": sorted(files)}
    if extra:
        manifest.update(extra)
    return manifest


def emit_reports(results, out_dir, complete=True):
    """Write CSV tables, SVG plots and ``manifest.json`` into ``out_dir``.

    Empty results produce the manifest alone. Returns the manifest dict.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create {out_dir}: {exc}") from exc
    files = []

    def put(name, writer, *args):
        writer(os.path.join(out_dir, name), *args)
        files.append(name)

    if results.accuracy_records:
        put("accuracy.csv", write_csv, ACCURACY_COLUMNS, results.accuracy_records)
    if results.rows:
        put("summary.csv", write_csv, SUMMARY_COLUMNS,
            [(m, n, r.average, r.std_dev, r.minimum, r.maximum) for m, n, r in results.rows])
        if any(not r.empty for _, _, r in results.rows):
            put("accuracy_vs_ev_count.svg", plot_accuracy, results.rows)
    if results.charge_cells:
        put("charge_level.csv", write_csv, CHARGE_LEVEL_COLUMNS,
            [(n, lvl, r.maximum, r.minimum, r.average, r.std_dev)
             for n, lvl, r in results.charge_cells])
    for mode, per_round in sorted(results.entropy.items()):
        put(f"entropy_{mode}.csv", write_csv, ENTROPY_COLUMNS,
            entropy_rows(per_round, results.entropy_bins))
    if results.entropy:
        if all(k in results.entropy for k in FL_MODES):
            fl, pl = results.entropy["fltn"], results.entropy["plain_fl"]
            rounds = sorted(set(fl) | set(pl))
            cmp = entropy_comparison([fl.get(r, {}) for r in rounds],
                                     [pl.get(r, {}) for r in rounds], results.entropy_bins)
            put("entropy_delta.csv", write_csv, ENTROPY_DELTA_COLUMNS,
                [(d.round, d.layer, cmp.bins, d.absolute, d.relative) for d in cmp.deltas])
        put("entropy_comparison.svg", plot_entropy, results.entropy)
    if results.dwell:
        put("dwell.csv", write_csv, DWELL_COLUMNS, sorted(results.dwell.items()))
        put("dwell_histogram.svg", plot_dwell, results.dwell)
    manifest = build_manifest(results.config, results.seeds, files, complete,
                              {"groups": [list(g) for g in results.groups]})
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def read_summary_csv(path):
    """Parse a summary CSV back into dicts with floats (None for blanks)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("avg", "std", "min", "max"):
            r[k] = float(r[k]) if r[k] != "" else None
        r["ev_count"] = int(r["ev_count"])
    return rows
