"""Privacy metrics: binned weight entropy per layer, FLTN-vs-plain-FL entropy
deltas, and DERMS dwell/turnover statistics."""
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ComparisonError, ConfigError, StatsError
from .seqmodel.bundle import WeightBundle

DEFAULT_BINS = 64


@dataclass
class EntropyReport:
    per_layer: List[Tuple[str, float, int]]
    total: float
    mode: str = "fltn"

    def as_dict(self):
        return {name: h for name, h, _ in self.per_layer}


@dataclass(frozen=True)
class EntropyDelta:
    round: int
    layer: str
    absolute: float
    relative: Optional[float]


@dataclass
class EntropyComparison:
    deltas: List[EntropyDelta]
    bins: int
    per_round: Dict[int, float] = field(default_factory=dict)

    @property
    def mean_absolute(self):
        return float(np.mean([d.absolute for d in self.deltas])) if self.deltas else 0.0

    @property
    def mean_relative(self):
        rel = [d.relative for d in self.deltas if d.relative is not None]
        return float(np.mean(rel)) if rel else None

    def summary(self):
        return {"bins": self.bins, "mean_absolute": self.mean_absolute,
                "mean_relative": self.mean_relative, "n_deltas": len(self.deltas),
                "per_round": {str(k): v for k, v in sorted(self.per_round.items())}}


def histogram_entropy(values, bins=DEFAULT_BINS):
    """Shannon entropy (nats) of ``bins`` equal-width cells over [min, max]."""
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("cannot take the entropy of an empty layer")
    lo, hi = v.min(), v.max()
    if lo == hi:
        return 0.0
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    p = np.bincount(idx, minlength=bins) / v.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def layer_entropy(bundle, bins=DEFAULT_BINS, mode="fltn"):
    """Per-layer binned entropy plus the parameter-count-weighted mean."""
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    per, sizes = [], []
    for name, _, values in bundle.layers():
        per.append((name, histogram_entropy(values, bins), bins))
        sizes.append(values.size)
    total = float(np.average([h for _, h, _ in per], weights=sizes)) if per else 0.0
    return EntropyReport(per, total, mode)


def mean_layer_entropy(bundles, bins=DEFAULT_BINS):
    """Layer -> entropy averaged over several bundles (e.g. one round's
    submissions)."""
    reports = [b if isinstance(b, EntropyReport) else layer_entropy(b, bins) for b in bundles]
    if not reports:
        return {}
    names = [n for n, _, _ in reports[0].per_layer]
    out = {}
    for i, name in enumerate(names):
        out[name] = float(np.mean([r.per_layer[i][1] for r in reports]))
    return out


def _round_entropies(rounds, bins):
    out = []
    for item in rounds:
        if isinstance(item, dict):
            out.append(dict(item))
        elif isinstance(item, (WeightBundle, EntropyReport)):
            out.append(mean_layer_entropy([item], bins))
        else:
            out.append(mean_layer_entropy(list(item), bins))
    return out


def _first_fingerprint(item):
    if isinstance(item, WeightBundle):
        return item.fingerprint
    if isinstance(item, (list, tuple)) and item and isinstance(item[0], WeightBundle):
        return item[0].fingerprint
    return None


def entropy_comparison(fltn_checkpoints, plain_checkpoints, bins=DEFAULT_BINS):
    """Per-round, per-layer entropy deltas (fltn - plain).

    Each side is a sequence over rounds; a round is a bundle, a list of
    bundles (averaged), an :class:`EntropyReport`, or a ready layer->entropy
    dict. Relative deltas are omitted where the plain entropy is 0.
    """
    if len(fltn_checkpoints) != len(plain_checkpoints):
        raise ComparisonError(f"unpaired runs: {len(fltn_checkpoints)} vs "
                              f"{len(plain_checkpoints)} rounds")
    prints = {_first_fingerprint(x) for x in (*fltn_checkpoints, *plain_checkpoints)} - {None}
    if len(prints) > 1:
        raise ComparisonError("checkpoints have different weight layouts")
    fl = _round_entropies(fltn_checkpoints, bins)
    pl = _round_entropies(plain_checkpoints, bins)
    deltas, per_round = [], {}
    for r, (a, b) in enumerate(zip(fl, pl), start=1):
        if not a and not b:
            continue
        if list(a) != list(b):
            raise ComparisonError(f"round {r}: layer sets differ")
        rd = []
        for layer in a:
            diff = a[layer] - b[layer]
            rel = diff / b[layer] if b[layer] > 0 else None
            deltas.append(EntropyDelta(r, layer, diff, rel))
            rd.append(diff)
        per_round[r] = float(np.mean(rd))
    return EntropyComparison(deltas, bins, per_round)


@dataclass
class TurnoverStats:
    counts: Dict[int, int]
    median: float
    p90: float
    short_fraction: float
    n_runs: int

    def rows(self):
        return sorted(self.counts.items())


def turnover_stats(dwell, short=2):
    """Histogram and summary of dwell durations ``[(ev_id, epochs), ...]``."""
    durations = np.array([d for _, d in dwell], dtype=float)
    if durations.size == 0:
        raise StatsError("no dwell runs to summarise")
    counts = dict(sorted(Counter(int(d) for d in durations).items()))
    return TurnoverStats(counts, float(np.median(durations)), float(np.percentile(durations, 90)),
                         float(np.mean(durations <= short)), int(durations.size))
