"""Trip sequences to fixed-length token windows.

Each token has seven channels: pick-up id, drop-off id, battery bucket of
the level after the trip, and sin/cos of time-of-day and day-of-week of the
trip start. Windows are left-padded; padding uses community id 0 and battery
bucket ``battery_buckets`` (one past the top bucket), with zero time
features.
"""
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, EmptyHistoryError
from ..mobility import DAY_S

N_CHANNELS = 7
PICKUP, DROPOFF, BATTERY = 0, 1, 2
TIME = slice(3, 7)
PAD_COMMUNITY = 0


@dataclass(frozen=True)
class TokenizerConfig:
    window_len: int = 32
    community_count: int = 77
    battery_buckets: int = 10

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError("window_len must be >= 1")
        if self.community_count < 2:
            raise ConfigError("community_count must be >= 2")
        if self.battery_buckets < 1:
            raise ConfigError("battery_buckets must be >= 1")

    @property
    def pad_battery(self):
        return self.battery_buckets

    @property
    def vocab_sizes(self):
        return {"pickup": self.community_count + 1,
                "dropoff": self.community_count + 1,
                "battery": self.battery_buckets + 1}


def battery_bucket(level, buckets):
    """floor(level * buckets), with a full battery mapped to the top bucket."""
    level = np.asarray(level, dtype=float)
    return np.clip(np.floor(level * buckets), 0, buckets - 1).astype(int)


def time_features(epoch_seconds):
    t = np.asarray(epoch_seconds, dtype=np.int64)
    tod = (t % DAY_S) / DAY_S
    # 1970-01-01 was a Thursday; Monday = 0
    dow = ((t // DAY_S) + 3) % 7
    return np.stack([np.sin(2 * np.pi * tod), np.cos(2 * np.pi * tod),
                     np.sin(2 * np.pi * dow / 7), np.cos(2 * np.pi * dow / 7)], axis=-1)


def pad_token(cfg):
    tok = np.zeros(N_CHANNELS)
    tok[BATTERY] = cfg.pad_battery
    return tok


def trip_tokens(trips, cfg):
    """(n_trips, 7) token matrix for an already time-ordered trip list."""
    if not trips:
        return np.zeros((0, N_CHANNELS))
    tok = np.empty((len(trips), N_CHANNELS))
    tok[:, PICKUP] = [t.pickup for t in trips]
    tok[:, DROPOFF] = [t.dropoff for t in trips]
    tok[:, BATTERY] = battery_bucket([t.battery_after for t in trips], cfg.battery_buckets)
    tok[:, TIME] = time_features([t.start_time for t in trips])
    return tok


def windows(tokens, ends, cfg):
    """Left-padded windows of length L ending at (inclusive) row indices ``ends``."""
    L = cfg.window_len
    ends = np.asarray(ends, dtype=int)
    idx = ends[:, None] - (L - 1) + np.arange(L)[None, :]
    valid = idx >= 0
    out = np.where(valid[..., None], tokens[np.clip(idx, 0, None)], pad_token(cfg))
    return out


def encode_sequence(trips, upto, cfg):
    """Window of the most recent trips that ended at or before ``upto``."""
    ordered = sorted((t for t in trips if t.end_time <= upto), key=lambda t: t.start_time)
    if not ordered:
        raise EmptyHistoryError(f"no trips end at or before t={upto}")
    tokens = trip_tokens(ordered, cfg)
    return windows(tokens, [len(ordered) - 1], cfg)[0]


@dataclass
class Samples:
    """Supervised samples: one per trip that has a later charge event.

    ``times`` is the prediction time (end of the trip), ``label_times`` the
    time of the charge event that supplies the label, and ``battery`` the
    level at prediction time.
    """

    X: np.ndarray
    y: np.ndarray
    ev_ids: np.ndarray
    times: np.ndarray
    label_times: np.ndarray
    battery: np.ndarray
    is_test: np.ndarray

    def __len__(self):
        return int(self.y.size)

    def subset(self, mask):
        return Samples(self.X[mask], self.y[mask], self.ev_ids[mask], self.times[mask],
                       self.label_times[mask], self.battery[mask], self.is_test[mask])

    @property
    def train(self):
        return self.subset(~self.is_test)

    @property
    def test(self):
        return self.subset(self.is_test)

    def for_ev(self, ev_id):
        return self.subset(self.ev_ids == ev_id)


DEFAULT_LEVELS = (0.2, 0.4, 0.6, 0.8, 1.0)


def level_points(battery_after, cycle_ids, levels):
    """Indices of the first trip of each charge cycle that leaves the battery
    at or below each level. A trip crossing several levels is kept once."""
    keep = []
    start = 0
    n = len(cycle_ids)
    while start < n:
        end = start
        while end < n and cycle_ids[end] == cycle_ids[start]:
            end += 1
        chosen = set()
        for level in levels:
            for k in range(start, end):
                if battery_after[k] <= level + 1e-12:
                    chosen.add(k)
                    break
        keep.extend(sorted(chosen))
        start = end
    return np.array(keep, dtype=np.int64)


def build_samples(trips, charges, cfg, test_fraction=0.2, levels=DEFAULT_LEVELS):
    """Supervised samples labelled with the community of the next charge event.

    The event that a trip itself triggers counts as "next" (its time equals
    the trip end); trips with no later charge are dropped. With ``levels``
    (the default), each charge cycle contributes one prediction point per
    battery level: the first trip that leaves the battery at or below it.
    ``levels=None`` makes every labelled trip a prediction point. Per EV,
    the chronologically last ``floor(test_fraction * n)`` samples form the
    test split.
    """
    by_ev = {}
    for t in trips:
        by_ev.setdefault(t.ev_id, []).append(t)
    ch_by_ev = {}
    for c in charges:
        ch_by_ev.setdefault(c.ev_id, []).append(c)

    parts = []
    for ev_id in sorted(by_ev):
        evtrips = sorted(by_ev[ev_id], key=lambda t: t.start_time)
        evch = sorted(ch_by_ev.get(ev_id, []), key=lambda c: c.time)
        if not evch:
            continue
        ch_t = np.array([c.time for c in evch], dtype=np.int64)
        ends = np.array([t.end_time for t in evtrips], dtype=np.int64)
        nxt = np.searchsorted(ch_t, ends, side="left")
        keep = np.flatnonzero(nxt < len(evch))
        if levels is not None and keep.size:
            after = np.array([evtrips[k].battery_after for k in keep])
            keep = keep[level_points(after, nxt[keep], sorted(levels))]
        if keep.size == 0:
            continue
        tokens = trip_tokens(evtrips, cfg)
        X = windows(tokens, keep, cfg)
        y = np.array([evch[j].community for j in nxt[keep]], dtype=np.int64)
        n = keep.size
        n_test = int(math.floor(test_fraction * n))
        is_test = np.zeros(n, dtype=bool)
        if n_test:
            is_test[-n_test:] = True
        parts.append((X, y, np.full(n, ev_id, dtype=object), ends[keep], ch_t[nxt[keep]],
                      np.array([evtrips[k].battery_after for k in keep]), is_test))

    if not parts:
        L = cfg.window_len
        return Samples(np.zeros((0, L, N_CHANNELS)), np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=object), np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=bool))
    cols = list(zip(*parts))
    return Samples(*(np.concatenate(c) for c in cols))
