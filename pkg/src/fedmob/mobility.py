"""Synthetic EV-taxi mobility: city, fleet, trips, charge events, CSV I/O,
mobility classification and DERMS dwell analysis.

Generator model
---------------
The city is a near-square grid of ``communities`` areas with 4-neighbour
adjacency. ``hotspots`` areas, chosen at random, jointly carry
``hotspot_demand_ratio`` of the total demand mass; the remaining areas share
the rest equally.

Each EV draws an EV model profile uniformly, a home community by demand
weight, and a kind: *local* (works around its home) with probability
``local_fraction``, otherwise *roaming*. Each simulated day an EV works one
shift. Roaming EVs start the shift at an origin drawn by demand weight and
pick each destination from the neighbours of their current area with
probability ``neighbor_bias``, otherwise by demand weight (hotspot-biased).
Local EVs start at home, stay inside it with probability ``local_stay`` and
otherwise visit a neighbour and return. Battery drains by
``distance_km / range_km`` per trip; a trip that leaves the battery at or
below ``charge_threshold`` triggers an instantaneous full recharge at its
drop-off area.
"""
import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, IngestionError
from .seeding import make_rng

TRANSITORY = "transitory"
NON_TRANSITORY = "non_transitory"

DAY_S = 86_400
# 2024-01-01 00:00:00 UTC, a Monday
DEFAULT_START = 1_704_067_200

TRIP_COLUMNS = ("ev_id", "pickup_community", "dropoff_community", "start_time",
                "duration_s", "distance_km", "battery_before", "battery_after")
CHARGE_COLUMNS = ("ev_id", "community", "time", "battery_at_charge")

RANGE_SPAN_KM = (143.0, 416.0)


@dataclass(frozen=True)
class CommunityArea:
    id: int
    demand_weight: float
    neighbors: Tuple[int, ...]
    hotspot: bool = False


@dataclass(frozen=True)
class EvModelProfile:
    name: str
    range_km: float

    @property
    def energy_per_km(self):
        return 1.0 / self.range_km


@dataclass(frozen=True)
class TripRecord:
    ev_id: str
    pickup: int
    dropoff: int
    start_time: int
    duration_s: int
    distance_km: float
    battery_before: float
    battery_after: float

    @property
    def end_time(self):
        return self.start_time + self.duration_s


@dataclass(frozen=True)
class ChargeEvent:
    ev_id: str
    community: int
    time: int
    battery_at_charge: float


@dataclass(frozen=True)
class MobilityClass:
    ev_id: str
    window: Tuple[int, int]
    kind: str
    same_community_fraction: float
    community: Optional[int] = None


@dataclass
class CityConfig:
    communities: int = 77
    hotspots: int = 5
    hotspot_demand_ratio: float = 0.5
    ev_count: int = 100
    ev_models: Optional[List[dict]] = None
    horizon_days: int = 365
    charge_threshold: float = 0.20
    seed: int = 0
    local_fraction: float = 0.4
    local_stay: float = 0.95
    neighbor_bias: float = 0.6
    idle_fraction: float = 0.0
    idle_day_prob: float = 0.1
    shift_hours: float = 10.0
    cell_km: float = 4.0
    speed_kmh: float = 25.0
    mean_gap_min: float = 15.0
    fixed_trip_km: Optional[float] = None
    start_time: int = DEFAULT_START

    def validate(self):
        if self.communities < 2:
            raise ConfigError(f"communities must be >= 2, got {self.communities}")
        if not 0 <= self.hotspots <= self.communities:
            raise ConfigError(f"hotspots must be in [0, {self.communities}], got {self.hotspots}")
        if 0 < self.hotspots < self.communities:
            if not 0.0 < self.hotspot_demand_ratio < 1.0:
                raise ConfigError("hotspot_demand_ratio must lie in (0, 1)")
            if self.hotspot_demand_ratio <= self.hotspots / self.communities:
                raise ConfigError("hotspot_demand_ratio must exceed hotspots/communities "
                                  "so that hotspots carry elevated demand")
        if self.ev_count < 1:
            raise ConfigError("ev_count must be >= 1")
        if self.horizon_days < 1:
            raise ConfigError("horizon_days must be >= 1")
        if not 0.0 < self.charge_threshold < 1.0:
            raise ConfigError("charge_threshold must lie in (0, 1)")
        for name in ("local_fraction", "local_stay", "neighbor_bias",
                     "idle_fraction", "idle_day_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("shift_hours", "cell_km", "speed_kmh", "mean_gap_min"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.fixed_trip_km is not None and self.fixed_trip_km < 0:
            raise ConfigError("fixed_trip_km must be non-negative")
        make_profiles(self.ev_models)
        return self


def default_profiles(count=9, span=RANGE_SPAN_KM):
    """``count`` EV model profiles with ranges evenly spread over ``span``."""
    ranges = np.linspace(span[0], span[1], count)
    return [EvModelProfile(f"model-{i + 1}", float(r)) for i, r in enumerate(ranges)]


def make_profiles(ev_models=None, span=RANGE_SPAN_KM):
    if ev_models is None:
        return default_profiles(span=span)
    if not ev_models:
        raise ConfigError("ev_models must not be empty")
    profiles = []
    for entry in ev_models:
        unknown = set(entry) - {"name", "range_km"}
        if unknown:
            raise ConfigError(f"unknown ev_models keys: {sorted(unknown)}")
        try:
            profile = EvModelProfile(str(entry["name"]), float(entry["range_km"]))
        except KeyError as exc:
            raise ConfigError(f"ev_models entry missing {exc}") from None
        if not span[0] <= profile.range_km <= span[1]:
            raise ConfigError(f"range_km {profile.range_km} of {profile.name} "
                              f"outside [{span[0]}, {span[1]}]")
        profiles.append(profile)
    return profiles


def _grid_shape(c):
    cols = math.ceil(math.sqrt(c))
    return cols


def grid_position(community_id, n_communities):
    cols = _grid_shape(n_communities)
    return divmod(community_id - 1, cols)


def grid_distance(a, b, n_communities):
    ra, ca = grid_position(a, n_communities)
    rb, cb = grid_position(b, n_communities)
    return abs(ra - rb) + abs(ca - cb)


def generate_city(config, seed):
    """Build ``config.communities`` areas on a grid, ``config.hotspots`` of
    them carrying elevated demand.

    Hotspots share ``hotspot_demand_ratio`` of the demand mass equally and
    the other areas share the remainder equally, so the hotspot mass over
    the total mass is exactly that ratio (weights sum to 1). With no hotspots,
    or all areas hotspots, the weights are uniform.
    """
    config.validate()
    c, h = config.communities, config.hotspots
    cols = _grid_shape(c)
    rng = make_rng(seed, "city")
    hot = set((rng.choice(c, size=h, replace=False) + 1).tolist()) if h else set()

    if 0 < h < c:
        hot_w = config.hotspot_demand_ratio / h
        cold_w = (1.0 - config.hotspot_demand_ratio) / (c - h)
    else:
        hot_w = cold_w = 1.0 / c

    areas = []
    for k in range(1, c + 1):
        r, col = divmod(k - 1, cols)
        nbrs = []
        for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            rr, cc = r + dr, col + dc
            if 0 <= cc < cols and rr >= 0:
                j = rr * cols + cc + 1
                if 1 <= j <= c:
                    nbrs.append(j)
        areas.append(CommunityArea(k, hot_w if k in hot else cold_w, tuple(sorted(nbrs)), k in hot))
    return areas


def battery_ledger(distances, energy_per_km, threshold=0.20, start=1.0):
    """Walk a sequence of trip distances through the battery model.

    Returns ``(before, after, charged)`` lists; ``charged[k]`` is True when
    trip ``k`` left the battery at or below ``threshold`` (the EV then
    recharges to 1.0 before its next trip).
    """
    level = start
    before, after, charged = [], [], []
    for d in distances:
        b0 = level
        b1 = max(0.0, b0 - d * energy_per_km)
        before.append(b0)
        after.append(b1)
        hit = b1 <= threshold
        charged.append(hit)
        level = 1.0 if hit else b1
    return before, after, charged


class _FleetSim:
    def __init__(self, city, profiles, config):
        self.city = city
        self.profiles = profiles
        self.cfg = config
        self.n = len(city)
        self.weights = np.array([a.demand_weight for a in city], dtype=float)
        self.weights /= self.weights.sum()
        self.neighbors = {a.id: a.neighbors for a in city}

    def draw_by_demand(self, rng):
        return int(rng.choice(self.n, p=self.weights)) + 1

    def trip_distance(self, rng, a, b):
        if self.cfg.fixed_trip_km is not None:
            return float(self.cfg.fixed_trip_km)
        if a == b:
            return float(rng.uniform(2.0, 6.0))
        return grid_distance(a, b, self.n) * self.cfg.cell_km * float(rng.uniform(0.8, 1.2))

    def next_destination(self, rng, loc, home, local):
        if local:
            if loc != home:
                return home
            if rng.random() < self.cfg.local_stay:
                return home
            return int(rng.choice(self.neighbors[home]))
        if rng.random() < self.cfg.neighbor_bias:
            return int(rng.choice(self.neighbors[loc]))
        return self.draw_by_demand(rng)

    def run_ev(self, ev_id, rng, horizon_days):
        cfg = self.cfg
        profile = self.profiles[int(rng.integers(len(self.profiles)))]
        home = self.draw_by_demand(rng)
        local = rng.random() < cfg.local_fraction
        idle = rng.random() < cfg.idle_fraction
        epk = profile.energy_per_km
        trips, charges = [], []
        battery = 1.0
        loc = home
        for day in range(horizon_days):
            if idle and rng.random() >= cfg.idle_day_prob:
                continue
            day_start = cfg.start_time + day * DAY_S
            t = day_start + int(rng.uniform(6, 9) * 3600)
            shift_end = t + int(cfg.shift_hours * 3600)
            loc = home if local else self.draw_by_demand(rng)
            while True:
                dest = self.next_destination(rng, loc, home, local)
                dist = self.trip_distance(rng, loc, dest)
                duration = max(1, int(round(dist / cfg.speed_kmh * 3600)) + 180)
                if t + duration > shift_end:
                    break
                after = max(0.0, battery - dist * epk)
                trips.append(TripRecord(ev_id, loc, dest, t, duration, dist, battery, after))
                t += duration
                if after <= cfg.charge_threshold:
                    charges.append(ChargeEvent(ev_id, dest, t, after))
                    battery = 1.0
                else:
                    battery = after
                loc = dest
                t += 60 + int(rng.exponential(cfg.mean_gap_min * 60))
        return trips, charges


def generate_trips(city, profiles, n_evs, horizon_days, seed, config=None):
    """Simulate ``n_evs`` EVs over ``horizon_days`` days.

    Returns ``(trips, charges)``, grouped by EV (``ev0000``, ``ev0001``, ...)
    and time-ordered within each EV. Each EV draws from its own seeded
    stream, so a fleet of ``n`` EVs is a prefix of a fleet of ``n + 1``.
    """
    if n_evs < 1:
        raise ConfigError("n_evs must be >= 1")
    if horizon_days < 1:
        raise ConfigError("horizon_days must be >= 1")
    if not profiles:
        raise ConfigError("at least one EV model profile is required")
    if config is None:
        config = CityConfig(communities=len(city), hotspots=0)
    sim = _FleetSim(city, profiles, config)
    trips, charges = [], []
    for i in range(n_evs):
        t, c = sim.run_ev(f"ev{i:04d}", make_rng(seed, "trips", i), horizon_days)
        trips.extend(t)
        charges.extend(c)
    return trips, charges


@dataclass
class FleetData:
    city: List[CommunityArea]
    profiles: List[EvModelProfile]
    trips: List[TripRecord]
    charges: List[ChargeEvent]
    config: CityConfig = field(default_factory=CityConfig)

    @property
    def ev_ids(self):
        return sorted({t.ev_id for t in self.trips})


def generate_fleet(config, seed=None):
    """City plus trips for a full :class:`CityConfig`."""
    config.validate()
    seed = config.seed if seed is None else seed
    city = generate_city(config, seed)
    profiles = make_profiles(config.ev_models)
    trips, charges = generate_trips(city, profiles, config.ev_count, config.horizon_days,
                                    seed, config)
    return FleetData(city, profiles, trips, charges, config)


# -- CSV I/O -----------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_trips_csv(trips, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_COLUMNS)
        for t in trips:
            w.writerow([t.ev_id, t.pickup, t.dropoff, t.start_time, t.duration_s,
                        _fmt(t.distance_km), _fmt(t.battery_before), _fmt(t.battery_after)])


def write_charges_csv(charges, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHARGE_COLUMNS)
        for c in charges:
            w.writerow([c.ev_id, c.community, c.time, _fmt(c.battery_at_charge)])


def read_charges_csv(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CHARGE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(ChargeEvent(row["ev_id"], int(row["community"]), int(row["time"]),
                                   float(row["battery_at_charge"])))
    return out


def ingest_trips_csv(path, communities=None):
    """Parse and validate a trip CSV.

    Rows are numbered from 1 (the first data row). Every violation is
    collected before raising so that a single :class:`IngestionError` lists
    all offending rows and EV ids. Valid files come back sorted by
    ``(ev_id, start_time)``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRIP_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise IngestionError(f"{path}: missing columns {missing}")
        records, bad_rows, problems = [], [], []
        for i, row in enumerate(reader, start=1):
            try:
                rec = TripRecord(
                    row["ev_id"], int(row["pickup_community"]), int(row["dropoff_community"]),
                    int(row["start_time"]), int(row["duration_s"]), float(row["distance_km"]),
                    float(row["battery_before"]), float(row["battery_after"]))
            except (TypeError, ValueError) as exc:
                bad_rows.append(i)
                problems.append(f"row {i}: unparseable ({exc})")
                continue
            msg = _trip_violation(rec, communities)
            if msg:
                bad_rows.append(i)
                problems.append(f"row {i}: {msg}")
            records.append((i, rec))

    last = {}
    bad_evs = []
    for i, rec in records:
        prev = last.get(rec.ev_id)
        if prev is not None and rec.start_time <= prev:
            if rec.ev_id not in bad_evs:
                bad_evs.append(rec.ev_id)
                problems.append(f"row {i}: timestamps of ev_id {rec.ev_id} are not increasing")
            bad_rows.append(i)
        last[rec.ev_id] = rec.start_time if prev is None else max(prev, rec.start_time)

    if problems:
        raise IngestionError(f"{path}: {len(problems)} problem(s): " + "; ".join(problems[:20]),
                             rows=sorted(set(bad_rows)), ev_ids=bad_evs)
    return sorted((r for _, r in records), key=lambda r: (r.ev_id, r.start_time))


def _trip_violation(rec, communities):
    for name in ("battery_before", "battery_after"):
        v = getattr(rec, name)
        if not (0.0 <= v <= 1.0):
            return f"{name}={v} outside [0, 1]"
    if rec.battery_after > rec.battery_before:
        return "battery_after exceeds battery_before"
    if rec.duration_s <= 0:
        return "duration_s must be positive"
    if not rec.distance_km >= 0:
        return "distance_km must be non-negative"
    if communities is not None:
        for name in ("pickup", "dropoff"):
            v = getattr(rec, name)
            if not 1 <= v <= communities:
                return f"{name} community {v} outside [1, {communities}]"
    elif rec.pickup < 1 or rec.dropoff < 1:
        return "community ids start at 1"
    return None


# -- classification and dwell -----------------------------------------------

def trips_by_ev(trips):
    out = {}
    for t in trips:
        out.setdefault(t.ev_id, []).append(t)
    return out


def classify_mobility(trips, window, tau=0.8, ev_id=None):
    """Label one EV transitory or non-transitory over ``window`` = (start, end).

    The modal community is the most frequent community among in-community
    trips (pickup == dropoff). The EV is non-transitory when those trips make
    up at least ``tau`` of all its trips in the window and the mode is unique.
    """
    start, end = window
    if end <= start:
        raise ConfigError("window must be non-empty")
    inside = [t for t in trips if start <= t.start_time < end]
    if ev_id is None:
        ev_id = trips[0].ev_id if trips else ""
    if not inside:
        return MobilityClass(ev_id, (start, end), TRANSITORY, 0.0, None)
    counts = Counter(t.pickup for t in inside if t.pickup == t.dropoff)
    if not counts:
        return MobilityClass(ev_id, (start, end), TRANSITORY, 0.0, None)
    ranked = counts.most_common()
    modal, top = ranked[0]
    unique = len(ranked) == 1 or ranked[1][1] < top
    fraction = top / len(inside)
    kind = NON_TRANSITORY if fraction >= tau and unique else TRANSITORY
    return MobilityClass(ev_id, (start, end), kind, fraction, modal if unique else None)


def modal_dropoff(trips):
    """Most frequent drop-off community, ties broken by the smallest id."""
    if not trips:
        return None
    counts = Counter(t.dropoff for t in trips)
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def epoch_areas(trips, derms_assignment=None, epoch_s=DAY_S, start=None, n_epochs=None):
    """Per-EV sequence of the DERMS area occupied at the end of each epoch.

    An EV sits in the DERMS of its latest drop-off; epochs before its first
    trip are omitted. ``derms_assignment`` maps community -> DERMS area
    (identity when omitted).
    """
    if not trips:
        return {}
    start = min(t.start_time for t in trips) if start is None else start
    if n_epochs is None:
        n_epochs = (max(t.end_time for t in trips) - start) // epoch_s + 1
    area_of = (lambda c: c) if derms_assignment is None else derms_assignment.__getitem__
    out = {}
    for ev_id, evtrips in trips_by_ev(trips).items():
        evtrips = sorted(evtrips, key=lambda t: t.start_time)
        epochs = np.array([(t.end_time - start) // epoch_s for t in evtrips])
        seq = []
        cur = None
        k = 0
        for e in range(int(n_epochs)):
            while k < len(evtrips) and epochs[k] <= e:
                cur = area_of(evtrips[k].dropoff)
                k += 1
            if cur is not None:
                seq.append(cur)
        out[ev_id] = seq
    return out


def run_lengths(seq):
    seq = np.asarray(seq)
    if seq.size == 0:
        return []
    change = np.flatnonzero(seq[1:] != seq[:-1]) + 1
    bounds = np.concatenate([[0], change, [seq.size]])
    return np.diff(bounds).astype(int).tolist()


def dwell_durations(trips, derms_assignment=None, epoch_s=DAY_S, n_epochs=None):
    """Maximal runs of consecutive epochs each EV spends in one DERMS area."""
    out = []
    for ev_id, seq in sorted(epoch_areas(trips, derms_assignment, epoch_s,
                                         n_epochs=n_epochs).items()):
        out.extend((ev_id, n) for n in run_lengths(seq))
    return out

