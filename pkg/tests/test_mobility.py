import csv
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from fedmob.errors import ConfigError, IngestionError
from fedmob.mobility import (NON_TRANSITORY, TRANSITORY, TRIP_COLUMNS, CityConfig, TripRecord,
                             battery_ledger, classify_mobility, default_profiles, dwell_durations,
                             epoch_areas, generate_city, generate_fleet, generate_trips,
                             ingest_trips_csv, make_profiles, modal_dropoff, read_charges_csv,
                             run_lengths, write_charges_csv, write_trips_csv)
from oracles import naive_epoch_log, naive_runs

DAY = 86_400


def trip(pickup, dropoff, start, ev="ev0", dur=600, dist=3.0, b0=1.0, b1=0.99):
    return TripRecord(ev, pickup, dropoff, start, dur, dist, b0, b1)


# -- city -------------------------------------------------------------------------

def test_city_77_with_5_hotspots():
    city = generate_city(CityConfig(communities=77, hotspots=5), seed=7)
    assert len(city) == 77
    assert sum(a.hotspot for a in city) == 5
    assert [a.id for a in city] == list(range(1, 78))


def test_two_area_city_is_uniform():
    city = generate_city(CityConfig(communities=2, hotspots=0), seed=0)
    assert len(city) == 2
    assert city[0].demand_weight == city[1].demand_weight


def test_hotspot_mass_matches_configured_ratio():
    cfg = CityConfig(communities=10, hotspots=3, hotspot_demand_ratio=0.5)
    city = generate_city(cfg, seed=1)
    hot = sum(a.demand_weight for a in city if a.hotspot)
    total = sum(a.demand_weight for a in city)
    assert hot / total == pytest.approx(0.5, abs=1e-12)
    assert min(a.demand_weight for a in city if a.hotspot) > \
        max(a.demand_weight for a in city if not a.hotspot)


@given(c=st.integers(2, 90), seed=st.integers(0, 2 ** 32))
def test_neighbor_relation_is_symmetric(c, seed):
    city = generate_city(CityConfig(communities=c, hotspots=0), seed)
    nbrs = {a.id: set(a.neighbors) for a in city}
    for a, ns in nbrs.items():
        assert a not in ns
        for b in ns:
            assert a in nbrs[b]


@pytest.mark.parametrize("kwargs", [dict(communities=1), dict(communities=5, hotspots=6),
                                    dict(communities=10, hotspots=3, hotspot_demand_ratio=0.2)])
def test_invalid_city_config(kwargs):
    with pytest.raises(ConfigError):
        generate_city(CityConfig(**kwargs), seed=0)


def test_default_profiles_span_range():
    profiles = default_profiles()
    assert len(profiles) == 9
    assert profiles[0].range_km == 143 and profiles[-1].range_km == 416
    with pytest.raises(ConfigError):
        make_profiles([{"name": "tiny", "range_km": 50}])


# -- battery and trips -------------------------------------------------------------

def test_hand_computed_battery_ledger():
    before, after, charged = battery_ledger([30.0] * 5, 1 / 143)
    assert after[:4] == pytest.approx([1 - 30 / 143 * k for k in range(1, 5)], abs=1e-12)
    assert [round(a, 2) for a in after[:4]] == [0.79, 0.58, 0.37, 0.16]
    assert charged == [False, False, False, True, False]
    assert before[4] == 1.0


def test_first_charge_after_four_30km_trips():
    cfg = CityConfig(communities=4, hotspots=0, ev_count=1, horizon_days=1,
                     ev_models=[{"name": "short", "range_km": 143}], fixed_trip_km=30.0)
    fleet = generate_fleet(cfg, seed=3)
    assert len(fleet.trips) >= 4
    first = fleet.charges[0]
    assert first.time == fleet.trips[3].end_time
    assert first.community == fleet.trips[3].dropoff
    assert first.battery_at_charge == pytest.approx(1 - 120 / 143, abs=1e-12)


def test_idle_ev_has_empty_log():
    cfg = CityConfig(communities=4, hotspots=0, ev_count=1, horizon_days=3,
                     idle_fraction=1.0, idle_day_prob=0.0)
    fleet = generate_fleet(cfg, seed=0)
    assert fleet.trips == [] and fleet.charges == []


@pytest.fixture(scope="module")
def fleet():
    return generate_fleet(CityConfig(communities=12, hotspots=3, ev_count=40, horizon_days=20),
                          seed=11)


def test_trip_invariants(fleet):
    profiles = {}
    by_ev = {}
    for t in fleet.trips:
        by_ev.setdefault(t.ev_id, []).append(t)
    charged_at = {(c.ev_id, c.time) for c in fleet.charges}
    for ev, trips in by_ev.items():
        starts = [t.start_time for t in trips]
        assert starts == sorted(starts) and len(set(starts)) == len(starts)
        for prev, cur in zip(trips, trips[1:]):
            assert cur.start_time >= prev.end_time
            expected = 1.0 if (ev, prev.end_time) in charged_at else prev.battery_after
            assert cur.battery_before == expected
        for t in trips:
            assert 0.0 <= t.battery_after <= t.battery_before <= 1.0
            assert t.battery_before > fleet.config.charge_threshold
            # the per-trip drain identifies one energy rate per EV
            if t.distance_km > 0 and t.battery_after > 0:
                rate = (t.battery_before - t.battery_after) / t.distance_km
                profiles.setdefault(ev, rate)
                assert rate == pytest.approx(profiles[ev], rel=1e-9)


def test_every_crossing_emits_one_charge(fleet):
    crossings = [(t.ev_id, t.end_time, t.dropoff) for t in fleet.trips
                 if t.battery_after <= fleet.config.charge_threshold]
    events = [(c.ev_id, c.time, c.community) for c in fleet.charges]
    assert crossings == events
    assert all(c.battery_at_charge <= 0.2 for c in fleet.charges)


def test_generation_is_deterministic():
    cfg = CityConfig(communities=8, hotspots=2, ev_count=5, horizon_days=4)
    a, b = generate_fleet(cfg, seed=9), generate_fleet(cfg, seed=9)
    assert a.trips == b.trips and a.charges == b.charges and a.city == b.city
    c = generate_fleet(cfg, seed=10)
    assert c.trips != a.trips


def test_fleet_prefix_property():
    cfg = CityConfig(communities=8, hotspots=2, horizon_days=3)
    city = generate_city(cfg, 1)
    small, _ = generate_trips(city, default_profiles(), 3, 3, seed=1, config=cfg)
    big, _ = generate_trips(city, default_profiles(), 4, 3, seed=1, config=cfg)
    assert big[:len(small)] == small


# -- CSV ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, fleet):
    path = tmp_path / "trips.csv"
    write_trips_csv(fleet.trips, path)
    back = ingest_trips_csv(path, communities=12)
    assert back == sorted(fleet.trips, key=lambda t: (t.ev_id, t.start_time))
    cpath = tmp_path / "charges.csv"
    write_charges_csv(fleet.charges, cpath)
    assert read_charges_csv(cpath) == fleet.charges


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIP_COLUMNS)
        w.writerows(rows)


def test_ingest_three_rows(tmp_path):
    p = tmp_path / "t.csv"
    _write_rows(p, [["a", 1, 2, 100, 60, 3.0, 1.0, 0.9],
                    ["a", 2, 2, 200, 60, 3.0, 0.9, 0.8],
                    ["b", 1, 1, 150, 60, 3.0, 1.0, 0.95]])
    assert len(ingest_trips_csv(p)) == 3


def test_ingest_rejects_battery_increase_with_row_index(tmp_path):
    p = tmp_path / "t.csv"
    _write_rows(p, [["a", 1, 2, 100, 60, 3.0, 1.0, 0.9],
                    ["a", 2, 2, 200, 60, 3.0, 0.5, 0.8]])
    with pytest.raises(IngestionError) as err:
        ingest_trips_csv(p)
    assert err.value.rows == [2]
    assert "row 2" in str(err.value)


def test_ingest_names_ev_with_shuffled_timestamps(tmp_path):
    p = tmp_path / "t.csv"
    _write_rows(p, [["good", 1, 1, 100, 60, 3.0, 1.0, 0.9],
                    ["bad", 1, 2, 500, 60, 3.0, 1.0, 0.9],
                    ["bad", 2, 3, 300, 60, 3.0, 0.9, 0.8],
                    ["good", 1, 1, 200, 60, 3.0, 0.9, 0.8]])
    with pytest.raises(IngestionError) as err:
        ingest_trips_csv(p)
    assert err.value.ev_ids == ["bad"]
    assert "bad" in str(err.value)


def test_ingest_missing_column(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("ev_id,start_time\na,1\n")
    with pytest.raises(IngestionError, match="missing columns"):
        ingest_trips_csv(p)


@pytest.mark.parametrize("b0,b1", [(1.2, 0.9), (0.5, -0.1)])
def test_ingest_battery_out_of_range(tmp_path, b0, b1):
    p = tmp_path / "t.csv"
    _write_rows(p, [["a", 1, 2, 100, 60, 3.0, b0, b1]])
    with pytest.raises(IngestionError):
        ingest_trips_csv(p)


# -- classification ----------------------------------------------------------------

W = (0, 10 * DAY)


def test_all_trips_inside_one_community():
    cls = classify_mobility([trip(8, 8, i * 100) for i in range(10)], W)
    assert cls.kind == NON_TRANSITORY and cls.same_community_fraction == 1.0
    assert cls.community == 8


def test_ten_distinct_pickups_is_transitory():
    cls = classify_mobility([trip(i + 1, (i + 1) % 10 + 1, i * 100) for i in range(10)], W)
    assert cls.kind == TRANSITORY and cls.same_community_fraction <= 0.1


def test_fraction_exactly_tau_is_non_transitory():
    trips = [trip(3, 3, i * 100) for i in range(8)] + [trip(3, 4, 900), trip(4, 3, 1000)]
    cls = classify_mobility(trips, W, tau=0.8)
    assert cls.same_community_fraction == pytest.approx(0.8)
    assert cls.kind == NON_TRANSITORY


def test_perturbing_one_trip_at_tau_flips_class():
    trips = [trip(3, 3, i * 100) for i in range(8)] + [trip(3, 4, 900), trip(4, 3, 1000)]
    worse = trips[:7] + [trip(3, 5, 700)] + trips[8:]
    better = trips[:8] + [trip(3, 3, 900)] + trips[9:]
    assert classify_mobility(worse, W).kind == TRANSITORY
    assert classify_mobility(better, W).kind == NON_TRANSITORY


def test_tied_mode_is_transitory():
    trips = [trip(1, 1, i * 100) for i in range(5)] + [trip(2, 2, 1000 + i) for i in range(5)]
    cls = classify_mobility(trips, W, tau=0.5)
    assert cls.kind == TRANSITORY


def test_zero_trips_is_transitory():
    cls = classify_mobility([trip(1, 1, 20 * DAY)], W)
    assert cls.kind == TRANSITORY and cls.same_community_fraction == 0.0


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=30),
       st.floats(0, 1))
def test_classification_matches_definition(pairs, tau):
    trips = [trip(p, d, i * 10) for i, (p, d) in enumerate(pairs)]
    cls = classify_mobility(trips, W, tau)
    inside = Counter(p for p, d in pairs if p == d)
    if not inside:
        assert cls.kind == TRANSITORY
        return
    top = max(inside.values())
    unique = list(inside.values()).count(top) == 1
    assert cls.same_community_fraction == pytest.approx(top / len(pairs))
    assert (cls.kind == NON_TRANSITORY) == (top / len(pairs) >= tau and unique)


def test_modal_dropoff_tie_takes_smallest_id():
    assert modal_dropoff([trip(1, 5, 0), trip(1, 2, 10)]) == 2
    assert modal_dropoff([]) is None


# -- dwell -------------------------------------------------------------------------

def test_run_lengths_examples():
    assert run_lengths(["A", "A", "A", "B"]) == [3, 1]
    assert run_lengths([7] * 5) == [5]
    assert run_lengths([]) == []


@given(st.lists(st.integers(0, 3), max_size=60))
def test_run_lengths_match_groupby(seq):
    assert run_lengths(seq) == naive_runs(seq)


def test_dwell_for_stationary_ev():
    trips = [trip(2, 2, d * DAY + 3600) for d in range(5)]
    assert dwell_durations(trips, n_epochs=5) == [("ev0", 5)]


def test_dwell_uses_derms_assignment():
    trips = [trip(1, 1, 3600), trip(1, 2, DAY + 3600), trip(2, 3, 2 * DAY + 3600)]
    assert dwell_durations(trips, n_epochs=3) == [("ev0", 1), ("ev0", 1), ("ev0", 1)]
    merged = {1: "X", 2: "X", 3: "Y"}
    assert dwell_durations(trips, merged, n_epochs=3) == [("ev0", 2), ("ev0", 1)]


def test_dwell_matches_brute_force_scan():
    cfg = CityConfig(communities=12, hotspots=3, ev_count=1000, horizon_days=6)
    fleet = generate_fleet(cfg, seed=4)
    start = min(t.start_time for t in fleet.trips)
    log = naive_epoch_log(fleet.trips, start, 6)
    assert epoch_areas(fleet.trips, n_epochs=6) == log
    expected = Counter(n for seq in log.values() for n in naive_runs(seq))
    got = Counter(n for _, n in dwell_durations(fleet.trips, n_epochs=6))
    assert got == expected
