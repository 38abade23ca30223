"""Command-line entry point.

Subcommands: ``generate``, ``simulate``, ``sweep``, ``privacy``, ``report``.
Every command writes into a run directory that holds a ``manifest.json``.

Exit codes: 0 success, 1 other failure, 2 usage error, 3 configuration
error, 4 data error (ingestion, incompatible weights, comparison), 5
numeric failure during training, 6 I/O error, 130 interrupted.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ComparisonError, ConfigError, DataError, FedmobError, ReportIOError
from .federation import MODES
from .harness import (ENTROPY_COLUMNS, ENTROPY_DELTA_COLUMNS, FL_MODES, Dataset, ResultRow,
                      SweepResults, build_manifest, emit_reports, entropy_rows, plot_entropy,
                      prepare_dataset, run_mode, run_sweep, write_csv, write_json)
from .mobility import (CommunityArea, EvModelProfile, FleetData, ingest_trips_csv,
                       read_charges_csv, write_charges_csv, write_trips_csv)
from .privacy import entropy_comparison
from .seqmodel.bundle import save_bundle
from .seqmodel.encoding import build_samples

log = logging.getLogger("fedmob")

EXIT_INTERRUPTED = 130


def setup_logging():
    name = os.environ.get("FEDMOB_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not isinstance(level, int):
        log.warning("unknown FEDMOB_LOG level %r, using WARNING", name)


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "mode", None):
        changes["federation"] = dataclasses.replace(cfg.federation, mode=args.mode)
        changes["experiment"] = dataclasses.replace(cfg.experiment, modes=(args.mode,))
    return cfg.replace(**changes) if changes else cfg


def make_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create {path}: {exc}") from exc
    return path


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ReportIOError(f"{path}: missing") from exc
    except (OSError, ValueError) as exc:
        raise ReportIOError(f"cannot read {path}: {exc}") from exc


# -- generate --------------------------------------------------------------------

def city_json(fleet):
    return {
        "communities": [{"id": c.id, "demand_weight": c.demand_weight,
                         "neighbors": list(c.neighbors), "hotspot": c.hotspot}
                        for c in fleet.city],
        "profiles": [{"name": p.name, "range_km": p.range_km} for p in fleet.profiles],
    }


def cmd_generate(cfg):
    out = make_dir(cfg.out)
    ds = prepare_dataset(cfg)
    try:
        write_trips_csv(ds.fleet.trips, os.path.join(out, "trips.csv"))
        write_charges_csv(ds.fleet.charges, os.path.join(out, "charges.csv"))
    except OSError as exc:
        raise ReportIOError(f"cannot write dataset into {out}: {exc}") from exc
    write_json(os.path.join(out, "city.json"), city_json(ds.fleet))
    files = ["trips.csv", "charges.csv", "city.json"]
    write_json(os.path.join(out, "manifest.json"),
               build_manifest(cfg.to_dict(), [cfg.seed], files,
                              extra={"kind": "generate", "trips": len(ds.fleet.trips),
                                     "charges": len(ds.fleet.charges)}))
    log.info("wrote %d trips and %d charge events to %s", len(ds.fleet.trips),
             len(ds.fleet.charges), out)
    return 0


def load_dataset(data_dir, cfg):
    """Dataset from a ``generate`` output directory."""
    trips = ingest_trips_csv(os.path.join(data_dir, "trips.csv"), cfg.city.communities)
    try:
        charges = read_charges_csv(os.path.join(data_dir, "charges.csv"))
    except OSError as exc:
        raise ReportIOError(f"cannot read charges in {data_dir}: {exc}") from exc
    meta = read_json(os.path.join(data_dir, "city.json"))
    city = [CommunityArea(c["id"], c["demand_weight"], tuple(c["neighbors"]), c["hotspot"])
            for c in meta["communities"]]
    if len(city) != cfg.city.communities:
        raise DataError(f"{data_dir} has {len(city)} communities, the configuration "
                        f"expects {cfg.city.communities}")
    profiles = [EvModelProfile(p["name"], p["range_km"]) for p in meta["profiles"]]
    n_evs = len({t.ev_id for t in trips})
    fleet = FleetData(city, profiles, trips, charges,
                      dataclasses.replace(cfg.city, ev_count=max(n_evs, 1)))
    tok = cfg.tokenizer
    samples = build_samples(trips, charges, tok, cfg.data.test_fraction, cfg.data.sample_levels)
    return Dataset(fleet, samples, tok)


# -- simulate --------------------------------------------------------------------

def _majority(dataset):
    train, test = dataset.samples.train, dataset.samples.test
    if len(train) == 0 or len(test) == 0:
        return None
    top = np.bincount(train.y).argmax()
    return float(np.mean(test.y == top))


def run_summary(res, dataset, cfg):
    return {
        "mode": res.mode, "seed": res.seed, "ev_count": res.ev_count,
        "accuracy": res.accuracy, "majority_baseline": _majority(dataset),
        "n_test": int(res.targets.size),
        "community_accuracy": {str(c): a for c, a in sorted(res.community_accuracy().items())},
        "slice_accuracy": {repr(l): a for l, a in
                           res.slice_accuracy(cfg.experiment.charge_levels).items()},
        "layout_fingerprint": f"{res.layout_fingerprint:016x}",
        "submission_entropy": {str(r): v for r, v in sorted(res.submission_entropy().items())},
        "entropy_bins": cfg.federation.entropy_bins,
    }


class RunWriter:
    """Writes per-round checkpoints and keeps the manifest current, so a run
    that stops early is left marked incomplete."""

    def __init__(self, cfg, mode):
        self.cfg = cfg
        self.mode = mode
        self.out = make_dir(cfg.out)
        self.files = []
        self.rounds_done = 0

    def manifest(self, complete, extra=None):
        info = {"kind": "simulate", "mode": self.mode, "rounds_completed": self.rounds_done,
                "rounds": self.cfg.federation.rounds if self.mode in FL_MODES else 0}
        info.update(extra or {})
        write_json(os.path.join(self.out, "manifest.json"),
                   build_manifest(self.cfg.to_dict(), [self.cfg.seed], self.files, complete, info))

    def _bundle(self, rel, bundle):
        save_bundle(bundle, os.path.join(self.out, rel))
        self.files += [rel, rel + ".json"]

    def on_round(self, state, report):
        rdir = f"rounds/round_{report.round:03d}"
        make_dir(os.path.join(self.out, rdir))
        for comm, model in state.community_models().items():
            stem = f"{rdir}/community_{comm:02d}"
            self._bundle(stem + ".fmwb", model)
            write_json(os.path.join(self.out, stem + ".report.json"), {
                "round": report.round, "mode": self.mode, "community": comm,
                "submissions": report.submissions.get(comm, 0),
                "model_version": model.version,
                "fingerprint": f"{model.fingerprint:016x}",
                "accuracy": report.community_accuracy.get(comm),
            })
            self.files.append(stem + ".report.json")
        write_json(os.path.join(self.out, rdir, "report.json"), report.to_dict())
        self.files.append(f"{rdir}/report.json")
        self.rounds_done = report.round
        self.manifest(complete=False)


def cmd_simulate(cfg, threads=1, data_dir=None):
    mode = cfg.federation.mode
    writer = RunWriter(cfg, mode)
    writer.manifest(complete=False)
    dataset = load_dataset(data_dir, cfg) if data_dir else prepare_dataset(cfg)
    res = run_mode(cfg, dataset, mode, cfg.seed, threads, writer.on_round)
    if mode == "centralized":
        writer._bundle("central.fmwb", res.models["central"])
    summary = run_summary(res, dataset, cfg)
    write_json(os.path.join(writer.out, "results.json"), summary)
    writer.files.append("results.json")
    if res.reports:
        write_csv(os.path.join(writer.out, "entropy.csv"), ENTROPY_COLUMNS,
                  entropy_rows(res.submission_entropy(), cfg.federation.entropy_bins))
        writer.files.append("entropy.csv")
    writer.manifest(True, {"accuracy": summary["accuracy"]})
    print(json.dumps({"mode": mode, "accuracy": summary["accuracy"],
                      "majority_baseline": summary["majority_baseline"]}))
    return 0


# -- sweep -----------------------------------------------------------------------

def sweep_to_json(results):
    def row(r):
        return dataclasses.asdict(r)
    return {
        "config": results.config, "seeds": list(results.seeds),
        "accuracy_records": [list(r) for r in results.accuracy_records],
        "rows": [[m, n, row(r)] for m, n, r in results.rows],
        "charge_cells": [[n, lvl, row(r)] for n, lvl, r in results.charge_cells],
        "entropy": {m: {str(k): v for k, v in sorted(per.items())}
                    for m, per in sorted(results.entropy.items())},
        "entropy_bins": results.entropy_bins,
        "dwell": {str(k): v for k, v in sorted((results.dwell or {}).items())},
        "groups": [list(g) for g in results.groups],
    }


def sweep_from_json(d):
    def row(r):
        return ResultRow(r["label"], tuple(r["communities"]), tuple(r["accuracies"]),
                         r["average"], r["std_dev"], r["maximum"], r["minimum"])
    return SweepResults(
        d["config"], tuple(d["seeds"]),
        [tuple(r) for r in d["accuracy_records"]],
        [(m, n, row(r)) for m, n, r in d["rows"]],
        [(n, lvl, row(r)) for n, lvl, r in d["charge_cells"]],
        {m: {int(k): v for k, v in per.items()} for m, per in d["entropy"].items()},
        d["entropy_bins"],
        {int(k): v for k, v in d["dwell"].items()} or None,
        [tuple(g) for g in d["groups"]])


def cmd_sweep(cfg, threads=1):
    out = make_dir(cfg.out)
    write_json(os.path.join(out, "manifest.json"),
               build_manifest(cfg.to_dict(), cfg.experiment.seeds, [], complete=False,
                              extra={"kind": "sweep"}))
    progress = lambda mode, n, seed, res: log.info("%s ev_count=%d seed=%d accuracy=%s",
                                                   mode, n, seed, res.accuracy)
    results = run_sweep(cfg, threads, progress)
    write_json(os.path.join(out, "sweep.json"), sweep_to_json(results))
    manifest = emit_reports(results, out)
    manifest["kind"] = "sweep"
    manifest["files"] = sorted(manifest["files"] + ["sweep.json"])
    write_json(os.path.join(out, "manifest.json"), manifest)
    return 0


# -- privacy ---------------------------------------------------------------------

def _load_run(run_dir):
    manifest = read_json(os.path.join(run_dir, "manifest.json"))
    if manifest.get("kind") != "simulate":
        raise ComparisonError(f"{run_dir} is not a simulate run")
    if not manifest.get("complete"):
        raise ComparisonError(f"{run_dir} is incomplete")
    return manifest, read_json(os.path.join(run_dir, "results.json"))


def cmd_privacy(run_a, run_b, out_dir):
    """Entropy deltas of run A (normally FLTN) minus run B (normally plain FL)."""
    man_a, res_a = _load_run(run_a)
    man_b, res_b = _load_run(run_b)
    if res_a["layout_fingerprint"] != res_b["layout_fingerprint"]:
        raise ComparisonError("runs use different weight layouts")
    if res_a["entropy_bins"] != res_b["entropy_bins"]:
        raise ComparisonError("runs use different entropy bin counts")
    if man_a["seeds"] != man_b["seeds"]:
        raise ComparisonError("runs are not paired: seeds differ")
    ent_a = {int(k): v for k, v in res_a["submission_entropy"].items()}
    ent_b = {int(k): v for k, v in res_b["submission_entropy"].items()}
    rounds = sorted(set(ent_a) | set(ent_b))
    bins = res_a["entropy_bins"]
    cmp = entropy_comparison([ent_a.get(r, {}) for r in rounds],
                             [ent_b.get(r, {}) for r in rounds], bins)
    out = make_dir(out_dir)
    write_csv(os.path.join(out, "entropy_delta.csv"), ENTROPY_DELTA_COLUMNS,
              [(d.round, d.layer, bins, d.absolute, d.relative) for d in cmp.deltas])
    labels = {f"A:{res_a['mode']}": ent_a, f"B:{res_b['mode']}": ent_b}
    plot_entropy(os.path.join(out, "entropy_comparison.svg"), labels)
    summary = cmp.summary()
    write_json(os.path.join(out, "privacy.json"), summary)
    files = ["entropy_delta.csv", "entropy_comparison.svg", "privacy.json"]
    write_json(os.path.join(out, "manifest.json"),
               build_manifest(man_a["config"], man_a["seeds"], files,
                              extra={"kind": "privacy", "run_a": os.path.abspath(run_a),
                                     "run_b": os.path.abspath(run_b)}))
    print(json.dumps({"mean_absolute": summary["mean_absolute"],
                      "mean_relative": summary["mean_relative"]}))
    return 0


# -- report ----------------------------------------------------------------------

def cmd_report(run_dir, out_dir=None):
    """Re-render the tables and plots of a finished run from its saved results."""
    manifest = read_json(os.path.join(run_dir, "manifest.json"))
    kind = manifest.get("kind")
    if kind == "sweep":
        results = sweep_from_json(read_json(os.path.join(run_dir, "sweep.json")))
    elif kind == "simulate":
        res = read_json(os.path.join(run_dir, "results.json"))
        results = SweepResults(manifest["config"], tuple(manifest["seeds"]),
                               entropy_bins=res.get("entropy_bins", 64))
        results.accuracy_records = [(res["mode"], res["ev_count"], int(c), a, res["seed"])
                                    for c, a in res["community_accuracy"].items()]
        if res["submission_entropy"]:
            results.entropy = {res["mode"]: {int(k): v for k, v in
                                             res["submission_entropy"].items()}}
    else:
        raise DataError(f"{run_dir}: cannot report on a run of kind {kind!r}")
    missing = [f for f in manifest.get("files", [])
               if not os.path.exists(os.path.join(run_dir, f))]
    if missing:
        raise ReportIOError(f"{run_dir}: artifacts named in the manifest are missing: "
                            f"{', '.join(missing[:5])}")
    out = out_dir or os.path.join(run_dir, "report")
    emit_reports(results, out, complete=bool(manifest.get("complete")))
    return 0


# -- argument parsing --------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (desk defaults if omitted)")
    common.add_argument("--out", help="output run directory (overrides the config)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for local training (default 1)")
    moded = argparse.ArgumentParser(add_help=False)
    moded.add_argument("--mode", choices=MODES, help="federation mode (overrides the config)")

    p = argparse.ArgumentParser(prog="fedmob", description="Federated EV charge-location "
                                "prediction with peer-augmented community models.")
    p.add_argument("--version", action="version", version=f"fedmob {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic trip dataset")
    sim = sub.add_parser("simulate", parents=[common, moded], help="run federated rounds")
    sim.add_argument("--data", help="dataset directory from `generate` (else generated inline)")
    sub.add_parser("sweep", parents=[common, moded], help="EV-count and charge-level sweeps")
    priv = sub.add_parser("privacy", parents=[common], help="entropy comparison of two runs")
    priv.add_argument("run_a", help="run directory (normally FLTN)")
    priv.add_argument("run_b", help="run directory (normally plain FL)")
    rep = sub.add_parser("report", parents=[common], help="re-render tables and plots of a run")
    rep.add_argument("run_dir")
    return p


def dispatch(args):
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.command == "privacy":
        out = args.out or os.path.join(args.run_a, "privacy")
        return cmd_privacy(args.run_a, args.run_b, out)
    if args.command == "report":
        return cmd_report(args.run_dir, args.out)
    cfg = resolve_config(args)
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "simulate":
        return cmd_simulate(cfg, args.threads, args.data)
    return cmd_sweep(cfg, args.threads)


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return dispatch(args)
    except FedmobError as exc:
        print(f"fedmob: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("fedmob: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
