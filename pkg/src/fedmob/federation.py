"""Federated rounds: local training, peer sharing with augmentation for
non-transitory EVs, per-community DERMS averaging and charge-time
redistribution of the community model.
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import AggregationError, ConfigError, FedmobError, RoundError
from .mobility import (DAY_S, NON_TRANSITORY, ChargeEvent, MobilityClass, classify_mobility,
                       modal_dropoff, trips_by_ev)
from .seeding import derive_seed
from .seqmodel.bundle import WeightBundle, check_same_layout
from .seqmodel.training import OptimizerConfig, predict, train_local

log = logging.getLogger(__name__)

MODES = ("fltn", "plain_fl", "centralized")
WEIGHTINGS = ("uniform", "by_sample_count")
SUBMISSIONS = ("replace", "accompany")


@dataclass(frozen=True)
class AugmentationConfig:
    alpha: float = 1.0
    normalize: bool = True
    noise_sigma: float = 0.0
    min_group_size: int = 2

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.min_group_size < 2:
            raise ConfigError("min_group_size must be >= 2")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    alpha: float = 1.0
    normalize: bool = True
    noise_sigma: float = 0.0
    min_group_size: int = 2
    weighting: str = "uniform"
    mode: str = "fltn"
    local_epochs: int = 2
    tau: float = 0.8
    round_days: float = 1.0
    submission: str = "replace"
    entropy_bins: int = 64
    evaluate_each_round: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("federation.rounds must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"federation.mode must be one of {MODES}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"federation.weighting must be one of {WEIGHTINGS}")
        if self.submission not in SUBMISSIONS:
            raise ConfigError(f"federation.submission must be one of {SUBMISSIONS}")
        if self.local_epochs < 1:
            raise ConfigError("federation.local_epochs must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("federation.tau must lie in [0, 1]")
        if self.round_days <= 0:
            raise ConfigError("federation.round_days must be positive")
        if self.entropy_bins < 2:
            raise ConfigError("federation.entropy_bins must be >= 2")
        self.augmentation  # validates alpha / sigma / group size

    @property
    def augmentation(self):
        return AugmentationConfig(self.alpha, self.normalize, self.noise_sigma,
                                  self.min_group_size)

    @property
    def round_seconds(self):
        return int(round(self.round_days * DAY_S))


@dataclass(frozen=True)
class PeerGroup:
    community: int
    members: Tuple[str, ...]
    round: int = 0


@dataclass
class EvAgent:
    ev_id: str
    weights: WeightBundle
    trips: list
    charges: list
    train: object = None
    test: object = None
    home: Optional[int] = None


@dataclass
class DermsServer:
    """Per-community aggregator. Inbox entries carry an opaque per-round token
    instead of the EV id."""

    community: int
    model: WeightBundle
    round: int = 0
    inbox: List[Tuple[str, WeightBundle, int]] = field(default_factory=list)

    def submit(self, bundle, sample_count, token):
        if self.inbox:
            self.inbox[0][1].check_compatible(bundle)
        self.model.check_compatible(bundle)
        self.inbox.append((token, bundle, int(sample_count)))
        return token

    def aggregate(self, weighting="uniform"):
        """Replace the community model with the FedAvg of the inbox. An empty
        inbox leaves the model untouched."""
        if self.inbox:
            bundles = [b for _, b, _ in self.inbox]
            counts = [n for _, _, n in self.inbox]
            theta = fed_avg(bundles, weighting, counts)
            self.model = theta.with_values(theta.values, version=self.round + 1)
        self.inbox = []
        self.round += 1
        return self.model


@dataclass
class RoundPlan:
    index: int
    window: Tuple[int, int]
    classes: Dict[str, MobilityClass]
    assignments: Dict[str, int]
    groups: List[PeerGroup]
    direct: List[str]
    train_masks: Dict[str, np.ndarray]
    charges: Dict[str, List[ChargeEvent]]

    @property
    def participants(self):
        return sorted(self.assignments)


@dataclass
class RoundReport:
    round: int
    mode: str
    window: Tuple[int, int]
    participants: int
    transitory: int
    non_transitory: int
    peer_groups: int
    group_sizes: List[int]
    direct_fallback: int
    submissions: Dict[int, int]
    distributions: int
    mean_train_loss: Optional[float]
    turnover: Optional[float]
    submission_entropy: Dict[str, float]
    accuracy: Optional[float] = None
    community_accuracy: Dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        d = dict(self.__dict__)
        d["window"] = list(self.window)
        d["submissions"] = {str(k): v for k, v in sorted(self.submissions.items())}
        d["community_accuracy"] = {str(k): v for k, v in sorted(self.community_accuracy.items())}
        return d


# -- weight algebra ----------------------------------------------------------

def _content_key(bundle):
    return hashlib.blake2b(bundle.values.tobytes(), digest_size=16).digest()


def peer_share(own, peers, cfg, seed=0):
    """Augment ``own`` with its peers: ``own + alpha * sum(peers)``.

    With ``cfg.normalize`` the result is divided by ``1 + alpha * len(peers)``;
    with ``cfg.noise_sigma > 0`` seeded zero-mean Gaussian noise is added
    element-wise. Terms are summed in an order fixed by their content, so the
    output does not depend on the order of ``peers`` and, for ``alpha == 1``,
    every member of a fully connected group produces the same bits.
    """
    if not peers:
        raise AggregationError("peer_share needs at least one peer; use direct sharing")
    check_same_layout([own, *peers])
    if cfg.alpha == 0 and cfg.noise_sigma == 0:
        return own.copy()
    terms = [(_content_key(own), own.values)]
    terms += [(_content_key(p), cfg.alpha * p.values) for p in peers]
    terms.sort(key=lambda t: t[0])
    total = terms[0][1].copy()
    for _, v in terms[1:]:
        total += v
    if cfg.normalize:
        total /= 1.0 + cfg.alpha * len(peers)
    if cfg.noise_sigma > 0:
        total += np.random.default_rng(seed).normal(0.0, cfg.noise_sigma, size=total.size)
    return own.with_values(total)


def fed_avg(bundles, weighting="uniform", sample_counts=None):
    """Element-wise (optionally sample-weighted) mean of equal-layout bundles.

    Computed as ``first + mean(b - first)`` so that averaging identical bundles
    returns them bit for bit.
    """
    if not bundles:
        raise AggregationError("fed_avg needs at least one bundle")
    check_same_layout(bundles)
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"unknown weighting {weighting!r}")
    base = bundles[0].values
    if weighting == "uniform":
        w = np.ones(len(bundles))
    else:
        if sample_counts is None or len(sample_counts) != len(bundles):
            raise AggregationError("by_sample_count weighting needs one count per bundle")
        w = np.asarray(sample_counts, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise AggregationError("sample counts must be non-negative with a positive sum")
    acc = np.zeros_like(base)
    for wi, b in zip(w, bundles):
        acc += wi * (b.values - base)
    return bundles[0].with_values(base + acc / w.sum())


def distribute(theta, ev, at):
    """Charge-time update: the EV's local weights become the community model."""
    if at.ev_id != ev.ev_id:
        raise FedmobError(f"charge event of {at.ev_id} delivered to {ev.ev_id}")
    theta.check_compatible(ev.weights)
    ev.weights = theta.copy()
    return ev


def form_peer_groups(classifications, assignments=None, min_group_size=2, round_index=0):
    """One group per community of its non-transitory EVs; groups smaller than
    ``min_group_size`` are dissolved (their members share directly)."""
    by_comm = {}
    for cls in classifications:
        if cls.kind != NON_TRANSITORY:
            continue
        comm = assignments.get(cls.ev_id, cls.community) if assignments else cls.community
        by_comm.setdefault(comm, []).append(cls.ev_id)
    return [PeerGroup(c, tuple(sorted(m)), round_index)
            for c, m in sorted(by_comm.items()) if len(m) >= min_group_size]


def direct_sharers(classifications, groups):
    grouped = {e for g in groups for e in g.members}
    return sorted(c.ev_id for c in classifications if c.ev_id not in grouped)


# -- state and rounds ----------------------------------------------------------

@dataclass
class FederationState:
    net: object
    agents: Dict[str, EvAgent]
    derms: Dict[int, DermsServer]
    seed: int
    origin: int
    round: int = 0
    distribution_log: List[dict] = field(default_factory=list)
    last_assignment: Dict[str, int] = field(default_factory=dict)

    def community_models(self):
        return {c: s.model for c, s in sorted(self.derms.items())}


def init_state(net, trips, charges, samples, n_communities, seed, origin=None):
    """Every community model and every EV start from one
    seeded initialisation."""
    theta0 = net.init_weights(derive_seed(seed, "init"))
    by_ev = trips_by_ev(trips)
    ch = {}
    for c in charges:
        ch.setdefault(c.ev_id, []).append(c)
    agents = {}
    for ev_id in sorted(by_ev):
        evs = samples.for_ev(ev_id)
        agents[ev_id] = EvAgent(ev_id, theta0.copy(), sorted(by_ev[ev_id], key=lambda t: t.start_time),
                                sorted(ch.get(ev_id, []), key=lambda c: c.time),
                                evs.train, evs.test, modal_dropoff(by_ev[ev_id]))
    derms = {c: DermsServer(c, theta0.copy()) for c in range(1, n_communities + 1)}
    if origin is None:
        first = min((t.start_time for t in trips), default=0)
        origin = first - first % DAY_S
    return FederationState(net, agents, derms, seed, origin)


def make_round_plan(state, t, cfg):
    """Who participates in round ``t`` (1-based), where, and with what data.

    Participants are EVs with a trip in the round window and at least one
    training sample whose label (the charge event) is already known by the
    window end. Non-transitory EVs register with their modal community,
    transitory EVs with their modal drop-off community.
    """
    start = state.origin + (t - 1) * cfg.round_seconds
    end = start + cfg.round_seconds
    classes, assignments, masks, charges = {}, {}, {}, {}
    for ev_id, ev in state.agents.items():
        window_trips = [tr for tr in ev.trips if start <= tr.start_time < end]
        evch = [c for c in ev.charges if start <= c.time < end]
        if evch:
            charges[ev_id] = evch
        if not window_trips or ev.train is None:
            continue
        mask = ev.train.label_times < end
        if not mask.any():
            continue
        cls = classify_mobility(window_trips, (start, end), cfg.tau, ev_id)
        classes[ev_id] = cls
        assignments[ev_id] = cls.community if cls.kind == NON_TRANSITORY else modal_dropoff(window_trips)
        masks[ev_id] = mask
    groups = form_peer_groups(list(classes.values()), assignments, cfg.min_group_size, t)
    direct = direct_sharers(list(classes.values()), groups)
    return RoundPlan(t, (start, end), classes, assignments, groups, direct, masks, charges)


def _opaque_token(seed, t, community, ev_id):
    key = f"{seed}/{t}/{community}/{ev_id}".encode()
    return hashlib.blake2b(key, digest_size=8, person=b"derms-token").hexdigest()


def _train_one(state, ev_id, mask, cfg, opt, t):
    ev = state.agents[ev_id]
    data = (ev.train.X[mask], ev.train.y[mask])
    seed = derive_seed(state.seed, "train", t, ev_id)
    trained, hist = train_local(state.net, ev.weights, data, cfg.local_epochs, opt, seed)
    return ev_id, trained, hist, int(mask.sum())


def run_round(state, plan, cfg, opt=OptimizerConfig(), augment=True, threads=1,
              evaluate_fn=None, entropy_fn=None):
    """Execute one round in place on ``state`` and return ``(state, report)``.

    Order: local training, peer share and augmentation (non-transitory EVs
    in groups, only when ``augment``), direct submission for everyone else,
    per-community FedAvg, then redistribution at each charge event.
    """
    t = plan.index
    aug = cfg.augmentation
    # 1. local training
    try:
        jobs = [(e, plan.train_masks[e]) for e in plan.participants]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(lambda j: _train_one(state, j[0], j[1], cfg, opt, t), jobs))
        else:
            results = [_train_one(state, e, m, cfg, opt, t) for e, m in jobs]
    except FedmobError as exc:
        raise RoundError(str(exc), t, cause=exc) from exc
    trained = {e: w for e, w, _, _ in results}
    counts = {e: n for e, _, _, n in results}
    losses = [h.losses[-1] for _, _, h, _ in results if h.losses]

    # 2. peer share / direct share
    submissions = []
    grouped = set()
    if augment:
        for g in plan.groups:
            for ev_id in g.members:
                peers = [trained[m] for m in g.members if m != ev_id]
                try:
                    aug_w = peer_share(trained[ev_id], peers, aug,
                                       seed=derive_seed(state.seed, "noise", t, ev_id))
                except FedmobError as exc:
                    raise RoundError(str(exc), t, g.community, exc) from exc
                if cfg.submission == "accompany":
                    submissions.append((g.community, ev_id, trained[ev_id]))
                submissions.append((g.community, ev_id, aug_w))
                grouped.add(ev_id)
    for ev_id in plan.participants:
        if ev_id not in grouped:
            submissions.append((plan.assignments[ev_id], ev_id, trained[ev_id]))

    # 3. DERMS aggregation
    per_comm = {}
    for comm, ev_id, w in submissions:
        server = state.derms[comm]
        try:
            server.submit(w, counts[ev_id], _opaque_token(state.seed, t, comm, len(server.inbox)))
        except FedmobError as exc:
            raise RoundError(str(exc), t, comm, exc) from exc
        per_comm[comm] = per_comm.get(comm, 0) + 1
    for comm, server in sorted(state.derms.items()):
        try:
            server.aggregate(cfg.weighting)
        except FedmobError as exc:
            raise RoundError(str(exc), t, comm, exc) from exc

    # 4. participants keep their trained weights unless they charge
    for ev_id, w in trained.items():
        state.agents[ev_id].weights = w
    n_dist = 0
    for ev_id in sorted(plan.charges):
        ev = state.agents[ev_id]
        for event in plan.charges[ev_id]:
            theta = state.derms[event.community].model
            distribute(theta, ev, event)
            state.distribution_log.append({"round": t, "ev_id": ev_id, "time": event.time,
                                           "community": event.community})
            n_dist += 1

    prev = state.last_assignment
    moved = [e for e in plan.assignments if e in prev and prev[e] != plan.assignments[e]]
    seen = [e for e in plan.assignments if e in prev]
    state.last_assignment = {**prev, **plan.assignments}
    state.round = t

    n_nt = sum(1 for c in plan.classes.values() if c.kind == NON_TRANSITORY)
    report = RoundReport(
        round=t, mode="fltn" if augment else "plain_fl", window=plan.window,
        participants=len(plan.participants), transitory=len(plan.classes) - n_nt,
        non_transitory=n_nt, peer_groups=len(plan.groups) if augment else 0,
        group_sizes=[len(g.members) for g in plan.groups] if augment else [],
        direct_fallback=sum(1 for e in plan.direct if plan.classes[e].kind == NON_TRANSITORY)
        if augment else n_nt,
        submissions=per_comm, distributions=n_dist,
        mean_train_loss=float(np.mean(losses)) if losses else None,
        turnover=(len(moved) / len(seen)) if seen else None,
        submission_entropy=entropy_fn([w for _, _, w in submissions]) if entropy_fn and submissions else {},
    )
    if evaluate_fn is not None:
        report.accuracy, report.community_accuracy = evaluate_fn(state)
    return state, report


def run_plain_fl_round(state, plan, cfg, opt=OptimizerConfig(), threads=1,
                       evaluate_fn=None, entropy_fn=None):
    """The regular-FL control: same pipeline, peer sharing disabled."""
    return run_round(state, plan, cfg, opt, augment=False, threads=threads,
                     evaluate_fn=evaluate_fn, entropy_fn=entropy_fn)


# -- evaluation ----------------------------------------------------------------

def predict_with_community_models(state, samples=None):
    """Predict every EV's test samples with its home community's model."""
    preds, ys, evs = [], [], []
    for ev_id, ev in state.agents.items():
        data = ev.test if samples is None else samples.for_ev(ev_id)
        if data is None or len(data) == 0:
            continue
        theta = state.derms[ev.home].model
        preds.append(predict(state.net, theta, data.X))
        ys.append(data.y)
        evs.append(np.full(len(data), ev_id, dtype=object))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object)
    return np.concatenate(preds), np.concatenate(ys), np.concatenate(evs)


def community_accuracy(state):
    """Pooled test accuracy and per-home-community accuracy."""
    pred, y, evs = predict_with_community_models(state)
    if y.size == 0:
        return None, {}
    homes = np.array([state.agents[e].home for e in evs])
    per = {int(c): float(np.mean(pred[homes == c] == y[homes == c])) for c in np.unique(homes)}
    return float(np.mean(pred == y)), per
