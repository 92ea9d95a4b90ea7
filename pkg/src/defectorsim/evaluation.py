"""Open-world experiments comparing wf, ctw and hp.

The dataset holds ``M`` monitored sites with ``I`` traces each plus ``U``
single-trace unmonitored sites. Monitored traces and unmonitored sites are
split into ``folds`` blocks; fold ``k`` tests its monitored block against the
same number of traces from its unmonitored block (base rate 0.5) and trains
on everything outside both blocks.

Monitored site ``i`` (trace label ``i``) sits at popularity rank
``start_rank + i``. For each test trace the attacker's DNS window holds the
background visits of one window length before the verdict, plus the test
visit itself when it leaves through an observed exit (probability ``pct``).

Two background models are available:

``poisson``
    Visits to monitored site ``s`` in the window are Poisson with mean
    ``pct * rate * window * p(s)``; every observed visit identifies its site.
``simulate``
    Full pipeline: visit stream, exit caches with TTL clipping, sliding
    window, and corpus-based site mapping. Only practical for small catalogs.
"""
import csv
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import UNMONITORED, popmodel
from .corpus import Corpus, CorpusStats, generate_synthetic
from .defector import ATTACKS, CTW, HP, WF, ctw_verdicts, hp_verdicts
from .dnscache import DnsWindow, TtlPolicy, visible_sites
from .errors import ConfigurationError
from .metrics import EvalResult
from .seeding import derive_rng, derive_seed
from .trafficgen import (AttackerConfig, NetworkModel, VisitEvent, expand_to_dns, generate_visits,
                         observed_subset)
from .wfknn import (CellTrace, KnnConfig, KnnModel, feature_matrix, fit_penalty, generate_traces,
                    generate_unmonitored, learn_weights, random_weights)

AXES = ("pct", "start_rank", "rounds", "window", "scale", "distribution")
BACKGROUNDS = ("poisson", "simulate")
MAX_SIMULATED_CATALOG = 200_000


@dataclass(frozen=True)
class ExperimentConfig:
    monitored_count: int = 1000
    instances_per_site: int = 100
    unmonitored_count: int = 100_000
    folds: int = 10
    start_rank: int = 10_000
    attacks: Tuple[str, ...] = ATTACKS
    pct: float = 0.33
    window: float = 60.0
    scale: float = 1.0
    visits_per_10min: float = 700_000.0
    popularity: str = "pc"
    popularity_sites: Optional[int] = None
    rounds: int = 2500
    k: int = 2
    random_weights: bool = True
    separability: float = 0.5
    seed: int = 0
    desk_scale: int = 20
    background: str = "poisson"
    ttl_mode: str = "bug"
    ttl_min: int = 60
    ttl_max: int = 1800
    n_exits: int = 100

    @property
    def n_monitored(self) -> int:
        return self.monitored_count // self.desk_scale

    @property
    def n_instances(self) -> int:
        return self.instances_per_site // self.desk_scale

    @property
    def n_unmonitored(self) -> int:
        return self.unmonitored_count // self.desk_scale

    def pop_model(self) -> popmodel.PopModel:
        return popmodel.PopModel.from_label(self.popularity, self.popularity_sites)

    def validate(self) -> None:
        if self.desk_scale < 1:
            raise ConfigurationError("desk_scale must be >= 1")
        for name in ("monitored_count", "instances_per_site", "unmonitored_count"):
            value = getattr(self, name)
            if value <= 0 or value % self.desk_scale:
                raise ConfigurationError(f"desk_scale {self.desk_scale} does not divide {name}={value}")
        if self.folds < 2:
            raise ConfigurationError("need at least two folds")
        n_mon_traces = self.n_monitored * self.n_instances
        if n_mon_traces % self.folds:
            raise ConfigurationError(f"{self.folds} folds do not divide {n_mon_traces} monitored traces")
        if self.n_unmonitored % self.folds:
            raise ConfigurationError(f"{self.folds} folds do not divide {self.n_unmonitored} unmonitored sites")
        if self.n_unmonitored // self.folds < n_mon_traces // self.folds:
            raise ConfigurationError("too few unmonitored sites per fold for a 0.5 base rate")
        if not 0.0 <= self.pct <= 1.0:
            raise ConfigurationError(f"pct must lie in [0, 1], got {self.pct}")
        if self.window <= 0 or self.scale <= 0:
            raise ConfigurationError("window and scale must be positive")
        if self.start_rank < 0:
            raise ConfigurationError("start_rank must be >= 0")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"background must be one of {BACKGROUNDS}")
        unknown = set(self.attacks) - set(ATTACKS)
        if unknown or not self.attacks:
            raise ConfigurationError(f"unknown attack kinds {sorted(unknown)}")
        pop = self.pop_model()
        if self.start_rank + self.n_monitored > pop.n_sites:
            raise ConfigurationError(
                f"monitored ranks up to {self.start_rank + self.n_monitored} exceed the {pop.n_sites}-site catalog")
        KnnConfig(self.k, self.rounds)
        TtlPolicy(self.ttl_mode, self.ttl_min, self.ttl_max)


@dataclass
class TraceDataset:
    X_mon: np.ndarray
    y_mon: np.ndarray
    X_unmon: np.ndarray

    @property
    def n_sites(self) -> int:
        return int(self.y_mon.max()) if len(self.y_mon) else 0

    @classmethod
    def from_traces(cls, traces: Sequence[CellTrace]) -> "TraceDataset":
        mon = [t for t in traces if t.label != UNMONITORED]
        unmon = [t for t in traces if t.label == UNMONITORED]
        return cls(feature_matrix(mon), np.array([t.label for t in mon], dtype=np.int64), feature_matrix(unmon))


def synthesize_dataset(cfg: ExperimentConfig) -> TraceDataset:
    rng = derive_rng(cfg.seed, "traces")
    mon = generate_traces(cfg.n_monitored, cfg.n_instances, cfg.separability, rng)
    unmon = generate_unmonitored(cfg.n_unmonitored, cfg.separability, rng)
    return TraceDataset.from_traces(mon + unmon)


@dataclass
class FoldSplit:
    test_mon: np.ndarray
    test_unmon: np.ndarray
    train_mon: np.ndarray
    train_unmon: np.ndarray
    held_unmon: np.ndarray


def make_folds(data: TraceDataset, folds: int, seed: int) -> List[FoldSplit]:
    rng = derive_rng(seed, "folds")
    n_mon, n_unmon = len(data.y_mon), len(data.X_unmon)
    if n_mon % folds or n_unmon % folds:
        raise ConfigurationError(f"{folds} folds do not divide {n_mon} monitored / {n_unmon} unmonitored traces")
    mon_blocks = np.split(rng.permutation(n_mon), folds)
    unmon_blocks = np.split(rng.permutation(n_unmon), folds)
    per_fold = n_mon // folds
    if n_unmon // folds < per_fold:
        raise ConfigurationError("too few unmonitored traces per fold for a 0.5 base rate")
    out = []
    for k in range(folds):
        test_mon = np.sort(mon_blocks[k])
        held = np.sort(unmon_blocks[k])
        test_unmon = np.sort(unmon_blocks[k][:per_fold])
        out.append(FoldSplit(test_mon, test_unmon,
                             np.setdiff1d(np.arange(n_mon), test_mon),
                             np.setdiff1d(np.arange(n_unmon), held),
                             held))
    return out


@dataclass
class WfFold:
    model: KnnModel
    distances: np.ndarray
    true_labels: np.ndarray
    trace_ids: np.ndarray
    verdicts: np.ndarray


def _wf_fold(data: TraceDataset, split: FoldSplit, cfg: ExperimentConfig, fold: int) -> WfFold:
    X_train = np.vstack([data.X_mon[split.train_mon], data.X_unmon[split.train_unmon]])
    y_train = np.concatenate([data.y_mon[split.train_mon], np.zeros(len(split.train_unmon), dtype=np.int64)])
    penalty = fit_penalty(X_train)
    knn = KnnConfig(cfg.k, cfg.rounds)
    rng = derive_rng(cfg.seed, "weights", fold)
    if cfg.rounds == 0 and cfg.random_weights:
        # no learning: the classifier runs on its random initial weights
        w = random_weights(rng)
    else:
        w = learn_weights(X_train, y_train, knn, rng, penalty)
    model = KnnModel(X_train, y_train, w, knn, penalty)
    X_test = np.vstack([data.X_mon[split.test_mon], data.X_unmon[split.test_unmon]])
    true = np.concatenate([data.y_mon[split.test_mon], np.zeros(len(split.test_unmon), dtype=np.int64)])
    n_mon = len(data.y_mon)
    ids = np.concatenate([split.test_mon, n_mon + split.test_unmon])
    D = model.distances(X_test)
    return WfFold(model, D, true, ids, model.predict_from_distances(D))


class WfCache:
    """Fingerprinting results per fold, shared by sweep points that agree on them."""

    def __init__(self):
        self._store: Dict[tuple, WfFold] = {}
        self._lock = threading.Lock()

    def get(self, data, split, cfg, fold) -> WfFold:
        key = (fold, cfg.rounds, cfg.k, cfg.random_weights)
        with self._lock:
            hit = self._store.get(key)
        if hit is None:
            hit = _wf_fold(data, split, cfg, fold)
            with self._lock:
                self._store[key] = hit
        return hit


def monitored_probabilities(cfg: ExperimentConfig, n_sites: int) -> np.ndarray:
    ranks = cfg.start_rank + np.arange(1, n_sites + 1)
    return cfg.pop_model().probabilities(ranks)


def observe_poisson(cfg: ExperimentConfig, true_labels: np.ndarray, n_sites: int,
                    rng: np.random.Generator) -> List[frozenset]:
    rate = cfg.visits_per_10min * cfg.scale / 600.0
    lam = cfg.pct * rate * cfg.window * monitored_probabilities(cfg, n_sites)
    own = rng.random(len(true_labels)) < cfg.pct
    out = []
    for i, label in enumerate(true_labels):
        seen = set((np.flatnonzero(rng.poisson(lam) > 0) + 1).tolist())
        if own[i] and label != UNMONITORED:
            seen.add(int(label))
        out.append(frozenset(seen))
    return out


class _Simulator:
    """Window contents built from simulated exit traffic."""

    def __init__(self, cfg: ExperimentConfig, n_sites: int, corpus: Optional[Corpus]):
        self.cfg = cfg
        self.pop = cfg.pop_model()
        if corpus is None:
            if self.pop.n_sites > MAX_SIMULATED_CATALOG:
                raise ConfigurationError(
                    f"simulated background needs a corpus; synthesizing {self.pop.n_sites} sites is too large "
                    f"(limit {MAX_SIMULATED_CATALOG}; set popularity_sites or pass a corpus)")
            corpus = generate_synthetic(self.pop.n_sites, CorpusStats(), derive_rng(cfg.seed, "corpus"))
        if len(corpus) < self.pop.n_sites:
            raise ConfigurationError(f"corpus has {len(corpus)} sites, popularity model needs {self.pop.n_sites}")
        self.corpus = corpus
        self.policy = TtlPolicy(cfg.ttl_mode, cfg.ttl_min, cfg.ttl_max)
        self.net = NetworkModel.uniform_exits(cfg.n_exits, visits_per_10min=cfg.visits_per_10min, scale=cfg.scale)
        self.attacker = AttackerConfig.covering(self.net, cfg.pct)
        self.first_rank = cfg.start_rank + 1
        self.ranks = set(range(self.first_rank, self.first_rank + n_sites))

    def observe(self, true_labels, rng, seed) -> List[frozenset]:
        cfg = self.cfg
        warmup = float(self.policy.max_clipped)
        end = warmup + cfg.window
        out = []
        for i, label in enumerate(true_labels):
            visits = observed_subset(generate_visits(self.net, self.pop, end, seed=derive_seed(seed, i)), self.attacker)
            caches = {}
            misses = expand_to_dns(visits, self.corpus, caches, self.policy)
            exit_id = int(rng.choice(self.net.n_exits, p=np.asarray(self.net.exit_weights)))
            if exit_id in self.attacker.observed_exits:
                if label != UNMONITORED:
                    site = cfg.start_rank + int(label)
                else:
                    site = self._unmonitored_site(rng)
                misses += expand_to_dns([VisitEvent(end, site, exit_id)], self.corpus, caches, self.policy)
            window = DnsWindow(cfg.window)
            for ev in misses:
                window.observe(ev)
            seen = visible_sites(window, self.corpus, end, candidates=self.ranks)
            out.append(frozenset(s - cfg.start_rank for s in seen))
        return out

    def _unmonitored_site(self, rng) -> int:
        while True:
            site = popmodel.sample(self.pop, rng)
            if site not in self.ranks:
                return site


@dataclass
class FoldOutcome:
    fold: int
    trace_ids: np.ndarray
    true_labels: np.ndarray
    verdicts: Dict[str, np.ndarray]
    observed_counts: np.ndarray
    results: Dict[str, EvalResult]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seed: int
    results: Dict[str, EvalResult]
    folds: List[FoldOutcome]

    def verdict_rows(self) -> List[dict]:
        rows = []
        for fo in self.folds:
            for j in range(len(fo.trace_ids)):
                rows.append({
                    "trace_id": int(fo.trace_ids[j]),
                    "true_label": int(fo.true_labels[j]),
                    "wf": int(fo.verdicts[WF][j]),
                    "ctw": int(fo.verdicts[CTW][j]),
                    "hp": int(fo.verdicts[HP][j]),
                    "observed_sites_count": int(fo.observed_counts[j]),
                })
        rows.sort(key=lambda r: r["trace_id"])
        return rows

    def result_rows(self, axis: str = "none", value="") -> List[dict]:
        rows = []
        for attack in self.config.attacks:
            for fo in self.folds:
                r = fo.results[attack]
                rows.append(_row(attack, axis, value, fo.fold, r, self.seed))
        return rows

    def summary_rows(self, axis: str = "none", value="") -> List[dict]:
        return [_row(a, axis, value, "all", self.results[a], self.seed) for a in self.config.attacks]


def _row(attack, axis, value, fold, r: EvalResult, seed) -> dict:
    return {"attack": attack, "axis": axis, "value": value, "fold": fold, "tp": r.tp, "fp": r.fp,
            "tn": r.tn, "fn": r.fn, "recall": r.recall, "precision": r.precision, "seed": seed}


def run_experiment(cfg: ExperimentConfig, data: Optional[TraceDataset] = None, workers: int = 1,
                   point_seed: Optional[int] = None, cache: Optional[WfCache] = None,
                   corpus: Optional[Corpus] = None, observed_override=None) -> ExperimentResult:
    """Cross-validated wf/ctw/hp results for one configuration.

    ``point_seed`` seeds the DNS side; it defaults to one derived from the
    master seed. ``observed_override(fold, true_labels)`` replaces the DNS
    model entirely (used to pin observations in tests).
    """
    cfg.validate()
    if data is None:
        data = synthesize_dataset(cfg)
    n_sites = data.n_sites
    if cfg.start_rank + n_sites > cfg.pop_model().n_sites:
        raise ConfigurationError("monitored ranks exceed the popularity catalog")
    splits = make_folds(data, cfg.folds, cfg.seed)
    cache = cache or WfCache()
    seed = derive_seed(cfg.seed, "point", 0) if point_seed is None else point_seed
    simulator = _Simulator(cfg, n_sites, corpus) if cfg.background == "simulate" and observed_override is None else None

    def one(fold: int) -> FoldOutcome:
        wf = cache.get(data, splits[fold], cfg, fold)
        rng = derive_rng(seed, "dns", fold)
        if observed_override is not None:
            observed = list(observed_override(fold, wf.true_labels))
        elif simulator is not None:
            observed = simulator.observe(wf.true_labels, rng, derive_seed(seed, "background", fold))
        else:
            observed = observe_poisson(cfg, wf.true_labels, n_sites, rng)
        verdicts = {WF: wf.verdicts, CTW: ctw_verdicts(wf.model, wf.distances, observed), HP: hp_verdicts(wf.verdicts, observed)}
        results = {a: EvalResult.tally(wf.true_labels, v) for a, v in verdicts.items()}
        return FoldOutcome(fold, wf.trace_ids, wf.true_labels, verdicts,
                           np.array([len(o) for o in observed]), results)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(one, range(cfg.folds)))
    totals = {}
    for attack in ATTACKS:
        total = EvalResult()
        for fo in outcomes:
            total.merge(fo.results[attack])
            total.folds.append(fo.results[attack])
        totals[attack] = total
    return ExperimentResult(cfg, seed, totals, outcomes)


def _axis_value(axis: str, raw):
    if axis == "distribution":
        return str(raw)
    if axis in ("start_rank", "rounds"):
        return int(raw)
    return float(raw)


_AXIS_FIELD = {"pct": "pct", "start_rank": "start_rank", "rounds": "rounds", "window": "window",
               "scale": "scale", "distribution": "popularity"}


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, workers: int = 1,
          data: Optional[TraceDataset] = None, corpus: Optional[Corpus] = None) -> List[Tuple[object, ExperimentResult]]:
    """One experiment per axis value; fingerprinting data is shared across points."""
    if axis not in AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    points = [replace(cfg, **{_AXIS_FIELD[axis]: _axis_value(axis, v)}) for v in values]
    for p in points:
        p.validate()
    if data is None and points:
        data = synthesize_dataset(cfg)
    cache = WfCache()
    out = []
    for i, (raw, point) in enumerate(zip(values, points)):
        res = run_experiment(point, data, workers, derive_seed(cfg.seed, "point", i), cache, corpus)
        out.append((_axis_value(axis, raw), res))
    return out


RESULT_COLUMNS = ["attack", "axis", "value", "fold", "tp", "fp", "tn", "fn", "recall", "precision", "seed"]
VERDICT_COLUMNS = ["trace_id", "true_label", "wf", "ctw", "hp", "observed_sites_count"]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_rows(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def audit_verdict_log(rows: Sequence[dict], attack: str) -> EvalResult:
    """Recompute an attack's totals from the per-trace verdict log."""
    return EvalResult.tally([r["true_label"] for r in rows], [r[attack] for r in rows])
