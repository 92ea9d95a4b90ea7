"""Network-wide website visits and the slice an attacker observes.

Visits form a homogeneous Poisson process. Streams are generated in fixed
ten-minute shards, each seeded from ``(seed, shard)``, so the output does not
depend on the number of workers.
"""
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List

import numpy as np

from . import popmodel
from .corpus import Corpus
from .dnscache import DnsEvent, ExitCache, Lookup, TtlPolicy
from .errors import ConfigurationError, DomainError
from .seeding import derive_rng

BASE_VISITS_PER_10MIN = 700_000.0
SHARD_SECONDS = 600.0


@dataclass(frozen=True)
class NetworkModel:
    visits_per_10min: float = BASE_VISITS_PER_10MIN
    scale: float = 1.0
    exit_weights: tuple = (1.0,)

    def __post_init__(self):
        w = np.asarray(self.exit_weights, dtype=np.float64)
        if self.visits_per_10min < 0 or self.scale <= 0:
            raise ConfigurationError("visit rate must be >= 0 and scale > 0")
        if w.size == 0 or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError("exit weights must be non-negative and sum to 1")

    @classmethod
    def uniform_exits(cls, n_exits: int, **kw) -> "NetworkModel":
        return cls(exit_weights=tuple([1.0 / n_exits] * n_exits), **kw)

    @property
    def n_exits(self) -> int:
        return len(self.exit_weights)

    @property
    def rate_per_second(self) -> float:
        return self.visits_per_10min * self.scale / 600.0


@dataclass(frozen=True)
class AttackerConfig:
    pct: float
    observed_exits: FrozenSet[int]

    def validate(self, net: NetworkModel) -> None:
        if not 0.0 <= self.pct <= 1.0:
            raise ConfigurationError(f"pct must lie in [0, 1], got {self.pct}")
        if any(not 0 <= e < net.n_exits for e in self.observed_exits):
            raise ConfigurationError("observed exit outside the network")
        covered = sum(net.exit_weights[e] for e in self.observed_exits)
        if abs(covered - self.pct) > 1e-6:
            raise ConfigurationError(f"observed exits carry {covered:.6f} of bandwidth, not pct={self.pct}")

    @classmethod
    def covering(cls, net: NetworkModel, pct: float) -> "AttackerConfig":
        """Observe exits in index order until their weight reaches ``pct``."""
        chosen, covered = [], 0.0
        for e, w in enumerate(net.exit_weights):
            if covered >= pct - 1e-12:
                break
            chosen.append(e)
            covered += w
        cfg = cls(float(covered), frozenset(chosen))
        if abs(covered - pct) > 1e-6:
            raise ConfigurationError(f"exit weights cannot add up to pct={pct} (closest {covered:.6f})")
        return cfg


@dataclass(frozen=True)
class VisitEvent:
    time: float
    site: int
    exit_id: int


@dataclass
class VisitStream:
    """Column-oriented, time-ordered visits."""
    times: np.ndarray
    sites: np.ndarray
    exits: np.ndarray

    def __len__(self):
        return len(self.times)

    def __iter__(self) -> Iterator[VisitEvent]:
        for t, s, e in zip(self.times.tolist(), self.sites.tolist(), self.exits.tolist()):
            yield VisitEvent(t, s, e)

    def mask(self, keep: np.ndarray) -> "VisitStream":
        return VisitStream(self.times[keep], self.sites[keep], self.exits[keep])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time", "site", "exit"])
            for t, s, e in zip(self.times.tolist(), self.sites.tolist(), self.exits.tolist()):
                writer.writerow([repr(t), s, e])


def _shard(net, pop, start, end, seed, index):
    rng = derive_rng(seed, "visits", index)
    n = rng.poisson(net.rate_per_second * (end - start))
    times = np.sort(start + (end - start) * rng.random(n))
    sites = popmodel.sample_many(pop, rng, n)
    exits = rng.choice(net.n_exits, size=n, p=np.asarray(net.exit_weights))
    return times, sites, exits.astype(np.int64)


def generate_visits(net: NetworkModel, pop: popmodel.PopModel, horizon: float, seed: int = 0,
                    start: float = 0.0, workers: int = 1) -> VisitStream:
    if horizon <= 0:
        raise DomainError("horizon must be positive")
    bounds = []
    t = start
    while t < start + horizon:
        bounds.append((t, min(t + SHARD_SECONDS, start + horizon)))
        t += SHARD_SECONDS
    # shard index is the absolute ten-minute slot, so overlapping calls agree
    jobs = [(lo, hi, int(lo // SHARD_SECONDS)) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda j: _shard(net, pop, j[0], j[1], seed, j[2]), jobs))
    return VisitStream(np.concatenate([p[0] for p in parts]),
                       np.concatenate([p[1] for p in parts]),
                       np.concatenate([p[2] for p in parts]))


def observed_subset(events: VisitStream, attacker: AttackerConfig) -> VisitStream:
    keep = np.isin(events.exits, np.fromiter(attacker.observed_exits, dtype=np.int64, count=len(attacker.observed_exits)))
    return events.mask(keep)


def expand_to_dns(events: Iterable[VisitEvent], corpus: Corpus, caches: Dict[int, ExitCache],
                  policy: TtlPolicy) -> List[DnsEvent]:
    """Resolve every domain of every visit through its exit's cache.

    Returns the cache misses, i.e. the requests that leave the exit. Caches
    missing from ``caches`` are created cold.
    """
    out = []
    n_sites = len(corpus)
    for ev in events:
        if not 1 <= ev.site <= n_sites:
            raise DomainError(f"site {ev.site} not in corpus of {n_sites} sites")
        cache = caches.get(ev.exit_id)
        if cache is None:
            cache = caches[ev.exit_id] = ExitCache(ev.exit_id)
        for record in corpus.profile(ev.site).records:
            if cache.lookup(policy, ev.time, record) is Lookup.MISS:
                out.append(DnsEvent(ev.time, record.domain, ev.exit_id))
    return out
