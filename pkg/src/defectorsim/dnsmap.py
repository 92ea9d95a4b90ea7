"""Map DNS requests to websites through unique domains.

A sample (the domains one page load resolved) is attributed to a monitored
site when every unique domain in it points to that one site. Popularity and
request order are ignored.
"""
import csv
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set

import numpy as np

from . import UNMONITORED
from .corpus import Corpus
from .errors import ConfigurationError, ParseError
from .metrics import EvalResult


@dataclass(frozen=True)
class DnsSample:
    true_site: int  # UNMONITORED for visits to unmonitored sites
    domains: FrozenSet[str]


def unique_owners(unique_index: Dict[str, int], domains: Iterable[str]) -> Set[int]:
    return {unique_index[d] for d in domains if d in unique_index}


def classify_domains(unique_index: Dict[str, int], monitored: Set[int], domains: Iterable[str]) -> Optional[int]:
    owners = unique_owners(unique_index, domains)
    if len(owners) == 1:
        site = next(iter(owners))
        if site in monitored:
            return site
    return None


def classify_sample(corpus: Corpus, monitored: Set[int], sample: DnsSample) -> Optional[int]:
    """Monitored site named by the sample's unique domains, or None (unknown).

    Unique domains of two different sites in one sample are a conflict and
    yield None.
    """
    return classify_domains(corpus.unique_index, monitored, sample.domains)


def visit_sample(corpus: Corpus, site: int, rng: Optional[np.random.Generator] = None,
                 dropout: float = 0.0) -> FrozenSet[str]:
    """One page load of ``site``: each domain is resolved unless dropped."""
    domains = corpus.domains(site)
    if dropout <= 0.0 or rng is None:
        return frozenset(domains)
    keep = rng.random(len(domains)) >= dropout
    if not keep.any():
        keep[int(rng.integers(len(domains)))] = True
    return frozenset(d for d, k in zip(domains, keep) if k)


def _unique_from(site_domains: Dict[int, Set[str]]) -> Dict[str, int]:
    owner: Dict[str, int] = {}
    shared = set()
    for site, domains in site_domains.items():
        for d in domains:
            if d in owner and owner[d] != site:
                shared.add(d)
            else:
                owner[d] = site
    return {d: s for d, s in owner.items() if d not in shared}


def crossvalidate(corpus: Corpus, monitored: Sequence[int], unmonitored_count: int = 0, folds: int = 5,
                  rng: Optional[np.random.Generator] = None, samples_per_site: int = 5,
                  dropout: float = 0.0) -> EvalResult:
    """k-fold evaluation of the DNS classifier.

    Monitored sites contribute ``samples_per_site`` samples, one fold each in
    turn. Unmonitored sites are split across folds: a fold's unmonitored sites
    are tested and never seen in that fold's training data. With
    ``unmonitored_count == 0`` this is the closed world.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    monitored = sorted(set(monitored))
    if samples_per_site < folds:
        raise ConfigurationError(f"need at least {folds} samples per monitored site, got {samples_per_site}")
    if unmonitored_count and unmonitored_count < folds:
        raise ConfigurationError("fewer unmonitored sites than folds")
    others = [p.site for p in corpus.profiles if p.site not in set(monitored)]
    if unmonitored_count > len(others):
        raise ConfigurationError(f"corpus has only {len(others)} candidate unmonitored sites")
    unmonitored = sorted(rng.choice(others, size=unmonitored_count, replace=False).tolist()) if unmonitored_count else []
    held = np.array_split(rng.permutation(unmonitored), folds) if unmonitored else [[] for _ in range(folds)]

    samples = {s: [visit_sample(corpus, s, rng, dropout) for _ in range(samples_per_site)] for s in monitored}
    unmon_samples = {u: [visit_sample(corpus, u, rng, dropout) for _ in range(samples_per_site)] for u in unmonitored}

    mon_set = set(monitored)
    total = EvalResult()
    for k in range(folds):
        test_unmon = set(int(u) for u in held[k])
        training: Dict[int, Set[str]] = {}
        for s in monitored:
            training[s] = set().union(*(smp for i, smp in enumerate(samples[s]) if i % folds != k))
        for u in unmonitored:
            if u not in test_unmon:
                training[u] = set().union(*unmon_samples[u])
        index = _unique_from(training)
        fold = EvalResult()
        for s in monitored:
            for i, smp in enumerate(samples[s]):
                if i % folds == k:
                    fold.add(s, classify_domains(index, mon_set, smp))
        for u in sorted(test_unmon):
            fold.add(UNMONITORED, classify_domains(index, mon_set, unmon_samples[u][0]))
        total.merge(fold)
        total.folds.append(fold)
    return total


def save_samples(samples: Iterable[DnsSample], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for smp in samples:
            writer.writerow([smp.true_site, ";".join(sorted(smp.domains))])


def load_samples(path) -> List[DnsSample]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                label, domains = row
                site = UNMONITORED if label == "unmonitored" else int(label)
            except ValueError:
                raise ParseError("expected 'label,domain1;domain2;...'", line=lineno, path=path) from None
            names = frozenset(d for d in domains.split(";") if d)
            if not names:
                raise ParseError("sample lists no domains", line=lineno, path=path)
            out.append(DnsSample(site, names))
    return out
