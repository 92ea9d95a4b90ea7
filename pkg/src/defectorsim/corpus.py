"""Site -> domain-set catalogs.

A corpus lists, for every ranked site, the DNS domains a visit to its front
page resolves. Domains embedded by exactly one site are *unique* and identify
that site when observed on the wire.
"""
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, GenerationError, ParseError

_LABEL = re.compile(r"^[a-z0-9_-]+$")


def check_domain(name: str) -> str:
    if not name or name != name.lower() or name.startswith(".") or name.endswith("."):
        raise DataError(f"invalid domain name {name!r}")
    if not all(_LABEL.match(label) for label in name.split(".")):
        raise DataError(f"invalid domain name {name!r}")
    return name


@dataclass(frozen=True)
class DomainRecord:
    domain: str
    ttl_raw: int

    def __post_init__(self):
        check_domain(self.domain)
        if self.ttl_raw < 0:
            raise DataError(f"negative TTL for {self.domain}: {self.ttl_raw}")


@dataclass(frozen=True)
class SiteProfile:
    site: int
    records: Tuple[DomainRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise DataError(f"site {self.site} has no domains")
        names = [r.domain for r in self.records]
        if len(set(names)) != len(names):
            dup = next(n for n, c in Counter(names).items() if c > 1)
            raise DataError(f"site {self.site} lists domain {dup} twice")

    @property
    def domains(self) -> Tuple[str, ...]:
        return tuple(r.domain for r in self.records)


@dataclass(frozen=True)
class Corpus:
    profiles: Tuple[SiteProfile, ...]
    unique_index: Dict[str, int] = field(compare=False, repr=False)

    def __len__(self):
        return len(self.profiles)

    def profile(self, site: int) -> SiteProfile:
        if not 1 <= site <= len(self.profiles):
            raise KeyError(site)
        return self.profiles[site - 1]

    def domains(self, site: int) -> Tuple[str, ...]:
        return self.profile(site).domains

    def unique_domains(self, site: int) -> List[str]:
        return [d for d in self.domains(site) if self.unique_index.get(d) == site]

    @property
    def sites_without_unique(self) -> List[int]:
        """Sites whose every domain is shared with another site."""
        cached = self.__dict__.get("_no_unique")
        if cached is None:
            have = set(self.unique_index.values())
            cached = [p.site for p in self.profiles if p.site not in have]
            object.__setattr__(self, "_no_unique", cached)
        return cached


def build_index(profiles: Sequence[SiteProfile]) -> Corpus:
    """Build a corpus and its unique-domain index from rank-ordered profiles."""
    for expected, profile in enumerate(profiles, start=1):
        if profile.site != expected:
            raise DataError(f"site ranks must run 1..N without gaps; expected {expected}, got {profile.site}")
    owners: Dict[str, int] = {}
    shared = set()
    for profile in profiles:
        for name in profile.domains:
            if name in owners:
                shared.add(name)
            else:
                owners[name] = profile.site
    unique = {d: s for d, s in owners.items() if d not in shared}
    return Corpus(tuple(profiles), unique)


@dataclass(frozen=True)
class CorpusStats:
    """Targets for synthetic corpora; defaults follow the Alexa top-million crawl."""
    mean_domains: float = 12.2
    median_domains: int = 10
    unique_fraction: float = 0.968
    mean_unique: float = 2.3
    pool_skew: float = 1.0
    pool_size: Optional[int] = None
    median_ttl: float = 255.0
    short_unique_ttl_fraction: float = 0.48
    max_retries: int = 5

    def validate(self):
        if not 0.0 <= self.unique_fraction <= 1.0:
            raise GenerationError(f"unique_fraction must lie in [0, 1], got {self.unique_fraction}")
        if self.mean_domains < 1 or self.median_domains < 1:
            raise GenerationError("sites need at least one domain on average")
        if self.median_domains > self.mean_domains + 1:
            raise GenerationError("a right-skewed domain count needs median <= mean")
        if self.unique_fraction > 0 and self.mean_unique <= 0:
            raise GenerationError("unique_fraction > 0 but mean_unique is 0: no site can own a unique domain")
        if self.pool_size is not None and self.pool_size < 1:
            raise GenerationError("pool_size must be positive")
        if not 0.0 <= self.short_unique_ttl_fraction <= 1.0:
            raise GenerationError("short_unique_ttl_fraction must lie in [0, 1]")


def _nbinom_cdf(k: int, r: float, mean: float) -> float:
    p = r / (r + mean)
    log_pmf = r * math.log(p)
    total = 0.0
    for j in range(k + 1):
        total += math.exp(log_pmf)
        log_pmf += math.log((j + r) / (j + 1)) + math.log(1 - p)
    return total


def _dispersion_for(stats: CorpusStats) -> float:
    """Shape whose shifted median sits squarely on the target median."""
    mean = stats.mean_domains - 1
    m = int(stats.median_domains) - 1
    if mean <= 0 or m < 0:
        return 1.0

    def off_center(r):
        below = _nbinom_cdf(m - 1, r, mean) if m > 0 else 0.0
        return abs(below + _nbinom_cdf(m, r, mean) - 1.0)

    grid = np.arange(0.5, 20.0, 0.05)
    return float(min(grid, key=off_center))


_SHORT_TTLS = np.array([5, 10, 20, 30, 60])
_SHORT_P = np.array([0.05, 0.05, 0.1, 0.2, 0.6])
_LONG_TTLS = np.array([120, 300, 600, 900, 1800, 3600, 7200, 14400, 86400])
_LONG_P = np.array([0.04, 0.2, 0.1, 0.2, 0.08, 0.14, 0.06, 0.08, 0.1])


def _draw_corpus(n_sites: int, stats: CorpusStats, rng: np.random.Generator) -> Corpus:
    r = _dispersion_for(stats)
    p = r / (r + stats.mean_domains - 1)
    counts = 1 + rng.negative_binomial(r, p, size=n_sites)

    has_unique = rng.random(n_sites) < stats.unique_fraction
    mean_unique_given = stats.mean_unique / max(stats.unique_fraction, 1e-12)
    n_unique = np.where(has_unique, 1 + rng.poisson(max(mean_unique_given - 1, 0.0), size=n_sites), 0)
    n_unique = np.minimum(n_unique, counts)
    n_shared = counts - n_unique

    pool_size = stats.pool_size or max(64, n_sites // 2)
    weights = np.arange(1, pool_size + 1, dtype=np.float64) ** -stats.pool_skew
    pool_cdf = np.cumsum(weights)
    pool_cdf /= pool_cdf[-1]
    # a pool domain has one TTL wherever it is embedded
    sigma = 1.8
    pool_ttl = np.maximum(1, np.rint(np.exp(rng.normal(math.log(stats.median_ttl), sigma, pool_size)))).astype(int)

    shared_sets: List[List[int]] = []
    for k in n_shared:
        k = int(min(k, pool_size))
        chosen: List[int] = []
        seen = set()
        while len(chosen) < k:
            draws = np.searchsorted(pool_cdf, rng.random(2 * (k - len(chosen)) + 2), side="right")
            for d in np.minimum(draws, pool_size - 1):
                d = int(d)
                if d not in seen:
                    seen.add(d)
                    chosen.append(d)
                    if len(chosen) == k:
                        break
        shared_sets.append(chosen)

    # Sites planned without unique domains must not own a pool domain alone.
    usage = Counter(d for s in shared_sets for d in s)
    popular = [d for d, _ in sorted(usage.items(), key=lambda kv: (-kv[1], kv[0])) if usage[d] >= 2]
    for i in np.flatnonzero(~has_unique):
        chosen = shared_sets[i]
        if all(usage[d] >= 2 for d in chosen):
            continue
        keep = [d for d in chosen if usage[d] >= 2]
        fillers = (d for d in popular if d not in chosen)
        while len(keep) < len(chosen):
            d = next(fillers, None)
            if d is None:
                break
            keep.append(d)
        if not keep:
            continue  # tiny corpora: nothing is shared yet
        for d in chosen:
            usage[d] -= 1
        for d in keep:
            usage[d] += 1
        shared_sets[i] = keep

    total_unique = int(n_unique.sum())
    short = rng.random(total_unique) < stats.short_unique_ttl_fraction
    unique_ttl = np.where(short, rng.choice(_SHORT_TTLS, size=total_unique, p=_SHORT_P),
                          rng.choice(_LONG_TTLS, size=total_unique, p=_LONG_P))
    pool_ttl = _calibrate_pool_ttl(pool_ttl, usage, unique_ttl, stats.median_ttl)

    profiles = []
    offset = 0
    for i in range(n_sites):
        rank = i + 1
        records = []
        for j in range(int(n_unique[i])):
            name = f"www.site{rank}.example" if j == 0 else f"a{j}.site{rank}.example"
            records.append(DomainRecord(name, int(unique_ttl[offset + j])))
        offset += int(n_unique[i])
        for d in shared_sets[i]:
            records.append(DomainRecord(f"s{d}.shared.example", int(pool_ttl[d])))
        profiles.append(SiteProfile(rank, tuple(records)))
    return build_index(profiles)


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


def _calibrate_pool_ttl(pool_ttl, usage, unique_ttl, target) -> np.ndarray:
    """Rescale shared-domain TTLs so the per-record median TTL hits ``target``.

    A handful of very popular pool domains carry most shared records, so the
    raw draw alone leaves the median at the mercy of their TTLs.
    """
    counts = np.array([usage.get(d, 0) for d in range(len(pool_ttl))], dtype=np.float64)
    if counts.sum() == 0:
        return pool_ttl
    base = pool_ttl.astype(np.float64)
    values = np.concatenate([unique_ttl.astype(np.float64), base])
    weights = np.concatenate([np.ones(len(unique_ttl)), counts])
    lo, hi = -8.0, 8.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        values[len(unique_ttl):] = base * math.exp(mid)
        if _weighted_median(values, weights) < target:
            lo = mid
        else:
            hi = mid
    return np.maximum(1, np.rint(base * math.exp(hi))).astype(int)


def unique_coverage(corpus: Corpus) -> float:
    """Fraction of sites that own at least one unique domain."""
    return len(set(corpus.unique_index.values())) / len(corpus)


def generate_synthetic(n_sites: int, stats: Optional[CorpusStats] = None,
                       rng: Optional[np.random.Generator] = None) -> Corpus:
    """Draw a corpus whose summary statistics match ``stats``.

    Unique-coverage is only checked against the target for ``n_sites >= 1000``;
    smaller corpora are dominated by sampling noise.
    """
    stats = stats or CorpusStats()
    stats.validate()
    if n_sites < 1:
        raise GenerationError("n_sites must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    realized = None
    for _ in range(max(1, stats.max_retries)):
        corpus = _draw_corpus(n_sites, stats, rng)
        if n_sites < 1000:
            return corpus
        realized = unique_coverage(corpus)
        if abs(realized - stats.unique_fraction) <= 0.02:
            return corpus
    raise GenerationError(
        f"realized unique coverage {realized:.4f} misses target {stats.unique_fraction} "
        f"after {stats.max_retries} attempts")


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for profile in corpus.profiles:
            body = ",".join(f"{r.domain}:{r.ttl_raw}" for r in profile.records)
            fh.write(f"{profile.site}\t{body}\n")


def _parse_line(line: str, lineno: int, path) -> SiteProfile:
    try:
        rank_s, body = line.split("\t")
        rank = int(rank_s)
        records = []
        for item in body.split(","):
            name, ttl = item.rsplit(":", 1)
            records.append(DomainRecord(name, int(ttl)))
        return SiteProfile(rank, tuple(records))
    except (ValueError, DataError) as exc:
        raise ParseError(f"malformed corpus line: {exc}", line=lineno, path=path) from None


def load_corpus(path) -> Corpus:
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            profile = _parse_line(line, lineno, path)
            expected = len(profiles) + 1
            if profile.site != expected:
                kind = "duplicate" if profile.site < expected else "out-of-order"
                raise ParseError(f"{kind} rank {profile.site}, expected {expected}", line=lineno, path=path)
            profiles.append(profile)
    if not profiles:
        raise ParseError("empty corpus", path=path)
    return build_index(profiles)


def corpus_from_sets(domain_sets: Iterable[Iterable[str]], ttl: int = 300) -> Corpus:
    """Convenience constructor: site ``i+1`` embeds ``domain_sets[i]``."""
    profiles = [SiteProfile(i, tuple(DomainRecord(d, ttl) for d in sorted(ds)))
                for i, ds in enumerate(domain_sets, start=1)]
    return build_index(profiles)
