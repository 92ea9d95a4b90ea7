"""Website popularity models and seeded site sampling.

Power-law models put mass ``rank ** -alpha`` on every rank in ``1..n_sites``;
uniform models put ``1 / n_sites`` on each rank. Sampling uses an inverse-CDF
table except for uniform models, which draw the rank directly (the 173M-site
catalog would not fit in a table).
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError

POWER_LAW = "powerlaw"
UNIFORM = "uniform"

# Catalog size for the power-law labels. The fit was made on Alexa data, so the
# default catalog is the Alexa top million.
DEFAULT_POWERLAW_SITES = 1_000_000
MAX_TABLE_SITES = 10_000_000

LABELS = {
    "pc": (POWER_LAW, 1.13, DEFAULT_POWERLAW_SITES),
    "pr": (POWER_LAW, 1.98, DEFAULT_POWERLAW_SITES),
    "uc": (UNIFORM, None, 1_000_000),
    "ur": (UNIFORM, None, 173_000_000),
}


@dataclass(frozen=True)
class PopModel:
    kind: str
    n_sites: int
    alpha: Optional[float] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (POWER_LAW, UNIFORM):
            raise ConfigurationError(f"unknown popularity kind {self.kind!r}")
        if int(self.n_sites) < 1:
            raise ConfigurationError(f"n_sites must be positive, got {self.n_sites}")
        if self.kind == POWER_LAW:
            if self.alpha is None or not self.alpha > 1:
                raise ConfigurationError(f"power-law alpha must be > 1, got {self.alpha}")
            if self.n_sites > MAX_TABLE_SITES:
                raise ConfigurationError(
                    f"power-law catalog of {self.n_sites} sites exceeds the "
                    f"{MAX_TABLE_SITES}-entry sampling table")
        if self.label is not None:
            kind, alpha, n_sites = LABELS[self.label]
            if kind != self.kind or (alpha is not None and alpha != self.alpha):
                raise ConfigurationError(f"label {self.label!r} does not match {self.kind}/{self.alpha}")
            if kind == UNIFORM and n_sites != self.n_sites:
                raise ConfigurationError(f"label {self.label!r} requires n_sites={n_sites}")

    @classmethod
    def from_label(cls, label: str, n_sites: Optional[int] = None) -> "PopModel":
        try:
            kind, alpha, default_n = LABELS[label]
        except KeyError:
            raise ConfigurationError(f"unknown popularity label {label!r}; expected one of {sorted(LABELS)}") from None
        if kind == UNIFORM:
            return cls(kind, default_n, None, label)
        return cls(kind, int(n_sites or default_n), alpha, label)

    @classmethod
    def power_law(cls, alpha: float, n_sites: int) -> "PopModel":
        return cls(POWER_LAW, int(n_sites), float(alpha))

    @classmethod
    def uniform(cls, n_sites: int) -> "PopModel":
        return cls(UNIFORM, int(n_sites))

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == UNIFORM:
            return f"uniform(N={self.n_sites})"
        return f"powerlaw(alpha={self.alpha},N={self.n_sites})"

    @cached_property
    def _normalizer(self) -> float:
        ranks = np.arange(1, self.n_sites + 1, dtype=np.float64)
        # numpy's pairwise summation keeps the relative error near 1e-16 here
        return float(np.sum(ranks ** -self.alpha))

    @cached_property
    def _cdf(self) -> np.ndarray:
        ranks = np.arange(1, self.n_sites + 1, dtype=np.float64)
        cdf = np.cumsum(ranks ** -self.alpha)
        cdf /= cdf[-1]
        return cdf

    def probabilities(self, ranks) -> np.ndarray:
        """Vectorised :func:`probability` over an array of ranks."""
        ranks = np.asarray(ranks)
        if ranks.size and (ranks.min() < 1 or ranks.max() > self.n_sites):
            bad = ranks[(ranks < 1) | (ranks > self.n_sites)][0]
            raise DomainError(f"rank {int(bad)} outside 1..{self.n_sites}")
        if self.kind == UNIFORM:
            return np.full(ranks.shape, 1.0 / self.n_sites)
        return ranks.astype(np.float64) ** -self.alpha / self._normalizer


def probability(model: PopModel, site: int) -> float:
    """Probability that one visit goes to the site at ``site`` (a rank)."""
    if not 1 <= site <= model.n_sites:
        raise DomainError(f"rank {site} outside 1..{model.n_sites}")
    if model.kind == UNIFORM:
        return 1.0 / model.n_sites
    return float(site) ** -model.alpha / model._normalizer


def sample_many(model: PopModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` ranks; consumes exactly ``size`` uniform variates."""
    if model.kind == UNIFORM:
        return rng.integers(1, model.n_sites + 1, size=size, dtype=np.int64)
    u = rng.random(size)
    # side="right": rank r is returned for u in [cdf[r-2], cdf[r-1])
    idx = np.searchsorted(model._cdf, u, side="right")
    return np.minimum(idx, model.n_sites - 1).astype(np.int64) + 1


def sample(model: PopModel, rng: np.random.Generator) -> int:
    return int(sample_many(model, rng, 1)[0])
