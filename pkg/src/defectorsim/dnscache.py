"""Exit-relay DNS caching and the attacker's sliding observation window.

Tor exits clip cached TTLs into ``[60 s, 30 min]``. A bug in the deployed code
pins every TTL to 60 s instead; ``TtlPolicy(mode="bug")`` reproduces that.

Cache entries are valid for ``t_insert <= t < t_insert + ttl``. Hits do not
refresh the expiry.
"""
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, Optional, Set

from .corpus import Corpus, DomainRecord
from .errors import ConfigurationError, ContractError

CLIP = "clip"
BUG = "bug"


@dataclass(frozen=True)
class TtlPolicy:
    mode: str = CLIP
    min_ttl: int = 60
    max_ttl: int = 1800

    def __post_init__(self):
        if self.mode not in (CLIP, BUG):
            raise ConfigurationError(f"unknown TTL mode {self.mode!r}")
        if not 0 < self.min_ttl <= self.max_ttl:
            raise ConfigurationError(f"need 0 < min_ttl <= max_ttl, got {self.min_ttl}, {self.max_ttl}")

    @property
    def max_clipped(self) -> int:
        return self.min_ttl if self.mode == BUG else self.max_ttl


def clip_ttl(policy: TtlPolicy, ttl_raw: float) -> float:
    if policy.mode == BUG:
        return policy.min_ttl
    return min(max(ttl_raw, policy.min_ttl), policy.max_ttl)


class Lookup(enum.Enum):
    HIT = "hit"
    MISS = "miss"


class ExitCache:
    """DNS cache of one exit relay, shared by every client using that exit."""

    def __init__(self, exit_id: Hashable = 0):
        self.exit_id = exit_id
        self.entries: Dict[str, float] = {}
        self.clock = float("-inf")

    def lookup(self, policy: TtlPolicy, t: float, record: DomainRecord) -> Lookup:
        if t < self.clock:
            raise ContractError(f"exit {self.exit_id}: time went backwards ({t} < {self.clock})")
        self.clock = t
        expiry = self.entries.get(record.domain)
        if expiry is not None and t < expiry:
            return Lookup.HIT
        self.entries[record.domain] = t + clip_ttl(policy, record.ttl_raw)
        return Lookup.MISS

    def purge(self) -> None:
        """Drop entries that expired before the current clock."""
        self.entries = {d: e for d, e in self.entries.items() if e > self.clock}


def lookup(cache: ExitCache, policy: TtlPolicy, t: float, record: DomainRecord) -> Lookup:
    return cache.lookup(policy, t, record)


@dataclass(frozen=True)
class DnsEvent:
    time: float
    domain: str
    exit_id: Hashable = 0


@dataclass
class DnsWindow:
    """Every DNS request the attacker saw during the last ``length`` seconds."""
    length: float
    events: deque = field(default_factory=deque)
    now: float = float("-inf")

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigurationError("window length must be positive")

    def advance(self, now: float) -> None:
        self.now = max(self.now, now)
        horizon = self.now - self.length
        while self.events and self.events[0].time < horizon:
            self.events.popleft()

    def observe(self, event: DnsEvent) -> None:
        if self.events and event.time < self.events[-1].time:
            raise ContractError(f"window events must arrive in time order ({event.time} < {self.events[-1].time})")
        self.events.append(event)
        self.advance(event.time)

    def domains(self) -> Set[str]:
        return {e.domain for e in self.events}


def observe(window: DnsWindow, event: DnsEvent) -> None:
    window.observe(event)


def sites_from_domains(corpus: Corpus, seen: Set[str], candidates: Optional[Iterable[int]] = None) -> Set[int]:
    """Sites evidenced by a set of observed domains.

    A site is visible if one of its unique domains was seen, or if its whole
    domain set was seen (the only way to spot sites without unique domains).
    """
    visible = {corpus.unique_index[d] for d in seen if d in corpus.unique_index}
    for site in corpus.sites_without_unique:
        if all(d in seen for d in corpus.domains(site)):
            visible.add(site)
    if candidates is not None:
        visible &= set(candidates)
    return visible


def visible_sites(window: DnsWindow, corpus: Corpus, now: float,
                  candidates: Optional[Iterable[int]] = None) -> Set[int]:
    window.advance(now)
    return sites_from_domains(corpus, window.domains(), candidates)
