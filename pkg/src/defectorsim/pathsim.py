"""Monte-Carlo simulation of AS-level compromise of Tor clients over a month.

Each client keeps one bandwidth-weighted guard for the whole run and builds a
new circuit (fresh exit) for every ten-minute window in which it browses. A
visit is compromised when some AS sits both on the client-guard path and on
the path its DNS request takes after the exit.
"""
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ParseError, SimulationError
from .seeding import derive_rng

DAY = 86_400
CIRCUIT_SECONDS = 600
HORIZON_DAYS = 31
GOOGLE_DNS = "8.8.8.8"
DEFAULT_CLIENT_ASNS = (7922, 42610, 3320, 3215, 2856)

ISP_DNS = "IspDns"
GOOGLE = "GoogleDns"
LOCAL_DNS = "LocalDns"
STATUS_QUO = "StatusQuo"
MODES = (ISP_DNS, GOOGLE, LOCAL_DNS, STATUS_QUO)


@dataclass(frozen=True)
class Relay:
    id: str
    bandwidth: float
    is_guard: bool
    is_exit: bool
    asn: int
    resolvers: Tuple[Tuple[str, int], ...] = ()  # (address, asn) of the exit's resolvers

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ConfigurationError(f"relay {self.id}: negative bandwidth")


def load_relays(path) -> List[Relay]:
    """Line-oriented JSON relays; repeated ids with different resolvers are merged."""
    order: List[str] = []
    merged: Dict[str, Relay] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                rid = str(obj["id"])
                resolvers = ()
                if obj.get("resolver_ip") is not None:
                    resolvers = ((str(obj["resolver_ip"]), int(obj["resolver_asn"])),)
                relay = Relay(rid, float(obj["bw"]), bool(obj.get("guard", False)), bool(obj.get("exit", False)),
                              int(obj["asn"]), resolvers)
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad relay record: {exc}", line=lineno, path=path) from None
            except ConfigurationError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if rid in merged:
                old = merged[rid]
                merged[rid] = Relay(rid, old.bandwidth, old.is_guard, old.is_exit, old.asn, old.resolvers + relay.resolvers)
            else:
                merged[rid] = relay
                order.append(rid)
    return [merged[r] for r in order]


PathMap = Dict[Tuple[str, str], FrozenSet[int]]


def load_paths(path) -> PathMap:
    """CSV rows ``src_asn,dst_key,asn_list`` with ``;``-separated ASNs.

    Rows repeating a key are unioned.
    """
    out: Dict[Tuple[str, str], set] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0] == "src_asn"):
                continue
            if len(row) != 3:
                raise ParseError("expected 'src_asn,dst_key,asn_list'", line=lineno, path=path)
            try:
                asns = {int(a) for a in row[2].split(";") if a.strip()}
            except ValueError:
                raise ParseError(f"bad ASN list {row[2]!r}", line=lineno, path=path) from None
            out.setdefault((row[0].strip(), row[1].strip()), set()).update(asns)
    return {k: frozenset(v) for k, v in out.items()}


def _select(relays: Sequence[Relay], rng: np.random.Generator, size=None, role="exit"):
    weights = np.array([r.bandwidth for r in relays], dtype=np.float64)
    total = weights.sum()
    if not relays or total <= 0:
        raise ConfigurationError(f"no {role} relay with positive bandwidth")
    idx = rng.choice(len(relays), size=size, p=weights / total)
    return idx


def eligible(relays: Iterable[Relay], role: str) -> List[Relay]:
    flag = "is_guard" if role == "guard" else "is_exit"
    return [r for r in relays if getattr(r, flag)]


def select_guard(relays: Sequence[Relay], rng: np.random.Generator) -> Relay:
    pool = eligible(relays, "guard")
    return pool[int(_select(pool, rng, role="guard"))]


def select_exit(relays: Sequence[Relay], rng: np.random.Generator) -> Relay:
    pool = eligible(relays, "exit")
    return pool[int(_select(pool, rng, role="exit"))]


@dataclass(frozen=True)
class UsageSchedule:
    events: Tuple[Tuple[int, Tuple[str, ...]], ...]  # (seconds after midnight, domains)
    days: int = HORIZON_DAYS

    @classmethod
    def default(cls) -> "UsageSchedule":
        h = 3600
        return cls((
            (9 * h, ("mail.google.com", "www.twitter.com")),
            (12 * h, ("calendar.google.com", "docs.google.com")),
            (15 * h, ("www.facebook.com", "www.instagram.com")),
            (18 * h, ("www.google.com", "www.startpage.com", "www.ixquick.com")),
            (18 * h + 20 * 60, ("www.google.com", "www.startpage.com", "www.ixquick.com")),
        ))

    @property
    def horizon(self) -> int:
        return self.days * DAY

    def visits(self) -> List[Tuple[int, str]]:
        """Every (time, domain) over the horizon, times from midnight of day one."""
        return [(day * DAY + tod, d) for day in range(self.days) for tod, doms in self.events for d in doms]


@dataclass(frozen=True)
class DnsConfigScenario:
    mode: str
    name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown DNS configuration {self.mode!r}; expected one of {MODES}")

    @property
    def label(self) -> str:
        return self.name or self.mode


def _path(paths: PathMap, keys: Sequence[str], dst: str) -> Optional[FrozenSet[int]]:
    for k in keys:
        hit = paths.get((k, dst))
        if hit is not None:
            return hit
    return None


class EgressModel:
    """AS set carrying each DNS request once it leaves the exit."""

    def __init__(self, scenario: DnsConfigScenario, paths: PathMap, seed: int = 0):
        self.scenario = scenario
        self.paths = paths
        self.seed = seed
        self._cache: Dict[Tuple[str, str], FrozenSet[int]] = {}

    def resolver(self, exit_relay: Relay) -> Optional[Tuple[str, int]]:
        if not exit_relay.resolvers:
            return None
        if len(exit_relay.resolvers) == 1:
            return exit_relay.resolvers[0]
        rng = derive_rng(self.seed, "resolver", exit_relay.id)
        return exit_relay.resolvers[int(rng.integers(len(exit_relay.resolvers)))]

    def egress(self, exit_relay: Relay, domain: str) -> FrozenSet[int]:
        key = (exit_relay.id, domain if self.scenario.mode == LOCAL_DNS else "")
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._compute(exit_relay, domain)
        return hit

    def _compute(self, exit_relay: Relay, domain: str) -> FrozenSet[int]:
        own = frozenset({exit_relay.asn})
        mode = self.scenario.mode
        keys = (exit_relay.id, str(exit_relay.asn))
        if mode == ISP_DNS:
            return own
        if mode == GOOGLE:
            path = _path(self.paths, keys, GOOGLE_DNS)
        elif mode == LOCAL_DNS:
            path = _path(self.paths, keys, domain)
        else:
            res = self.resolver(exit_relay)
            if res is None:
                return own
            path = (_path(self.paths, keys, res[0]) or frozenset()) | {res[1]}
        # no measurement: only the exit AS itself is known to see the request
        return own if path is None else own | path


@dataclass(frozen=True)
class CompromiseMetrics:
    client_idx: int
    client_asn: int
    guard: str
    compromised: int
    opportunities: int
    time_to_first: int

    @property
    def fraction(self) -> float:
        return self.compromised / self.opportunities if self.opportunities else 0.0


def _client_asn(idx: int, client_asns: Sequence[int]) -> int:
    return int(client_asns[idx % len(client_asns)])


def _ingress(ingress: PathMap, client_asn: int, guard: Relay) -> FrozenSet[int]:
    for dst in (guard.id, str(guard.asn)):
        path = ingress.get((str(client_asn), dst))
        if path is not None:
            return path
    raise SimulationError(f"no ingress path for client AS {client_asn} to guard {guard.id} (AS {guard.asn})")


@dataclass
class ClientPlan:
    """Random choices of one client, shared by every scenario."""
    idx: int
    asn: int
    guard: Relay
    exits: List[Relay]          # one per circuit
    circuit_of_visit: np.ndarray


def plan_client(idx: int, relays: Sequence[Relay], schedule: UsageSchedule, seed: int,
                client_asns: Sequence[int] = DEFAULT_CLIENT_ASNS) -> ClientPlan:
    rng = derive_rng(seed, "client", idx)
    guard = select_guard(relays, rng)
    visits = schedule.visits()
    windows = np.array([t // CIRCUIT_SECONDS for t, _ in visits], dtype=np.int64)
    _, circuit = np.unique(windows, return_inverse=True)
    exits_pool = eligible(relays, "exit")
    picks = _select(exits_pool, rng, size=int(circuit.max()) + 1 if len(circuit) else 0)
    return ClientPlan(idx, _client_asn(idx, client_asns), guard, [exits_pool[int(i)] for i in picks], circuit)


def evaluate_client(plan: ClientPlan, schedule: UsageSchedule, egress: EgressModel,
                    ingress: PathMap) -> CompromiseMetrics:
    ing = _ingress(ingress, plan.asn, plan.guard)
    visits = schedule.visits()
    compromised = 0
    first = schedule.horizon
    for (t, domain), c in zip(visits, plan.circuit_of_visit):
        if ing & egress.egress(plan.exits[c], domain):
            compromised += 1
            first = min(first, t)
    return CompromiseMetrics(plan.idx, plan.asn, plan.guard.id, compromised, len(visits), int(first))


def run_simulation(clients: int, relays: Sequence[Relay], schedule: UsageSchedule, scenario: DnsConfigScenario,
                   ingress: PathMap, egress_paths: PathMap, seed: int = 0, workers: int = 1,
                   client_asns: Sequence[int] = DEFAULT_CLIENT_ASNS) -> List[CompromiseMetrics]:
    return scenario_compare(clients, relays, schedule, [scenario], ingress, egress_paths, seed, workers,
                            client_asns)[scenario.label]


def scenario_compare(clients: int, relays: Sequence[Relay], schedule: UsageSchedule,
                     scenarios: Sequence[DnsConfigScenario], ingress: PathMap, egress_paths: PathMap,
                     seed: int = 0, workers: int = 1,
                     client_asns: Sequence[int] = DEFAULT_CLIENT_ASNS) -> Dict[str, List[CompromiseMetrics]]:
    """Per-client metrics for every scenario, with the same circuits in each."""
    if clients < 0:
        raise ConfigurationError("client count must be non-negative")
    if not client_asns:
        raise ConfigurationError("need at least one client AS")
    if not scenarios:
        return {}
    models = [EgressModel(s, egress_paths, seed) for s in scenarios]

    def one(idx):
        plan = plan_client(idx, relays, schedule, seed, client_asns)
        return [evaluate_client(plan, schedule, m, ingress) for m in models]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(one, range(clients)))
    return {s.label: [r[i] for r in rows] for i, s in enumerate(scenarios)}


def summarize(results: Dict[str, List[CompromiseMetrics]]) -> List[dict]:
    """Median and quartiles of both metrics per scenario and client AS."""
    out = []
    for label, metrics in results.items():
        for asn in sorted({m.client_asn for m in metrics}):
            sub = [m for m in metrics if m.client_asn == asn]
            frac = np.array([m.fraction for m in sub])
            ttf = np.array([m.time_to_first for m in sub], dtype=np.float64)
            row = {"scenario": label, "client_asn": asn, "clients": len(sub)}
            for name, values in (("fraction", frac), ("time_to_first_s", ttf)):
                q1, med, q3 = np.percentile(values, [25, 50, 75])
                row.update({f"{name}_q1": float(q1), f"{name}_median": float(med), f"{name}_q3": float(q3)})
            out.append(row)
    return out


CLIENT_COLUMNS = ["scenario", "client_asn", "client_idx", "fraction", "time_to_first_s"]
SUMMARY_COLUMNS = ["scenario", "client_asn", "clients", "fraction_q1", "fraction_median", "fraction_q3",
                   "time_to_first_s_q1", "time_to_first_s_median", "time_to_first_s_q3"]


def write_clients(results: Dict[str, List[CompromiseMetrics]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLIENT_COLUMNS)
        for label, metrics in results.items():
            for m in metrics:
                writer.writerow([label, m.client_asn, m.client_idx, repr(m.fraction), m.time_to_first])


def write_summary(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in SUMMARY_COLUMNS])
