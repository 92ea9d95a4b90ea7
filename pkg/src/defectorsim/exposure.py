"""AS-level exposure of DNS paths compared with web paths.

For a site, ``D`` is the set of ASes crossed by traceroutes towards its DNS
servers and ``W`` the set crossed by traceroutes towards its web server. The
exposure ``lam(D, W) = |D - W| / |D | W|`` is the share of ASes that only
see the DNS traffic.
"""
import csv
import ipaddress
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DomainError, ParseError

log = logging.getLogger(__name__)

WEB = "web"
DNS = "dns"


def parse_address(text, path=None, line=None):
    try:
        return ipaddress.ip_address(text)
    except ValueError:
        raise ParseError(f"malformed address {text!r}", line=line, path=path) from None


class RoutingTable:
    """Prefix to origin-AS map with longest-prefix matching."""

    def __init__(self, entries: Iterable[Tuple[str, int]] = ()):
        # (ip version, prefix length) -> {network int: asn}
        self._tables: Dict[Tuple[int, int], Dict[int, int]] = defaultdict(dict)
        self._lengths: Dict[int, List[int]] = {4: [], 6: []}
        self._size = 0
        for prefix, asn in entries:
            self.add(prefix, asn)

    def __len__(self):
        return self._size

    def add(self, prefix, asn: int) -> None:
        try:
            net = ipaddress.ip_network(prefix, strict=True)
        except ValueError:
            raise ParseError(f"malformed prefix {prefix!r}") from None
        asn = int(asn)
        if asn <= 0:
            raise DataError(f"invalid ASN {asn} for {prefix}")
        table = self._tables[(net.version, net.prefixlen)]
        key = int(net.network_address)
        if key in table:
            raise DataError(f"duplicate prefix {net}")
        table[key] = asn
        lengths = self._lengths[net.version]
        if net.prefixlen not in lengths:
            lengths.append(net.prefixlen)
            lengths.sort(reverse=True)
        self._size += 1

    def lookup(self, ip) -> Optional[int]:
        addr = ip if isinstance(ip, (ipaddress.IPv4Address, ipaddress.IPv6Address)) else parse_address(ip)
        bits = addr.max_prefixlen
        value = int(addr)
        for length in self._lengths[addr.version]:
            masked = value >> (bits - length) << (bits - length) if length else 0
            asn = self._tables[(addr.version, length)].get(masked)
            if asn is not None:
                return asn
        return None

    def entries(self) -> List[Tuple[str, int]]:
        out = []
        for (version, length), table in self._tables.items():
            for key, asn in table.items():
                out.append((str(ipaddress.ip_network((key, length))), asn))
        return sorted(out)


def lpm(table: RoutingTable, ip) -> Optional[int]:
    """ASN of the longest matching prefix, or None when nothing matches."""
    return table.lookup(ip)


def load_routing_table(path) -> RoutingTable:
    table = RoutingTable()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected 'prefix<TAB>asn'", line=lineno, path=path)
            try:
                table.add(parts[0], int(parts[1]))
            except ValueError:
                raise ParseError(f"bad ASN {parts[1]!r}", line=lineno, path=path) from None
            except DataError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
    return table


@dataclass(frozen=True)
class Hop:
    ttl: int
    ip: Optional[str]  # None when the hop did not answer


@dataclass(frozen=True)
class Traceroute:
    target: str
    hops: Tuple[Hop, ...]
    site: str = ""
    role: str = WEB
    proto: str = "tcp"

    def __post_init__(self):
        ttls = [h.ttl for h in self.hops]
        if any(b <= a for a, b in zip(ttls, ttls[1:])):
            raise DataError(f"traceroute to {self.target}: hop ttl values must increase")
        if self.role not in (WEB, DNS):
            raise DataError(f"unknown traceroute role {self.role!r}")


def load_traceroutes(path) -> List[Traceroute]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                hops = tuple(Hop(int(h["ttl"]), h.get("ip")) for h in obj["hops"])
                tr = Traceroute(obj["target"], hops, obj.get("site", ""), obj.get("role", WEB), obj.get("proto", "tcp"))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad traceroute record: {exc}", line=lineno, path=path) from None
            except DataError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            for h in tr.hops:
                if h.ip is not None:
                    parse_address(h.ip, path, lineno)
            out.append(tr)
    return out


def load_delegations(path) -> Dict[str, List[str]]:
    """Authoritative-server addresses per site: ``site<TAB>ip[,ip...]``."""
    out: Dict[str, List[str]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected 'site<TAB>ip,ip,...'", line=lineno, path=path)
            addrs = [a for a in parts[1].split(",") if a]
            for a in addrs:
                parse_address(a, path, lineno)
            out.setdefault(parts[0], []).extend(addrs)
    return out


def _routable(addr) -> bool:
    return addr.is_global


def as_set(traces: Iterable[Traceroute], table: RoutingTable) -> FrozenSet[int]:
    """ASes of all answering, publicly routable hops."""
    asns = set()
    for tr in traces:
        for hop in tr.hops:
            if hop.ip is None:
                continue
            addr = parse_address(hop.ip)
            if not _routable(addr):
                continue
            asn = table.lookup(addr)
            if asn is not None:
                asns.add(asn)
    return frozenset(asns)


def lam(d: Iterable[int], w: Iterable[int]) -> float:
    """Fraction of ASes that carry only the DNS traffic."""
    d, w = set(d), set(w)
    union = d | w
    if not union:
        raise DomainError("exposure is undefined when both AS sets are empty")
    return len(d - w) / len(union)


@dataclass(frozen=True)
class ExposureResult:
    site: str
    d_set: FrozenSet[int]
    w_set: FrozenSet[int]
    lam: float


@dataclass
class ExposureReport:
    results: List[ExposureResult]
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.results])

    def ecdf(self) -> List[Tuple[float, float]]:
        """(λ, fraction of sites with exposure ≤ λ) at every distinct λ."""
        values = np.sort(self.lambdas)
        if values.size == 0:
            return []
        xs, idx = np.unique(values, return_index=True)
        counts = np.append(idx[1:], values.size)
        return [(float(x), float(c) / values.size) for x, c in zip(xs, counts)]

    @property
    def median(self) -> float:
        return float(np.median(self.lambdas)) if self.results else math.nan

    @property
    def unique_dns_ases(self) -> FrozenSet[int]:
        return frozenset().union(*(r.d_set for r in self.results))

    @property
    def unique_web_ases(self) -> FrozenSet[int]:
        return frozenset().union(*(r.w_set for r in self.results))


def exposure_report(sites: Sequence[str], traces: Iterable[Traceroute], table: RoutingTable,
                    delegations: Optional[Dict[str, List[str]]] = None) -> ExposureReport:
    """Per-site exposure. Sites lacking web or DNS traceroutes are skipped.

    Delegation addresses, when given, add the authoritative servers' own ASes
    to ``D`` (traceroutes often stop before reaching them).
    """
    by_site: Dict[Tuple[str, str], List[Traceroute]] = defaultdict(list)
    for tr in traces:
        by_site[(tr.site, tr.role)].append(tr)
    delegations = delegations or {}
    report = ExposureReport([])
    for site in sites:
        web, dns = by_site.get((site, WEB)), by_site.get((site, DNS))
        if not web or not dns:
            missing = "web" if not web else "dns"
            log.warning("skipping %s: no %s traceroutes", site, missing)
            report.skipped.append((site, f"no {missing} traceroutes"))
            continue
        d = set(as_set(dns, table))
        for ip in delegations.get(site, ()):
            addr = parse_address(ip)
            asn = table.lookup(addr) if _routable(addr) else None
            if asn is not None:
                d.add(asn)
        w = as_set(web, table)
        if not d and not w:
            report.skipped.append((site, "no routable hops"))
            continue
        report.results.append(ExposureResult(site, frozenset(d), w, lam(d, w)))
    return report


def _asns(s) -> str:
    return " ".join(str(a) for a in sorted(s))


def write_report(report: ExposureReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site", "lambda", "d_ases", "w_ases", "status"])
        for r in report.results:
            writer.writerow([r.site, repr(r.lam), _asns(r.d_set), _asns(r.w_set), "ok"])
        for site, why in report.skipped:
            writer.writerow([site, "", "", "", f"skipped: {why}"])


def write_ecdf(report: ExposureReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "cdf"])
        for x, y in report.ecdf():
            writer.writerow([repr(x), repr(y)])
