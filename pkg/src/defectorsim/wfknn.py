"""Website fingerprinting with a weighted k-nearest-neighbour classifier.

Traces are sequences of Tor cells seen between a client and its guard. Each
trace becomes a 46-entry feature vector; distances are weighted L1 sums and
weights are learned so that instances of the same site move together. A test
trace is assigned a site only when all ``k`` nearest training traces agree on
that site; anything else is unmonitored.

Feature layout::

    [0]      total cells          [1] outgoing cells       [2] incoming cells
    [3]      outgoing fraction    [4] duration (ms)
    [5:25]   positions of the first 20 outgoing cells (-1 when absent)
    [25:28]  outgoing bursts: count, longest, mean length
    [28:46]  outgoing cells per time bucket (18 equal-width buckets)
"""
import csv
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set

import numpy as np

from . import UNMONITORED
from .errors import ConfigurationError, ContractError, DomainError, ParseError

N_FEATURES = 46
SENTINEL = -1.0
N_OUT_POSITIONS = 20
N_BUCKETS = 18
OUTGOING = 1
INCOMING = -1


@dataclass
class CellTrace:
    times: np.ndarray  # int64 milliseconds, non-decreasing
    directions: np.ndarray  # +1 outgoing, -1 incoming
    label: int = UNMONITORED

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.directions = np.asarray(self.directions, dtype=np.int8)
        if self.times.shape != self.directions.shape:
            raise DomainError("times and directions differ in length")
        if len(self.times) and (np.diff(self.times) < 0).any():
            raise DomainError("cell times must be non-decreasing")
        if not np.isin(self.directions, (OUTGOING, INCOMING)).all():
            raise DomainError("directions must be +1 or -1")

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 2
    rounds: int = 2500

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")


def _runs(directions: np.ndarray):
    """(direction, length) of each maximal same-direction run."""
    change = np.flatnonzero(np.diff(directions)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [len(directions)])))
    return directions[starts], lengths


def extract_features(trace: CellTrace) -> np.ndarray:
    if len(trace) == 0:
        raise DomainError("cannot extract features from an empty trace")
    d = trace.directions
    t = trace.times
    out = d == OUTGOING
    n = len(d)
    n_out = int(out.sum())
    f = np.zeros(N_FEATURES)
    f[0] = n
    f[1] = n_out
    f[2] = n - n_out
    f[3] = n_out / n
    duration = int(t[-1] - t[0])
    f[4] = duration

    positions = np.flatnonzero(out)[:N_OUT_POSITIONS]
    f[5:5 + N_OUT_POSITIONS] = SENTINEL
    f[5:5 + len(positions)] = positions

    kinds, lengths = _runs(d)
    out_bursts = lengths[kinds == OUTGOING]
    if len(out_bursts):
        f[25] = len(out_bursts)
        f[26] = out_bursts.max()
        f[27] = out_bursts.mean()

    if n_out:
        if duration == 0:
            buckets = np.zeros(n_out, dtype=np.int64)
        else:
            rel = (t[out] - t[0]) * N_BUCKETS // duration
            buckets = np.minimum(rel, N_BUCKETS - 1)
        f[28:28 + N_BUCKETS] = np.bincount(buckets, minlength=N_BUCKETS)
    return f


def feature_matrix(traces: Sequence[CellTrace]) -> np.ndarray:
    return np.vstack([extract_features(tr) for tr in traces]) if traces else np.zeros((0, N_FEATURES))


def fit_penalty(X: np.ndarray, q: float = 95.0) -> np.ndarray:
    """Per-feature cost of a sentinel/value mismatch: the q-th percentile of |x|."""
    X = np.asarray(X, dtype=np.float64)
    pen = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        col = np.abs(col[col != SENTINEL])
        pen[j] = np.percentile(col, q) if col.size else 0.0
    return pen


def _terms(X: np.ndarray, x: np.ndarray, penalty) -> np.ndarray:
    """Unweighted per-feature distance terms between the rows of X and x."""
    T = np.abs(X - x)
    if penalty is not None:
        one_sided = (X == SENTINEL) != (x == SENTINEL)
        if one_sided.any():
            T = np.where(one_sided, np.broadcast_to(penalty, T.shape), T)
    return T


def distance(w, a, b, penalty=None) -> float:
    """Weighted L1 distance.

    When ``penalty`` is given, a feature present on one side and missing
    (-1) on the other costs ``w_f * penalty_f``; features missing on both sides
    cost nothing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if a.shape != b.shape or a.shape != w.shape:
        raise ContractError(f"length mismatch: {a.shape}, {b.shape}, weights {w.shape}")
    if penalty is not None:
        penalty = np.broadcast_to(np.asarray(penalty, dtype=np.float64), a.shape)
    return float(_terms(a[None, :], b, penalty)[0] @ w)


def uniform_weights(n_features: int = N_FEATURES) -> np.ndarray:
    return np.full(n_features, 1.0 / n_features)


def random_weights(rng: np.random.Generator, n_features: int = N_FEATURES) -> np.ndarray:
    w = rng.random(n_features)
    return w / w.sum()


def _smallest(idx: np.ndarray, d: np.ndarray, m: int) -> np.ndarray:
    """The ``m`` entries of ``idx`` with the smallest ``d``, ties to the lower index."""
    if len(d) > m:
        kth = np.partition(d, m - 1)[m - 1]
        keep = d <= kth
        idx, d = idx[keep], d[keep]
    return idx[np.lexsort((idx, d))[:m]]


def learn_weights(X: np.ndarray, y: np.ndarray, cfg: KnnConfig, rng: np.random.Generator,
                  penalty: Optional[np.ndarray] = None, neighbours: int = 5, delta: float = 0.01,
                  init: Optional[np.ndarray] = None) -> np.ndarray:
    """Multiplicative weight learning that collapses same-site instances.

    Each round picks a training point, takes its ``neighbours`` nearest
    same-class and different-class points, and shrinks the weight of features
    that contribute more to same-class than to different-class distance (and
    grows the others).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, F = X.shape
    w = uniform_weights(F) if init is None else np.asarray(init, dtype=np.float64) / np.sum(init)
    if cfg.rounds == 0:
        return w
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2 or counts.max() < 2:
        raise ConfigurationError("weight learning needs two classes and a class with two instances")
    # unmonitored points (label 0) only ever serve as different-class neighbours
    eligible = np.flatnonzero(np.isin(y, labels[(counts >= 2) & (labels != UNMONITORED)]))
    if len(eligible) == 0:
        raise ConfigurationError("weight learning needs a monitored class with two instances")
    idx = np.arange(n)
    for _ in range(cfg.rounds):
        p = int(eligible[rng.integers(len(eligible))])
        T = _terms(X, X[p], penalty)
        d = T @ w
        same = np.flatnonzero((y == y[p]) & (idx != p))
        diff = np.flatnonzero(y != y[p])
        near_same = _smallest(same, d[same], neighbours)
        near_diff = _smallest(diff, d[diff], neighbours)
        badness = w * (T[near_same].sum(axis=0) - T[near_diff].sum(axis=0))
        total = np.abs(badness).sum()
        if total == 0:
            continue
        w = np.maximum(0.0, w * (1.0 - delta * np.sign(badness) * np.minimum(1.0, np.abs(badness) / total)))
        w /= w.sum()
    return w


class KnnModel:
    """Training set plus learned weights, ready to classify."""

    def __init__(self, X, y, weights, cfg: KnnConfig = KnnConfig(), penalty=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.w = np.asarray(weights, dtype=np.float64)
        self.cfg = cfg
        self.penalty = None if penalty is None else np.asarray(penalty, dtype=np.float64)
        if len(self.X) == 0:
            raise ConfigurationError("empty training set")
        if self.X.shape[1] != self.w.shape[0]:
            raise ContractError("weights do not match the feature length")

    def distances(self, Xtest, chunk: int = 16) -> np.ndarray:
        Xtest = np.atleast_2d(np.asarray(Xtest, dtype=np.float64))
        D = np.empty((len(Xtest), len(self.X)))
        for lo in range(0, len(Xtest), chunk):
            block = Xtest[lo:lo + chunk]
            T = np.abs(self.X[None, :, :] - block[:, None, :])
            if self.penalty is not None:
                one_sided = (self.X[None, :, :] == SENTINEL) != (block[:, None, :] == SENTINEL)
                T = np.where(one_sided, self.penalty, T)
            D[lo:lo + chunk] = T @ self.w
        return D

    def _nearest(self, d: np.ndarray, eligible: np.ndarray) -> np.ndarray:
        k = self.cfg.k
        idx = np.flatnonzero(eligible)
        if len(idx) < k:
            raise ConfigurationError(f"only {len(idx)} eligible training points for k={k}")
        dd = d[idx]
        kth = np.partition(dd, k - 1)[k - 1]
        close = np.flatnonzero(dd <= kth)
        order = np.lexsort((idx[close], dd[close]))[:k]
        return idx[close[order]]

    def _decide(self, neighbours: np.ndarray) -> int:
        labels = self.y[neighbours]
        first = labels[0]
        if first != UNMONITORED and (labels == first).all():
            return int(first)
        return UNMONITORED

    def predict_from_distances(self, D: np.ndarray, candidates=None) -> np.ndarray:
        """Verdicts for precomputed distances.

        ``candidates`` restricts which monitored classes may be neighbours:
        either one set for every row or a sequence of per-row sets. Unmonitored
        training points always stay eligible.
        """
        D = np.atleast_2d(D)
        out = np.empty(len(D), dtype=np.int64)
        unmon = self.y == UNMONITORED
        everyone = np.ones(len(self.y), dtype=bool)
        per_row = candidates is not None and not isinstance(candidates, (set, frozenset))
        for i in range(len(D)):
            cand = candidates[i] if per_row else candidates
            if cand is None:
                eligible = everyone
            else:
                eligible = unmon | np.isin(self.y, np.fromiter(cand, dtype=np.int64, count=len(cand)))
            out[i] = self._decide(self._nearest(D[i], eligible))
        return out

    def predict(self, Xtest, candidates=None) -> np.ndarray:
        return self.predict_from_distances(self.distances(Xtest), candidates)


def classify(X, y, w, cfg: KnnConfig, test, candidate_classes: Optional[Set[int]] = None, penalty=None) -> int:
    """Verdict for one feature vector: a site id, or UNMONITORED."""
    model = KnnModel(X, y, w, cfg, penalty)
    cand = None if candidate_classes is None else frozenset(candidate_classes)
    return int(model.predict(np.asarray(test)[None, :], cand)[0])


# --- synthetic traces ---------------------------------------------------------

# per-visit latency stretch; circuit latency swamps most of the site's own timing
STRETCH_SIGMA = 1.2
# sites differ in how stable their page loads are (static vs dynamic content)
SITE_NOISE_SIGMA = 1.0

@dataclass
class _Template:
    directions: np.ndarray
    times: np.ndarray
    gap_ms: float


def _template(rng: np.random.Generator) -> _Template:
    length = int(np.clip(rng.lognormal(np.log(400), 0.6), 40, 4000))
    stay_out = rng.uniform(0.1, 0.7)
    stay_in = rng.uniform(0.75, 0.97)
    # alternate geometric runs, starting with the client's request
    n_runs = length + 1
    out_runs = rng.geometric(1.0 - stay_out, n_runs)
    in_runs = rng.geometric(1.0 - stay_in, n_runs)
    runs = np.empty(2 * n_runs, dtype=np.int64)
    runs[0::2] = out_runs
    runs[1::2] = in_runs
    kinds = np.tile(np.array([OUTGOING, INCOMING], dtype=np.int8), n_runs)
    d = np.repeat(kinds, runs)[:length]
    gap = rng.uniform(2.0, 25.0)
    times = np.cumsum(rng.exponential(gap, length))
    times -= times[0]
    return _Template(d, times, gap)


def _instance(tpl: _Template, noise: float, rng: np.random.Generator, label: int) -> CellTrace:
    n = len(tpl.directions)
    length = max(1, int(round(n * np.exp(rng.normal(0.0, 0.2 * noise)))))
    src = np.minimum((np.arange(length) * n) // length, n - 1)
    d = tpl.directions[src].copy()
    flips = rng.random(length) < 0.06 * noise
    d[flips] = -d[flips]
    stretch = np.exp(rng.normal(0.0, STRETCH_SIGMA * noise))
    times = tpl.times[src] * stretch + rng.normal(0.0, tpl.gap_ms * noise, length)
    times = np.maximum.accumulate(np.maximum(np.rint(times), 0)).astype(np.int64)
    return CellTrace(times, d, label)


def _site_noise(separability: float, rng: np.random.Generator) -> float:
    return min(1.0, (1.0 - separability) * float(np.exp(rng.normal(0.0, SITE_NOISE_SIGMA))))


def generate_traces(n_sites: int, instances_per_site: int, separability: float,
                    rng: np.random.Generator, first_label: int = 1) -> List[CellTrace]:
    """Instances of ``n_sites`` synthetic sites, labelled from ``first_label``.

    Every site draws one template and a stability factor; instances perturb
    the template with noise scaled by ``1 - separability`` times that factor,
    so separability 1 gives identical instances.
    """
    if n_sites < 1:
        raise ConfigurationError("n_sites must be at least 1")
    if not 0.0 <= separability <= 1.0:
        raise ConfigurationError("separability must lie in [0, 1]")
    traces = []
    for s in range(n_sites):
        tpl = _template(rng)
        noise = _site_noise(separability, rng)
        for _ in range(instances_per_site):
            traces.append(_instance(tpl, noise, rng, first_label + s))
    return traces


def generate_unmonitored(count: int, separability: float, rng: np.random.Generator) -> List[CellTrace]:
    """One trace each of ``count`` distinct unmonitored sites."""
    if not 0.0 <= separability <= 1.0:
        raise ConfigurationError("separability must lie in [0, 1]")
    return [_instance(_template(rng), _site_noise(separability, rng), rng, UNMONITORED) for _ in range(count)]


# --- trace files ----------------------------------------------------------------

def save_trace(trace: CellTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"label,{trace.label}\n")
        for t, d in zip(trace.times.tolist(), trace.directions.tolist()):
            fh.write(f"{t},{d}\n")


def load_trace(path) -> CellTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 2 or rows[0][0] != "label":
        raise ParseError("first line must be 'label,<site>'", line=1, path=path)
    try:
        label = UNMONITORED if rows[0][1] == "unmonitored" else int(rows[0][1])
    except ValueError:
        raise ParseError(f"bad label {rows[0][1]!r}", line=1, path=path) from None
    times, dirs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            t, d = int(row[0]), int(row[1])
        except (ValueError, IndexError):
            raise ParseError("expected 'time_ms,direction'", line=lineno, path=path) from None
        times.append(t)
        dirs.append(d)
    if not times:
        raise ParseError("trace has no cells", path=path)
    try:
        return CellTrace(np.array(times), np.array(dirs), label)
    except DomainError as exc:
        raise ParseError(str(exc), path=path) from None


def save_dataset(traces: Sequence[CellTrace], directory) -> str:
    """Write one CSV per trace plus ``manifest.csv`` listing ``label,path``."""
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "path"])
        for i, tr in enumerate(traces):
            name = f"trace_{i:06d}.csv"
            save_trace(tr, os.path.join(directory, name))
            writer.writerow([tr.label, name])
    return manifest


def load_dataset(manifest) -> List[CellTrace]:
    base = os.path.dirname(os.path.abspath(manifest))
    traces = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["label", "path"]:
            raise ParseError("manifest header must be 'label,path'", line=1, path=manifest)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError("expected 'label,path'", line=lineno, path=manifest)
            tr = load_trace(os.path.join(base, row[1]))
            if str(tr.label) != row[0] and not (row[0] == "unmonitored" and tr.label == UNMONITORED):
                raise ParseError(f"label {row[0]} disagrees with {row[1]}", line=lineno, path=manifest)
            traces.append(tr)
    return traces
