"""The two DNS-assisted attacks built on top of website fingerprinting.

``ctw`` closes the world: only monitored sites the attacker saw in DNS may be
nearest neighbours (unmonitored training traces always may). ``hp`` keeps a
fingerprinting verdict only if the DNS data confirms the same site.
"""
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from . import UNMONITORED
from .wfknn import KnnConfig, KnnModel, classify

WF = "wf"
CTW = "ctw"
HP = "hp"
ATTACKS = (WF, CTW, HP)


def attack_ctw(X, y, w, cfg: KnnConfig, test, observed_sites: AbstractSet[int], penalty=None) -> int:
    monitored = set(np.unique(np.asarray(y)).tolist()) - {UNMONITORED}
    return classify(X, y, w, cfg, test, set(observed_sites) & monitored, penalty)


def attack_hp(wf_verdict: int, observed_sites: AbstractSet[int]) -> int:
    if wf_verdict != UNMONITORED and wf_verdict in observed_sites:
        return wf_verdict
    return UNMONITORED


def ctw_verdicts(model: KnnModel, distances: np.ndarray, observed: Sequence[AbstractSet[int]]) -> np.ndarray:
    """Batch ``ctw`` over precomputed test-to-training distances."""
    monitored = set(np.unique(model.y).tolist()) - {UNMONITORED}
    return model.predict_from_distances(distances, [frozenset(o) & monitored for o in observed])


def hp_verdicts(wf: Iterable[int], observed: Sequence[AbstractSet[int]]) -> np.ndarray:
    return np.array([attack_hp(int(v), o) for v, o in zip(wf, observed)], dtype=np.int64)
