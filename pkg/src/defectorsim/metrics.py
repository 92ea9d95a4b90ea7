"""Open-world precision/recall bookkeeping.

Every test trace lands in exactly one of tp/fp/tn/fn. A verdict naming the
wrong monitored site is a false positive; it is also tracked in
``wrong_site`` so recall can count it as a miss for the true site:
``recall = tp / (monitored test traces)``.
"""
from dataclasses import dataclass, field
from typing import List, Optional

from . import UNMONITORED


@dataclass
class EvalResult:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    wrong_site: int = 0
    folds: List["EvalResult"] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def n_monitored(self) -> int:
        return self.tp + self.fn + self.wrong_site

    @property
    def recall(self) -> float:
        return self.tp / self.n_monitored if self.n_monitored else float("nan")

    @property
    def precision(self) -> float:
        positives = self.tp + self.fp
        return self.tp / positives if positives else float("nan")

    def add(self, true_label: int, verdict: Optional[int]) -> None:
        if verdict is None or verdict == UNMONITORED:
            if true_label == UNMONITORED:
                self.tn += 1
            else:
                self.fn += 1
        elif verdict == true_label:
            self.tp += 1
        else:
            self.fp += 1
            if true_label != UNMONITORED:
                self.wrong_site += 1

    def merge(self, other: "EvalResult") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.tn += other.tn
        self.fn += other.fn
        self.wrong_site += other.wrong_site

    @classmethod
    def tally(cls, true_labels, verdicts) -> "EvalResult":
        res = cls()
        for t, v in zip(true_labels, verdicts):
            res.add(int(t), int(v))
        return res
