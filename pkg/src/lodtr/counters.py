"""Evaluation counters by solve category."""
from collections import OrderedDict
import threading

CATEGORIES = ("FEM", "LOD coarse", "LOD local", "RBLOD coarse", "RBLOD local", "TSRBLOD")


class EvaluationCounter:
    """Thread-safe integer counters, one per solve category.

    Every linear solve site increments exactly one category.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = OrderedDict((c, 0) for c in CATEGORIES)

    def add(self, category, n=1):
        if category not in self.counts:
            raise KeyError(f"unknown counter category {category!r}")
        with self._lock:
            self.counts[category] += int(n)

    def __getitem__(self, category):
        return self.counts[category]

    @property
    def total(self):
        return sum(self.counts.values())

    def as_dict(self):
        return dict(self.counts)

    def reset(self):
        for c in self.counts:
            self.counts[c] = 0

    def __repr__(self):
        return "EvaluationCounter(" + ", ".join(f"{k}={v}" for k, v in self.counts.items()) + ")"
