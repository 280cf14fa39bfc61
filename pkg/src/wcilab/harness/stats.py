"""Product-moment and rank correlation with an explicit undefined flag."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ..errors import DomainError


@dataclass(frozen=True)
class Correlation:
    pearson: float | None
    spearman: float | None
    n: int
    undefined: bool = False
    reason: str = ""

    def as_dict(self) -> dict:
        return {"pearson": self.pearson, "spearman": self.spearman, "n": self.n, "undefined": self.undefined, "reason": self.reason}


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    r = float(np.dot(da, db) / np.sqrt(np.dot(da, da) * np.dot(db, db)))
    return min(1.0, max(-1.0, r))


def correlate(a, b) -> Correlation:
    """Pearson and Spearman (average ranks for ties) between two series.

    A constant series gives ``undefined=True`` and ``None`` coefficients
    instead of NaN.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DomainError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < 3:
        raise DomainError("correlation needs at least 3 points")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("correlation inputs must be finite")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        which = "first" if np.ptp(a) == 0 else "second"
        return Correlation(None, None, a.size, True, f"{which} series has zero variance")
    return Correlation(_pearson(a, b), _pearson(rankdata(a), rankdata(b)), a.size)
