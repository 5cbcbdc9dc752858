"""Verification error rates: FAR/FRR, EER, HTER, accuracy and DET sweeps.

A trial is accepted when its score is >= the threshold.
"""

import io
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        for name in ("genuine", "impostor"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise DataError("empty-class", f"no {name} scores")
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite-score", f"{name} scores contain NaN/Inf")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_labels(cls, scores, genuine_mask):
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(genuine_mask, dtype=bool)
        return cls(scores[mask], scores[~mask])

    @property
    def counts(self):
        return {"G": int(self.genuine.size), "I": int(self.impostor.size)}

    @property
    def resolution(self):
        """Smallest nonzero rate step, 1 / min(G, I)."""
        return 1.0 / min(self.genuine.size, self.impostor.size)


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    far: float = None
    frr: float = None
    hter: float = None
    accuracy: float = None
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: json_float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: unjson_float(v) for k, v in d.items()})


def json_float(v):
    # JSON has no infinities; +-inf thresholds travel as strings
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def unjson_float(v):
    if v in ("inf", "-inf"):
        return float(v)
    return v


def _rates(gen_sorted, imp_sorted, thresholds):
    t = np.asarray(thresholds, dtype=np.float64)
    frr = np.searchsorted(gen_sorted, t, side="left") / gen_sorted.size
    far = (imp_sorted.size - np.searchsorted(imp_sorted, t, side="left")) / imp_sorted.size
    return far, frr


def far_frr_at(scores, threshold):
    far = np.count_nonzero(scores.impostor >= threshold) / scores.impostor.size
    frr = np.count_nonzero(scores.genuine < threshold) / scores.genuine.size
    return far, frr


def candidate_thresholds(scores):
    """Observed scores, midpoints between neighbours, and both infinities (sorted)."""
    u = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    mids = u[:-1] + (u[1:] - u[:-1]) / 2.0
    return np.unique(np.concatenate([[-np.inf], u, mids, [np.inf]]))


def eer(scores):
    """Return (eer, threshold).

    The threshold minimises |FAR - FRR| over the candidate set; ties go to the
    smaller (FAR + FRR) / 2, then the smaller threshold.
    """
    t = candidate_thresholds(scores)
    far, frr = _rates(np.sort(scores.genuine), np.sort(scores.impostor), t)
    gap = np.abs(far - frr)
    mean = (far + frr) / 2.0
    best = np.lexsort((t, mean, gap))[0]
    return float(mean[best]), float(t[best])


def accuracy_at(scores, threshold):
    correct = (np.count_nonzero(scores.genuine >= threshold)
               + np.count_nonzero(scores.impostor < threshold))
    return correct / (scores.genuine.size + scores.impostor.size)


def max_accuracy_threshold(scores):
    """Threshold with the highest accuracy (smallest threshold on ties)."""
    t = candidate_thresholds(scores)
    far, frr = _rates(np.sort(scores.genuine), np.sort(scores.impostor), t)
    g, i = scores.genuine.size, scores.impostor.size
    correct = np.rint((1.0 - frr) * g) + np.rint((1.0 - far) * i)
    best = np.flatnonzero(correct == correct.max())[0]
    return float(t[best])


def hter_at(scores, threshold):
    """Report FAR, FRR, HTER and accuracy at a fixed (usually imported) threshold."""
    e, et = eer(scores)
    far, frr = far_frr_at(scores, threshold)
    return EvalReport(eer=e, eer_threshold=et, far=far, frr=frr, hter=(far + frr) / 2.0,
                      accuracy=accuracy_at(scores, threshold), counts=scores.counts)


def evaluate(scores, threshold=None):
    if threshold is not None:
        return hter_at(scores, threshold)
    e, et = eer(scores)
    return EvalReport(eer=e, eer_threshold=et, counts=scores.counts)


def det_curve(scores):
    """(threshold, far, frr) at -inf, every distinct score and +inf, ascending.

    Each distinct accept/reject decision appears once; far is nonincreasing
    and frr nondecreasing along the list.
    """
    u = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    t = np.concatenate([[-np.inf], u, [np.inf]])
    far, frr = _rates(np.sort(scores.genuine), np.sort(scores.impostor), t)
    return [(float(a), float(b), float(c)) for a, b, c in zip(t, far, frr)]


def format_det(curve):
    buf = io.StringIO()
    buf.write("threshold,far,frr\n")
    for t, far, frr in curve:
        buf.write(f"{t!r},{far!r},{frr!r}\n")
    return buf.getvalue()


def percent(rate, places=2):
    """Rate as a percentage string, rounded half-to-even."""
    q = Decimal(1).scaleb(-places)
    return str((Decimal(repr(float(rate))) * 100).quantize(q, rounding=ROUND_HALF_EVEN))
