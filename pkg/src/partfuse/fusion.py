"""Linear logistic regression (LLR) score fusion.

Fusion weights minimise the class-balanced logistic loss

    J(w, b) = 1/(2G) sum_gen log(1 + exp(-(w.s + b)))
            + 1/(2I) sum_imp log(1 + exp(w.s + b))
            + l2/2 |w|^2

so the fused score w.s + b behaves like a log-likelihood ratio at an
effective prior of 0.5. Optimised by damped Newton from zero.
"""

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .embeddings import TrialScores, score_trials
from .errors import DataError
from .metrics import ScoreSet, eer

GRAD_TOL = 1e-8
MAX_ITER = 200
SINGLE_REGION_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class FusionModel:
    region_order: tuple
    weights: np.ndarray
    bias: float
    train_meta: dict = field(default_factory=dict)
    threshold: float = None

    def __post_init__(self):
        order = tuple(self.region_order)
        w = np.array(self.weights, dtype=np.float64).ravel()
        if len(set(order)) != len(order):
            raise DataError("duplicate-region", f"region_order {order}")
        if w.shape[0] != len(order):
            raise DataError("malformed-model", f"{w.shape[0]} weights for {len(order)} regions")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise DataError("malformed-model", "non-finite weights or bias")
        w.setflags(write=False)
        object.__setattr__(self, "region_order", order)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    def with_threshold(self, threshold):
        return FusionModel(self.region_order, self.weights, self.bias, dict(self.train_meta), threshold)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _design(scores):
    return np.hstack([scores, np.ones((scores.shape[0], 1))])


def _class_weights(y):
    g = np.count_nonzero(y)
    i = y.size - g
    return np.where(y, 0.5 / g, 0.5 / i)


def llr_loss(theta, X, y, l2=0.0):
    """Balanced logistic loss at theta = (w..., b); X already carries the ones column."""
    z = X @ theta
    c = _class_weights(y)
    per = np.where(y, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    w = theta[:-1]
    return float(np.sum(c * per) + 0.5 * l2 * np.dot(w, w))


def llr_gradient(theta, X, y, l2=0.0):
    c = _class_weights(y)
    r = c * (_sigmoid(X @ theta) - y)
    g = X.T @ r
    g[:-1] += l2 * theta[:-1]
    return g


def llr_hessian(theta, X, y, l2=0.0):
    c = _class_weights(y)
    p = _sigmoid(X @ theta)
    h = (X * (c * p * (1.0 - p))[:, None]).T @ X
    h[np.arange(h.shape[0] - 1), np.arange(h.shape[0] - 1)] += l2
    return h


def _direction(g, h):
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        return -g
    d = -np.linalg.solve(chol.T, np.linalg.solve(chol, g))
    if not np.all(np.isfinite(d)) or np.dot(g, d) >= 0:
        return -g
    return d


def _newton(X, y, l2, theta0, max_iter, tol):
    theta = theta0.copy()
    loss = llr_loss(theta, X, y, l2)
    iters = 0
    converged = False
    while True:
        g = llr_gradient(theta, X, y, l2)
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        if iters >= max_iter:
            break
        d = _direction(g, llr_hessian(theta, X, y, l2))
        slope = float(np.dot(g, d))
        step = 1.0
        for _ in range(60):
            cand = theta + step * d
            cand_loss = llr_loss(cand, X, y, l2)
            if cand_loss <= loss + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # no decrease representable in floating point; we are at the optimum to machine precision
            break
        theta, loss = cand, cand_loss
        iters += 1
    return theta, loss, iters, converged


def _as_table(scores):
    if isinstance(scores, TrialScores):
        return scores
    return TrialScores.from_vectors(scores)


def train_llr(scores, l2=0.0, dataset_id="", max_iter=MAX_ITER, tol=GRAD_TOL,
              check_single_region=True):
    """Fit fusion weights on labelled per-region scores.

    Constant score columns get weight 0 (with a warning). The fused loss is
    checked against the best single-region model; if it is worse, Newton is
    restarted from that model, which lies inside the fused hypothesis class.
    """
    table = _as_table(scores)
    y = table.genuine_mask
    if y.all() or not y.any():
        raise DataError("single-class-input", "training needs genuine and impostor trials")
    S = table.scores
    if not np.all(np.isfinite(S)):
        raise DataError("non-finite-score", "NaN/Inf in training scores")
    k = S.shape[1]
    active = [j for j in range(k) if np.ptp(S[:, j]) > 0]
    for j in range(k):
        if j not in active:
            warnings.warn(f"score column {table.regions[j]!r} is constant; its weight is fixed to 0",
                          RuntimeWarning, stacklevel=2)
    X = _design(S[:, active])
    theta, loss, iters, converged = _newton(X, y, l2, np.zeros(X.shape[1]), max_iter, tol)

    if check_single_region and len(active) > 1:
        best = None
        for pos, j in enumerate(active):
            sub = table.select([table.regions[j]])
            single = train_llr(sub, l2=l2, max_iter=max_iter, tol=tol, check_single_region=False)
            sloss = single.train_meta["final_loss"]
            if best is None or sloss < best[0]:
                best = (sloss, pos, single)
        if loss > best[0] + SINGLE_REGION_SLACK:
            start = np.zeros(X.shape[1])
            start[best[1]] = best[2].weights[0]
            start[-1] = best[2].bias
            theta, loss, more, converged = _newton(X, y, l2, start, max_iter, tol)
            iters += more

    weights = np.zeros(k)
    weights[active] = theta[:-1]
    meta = {"iterations": int(iters), "final_loss": float(loss),
            "converged": bool(converged), "dataset_id": str(dataset_id)}
    return FusionModel(table.regions, weights, float(theta[-1]), meta)


def apply_fusion(model, scores):
    """Fused score w.s + b for one TrialScoreVector, or an array for a TrialScores table."""
    regions = tuple(scores.regions)
    if regions != model.region_order:
        raise DataError("region-order-mismatch", f"scores have {regions}, model expects {model.region_order}")
    if isinstance(scores, TrialScores):
        return scores.scores @ model.weights + model.bias
    return float(np.dot(model.weights, np.asarray(scores.scores, dtype=np.float64)) + model.bias)


def training_loss(model, scores):
    table = _as_table(scores).select(model.region_order)
    theta = np.append(model.weights, model.bias)
    return llr_loss(theta, _design(table.scores), table.genuine_mask)


def _fmt(x):
    return format(float(x), ".17g")


def format_model(model):
    lines = ["[region_order]", *model.region_order,
             "[weights]", *(_fmt(w) for w in model.weights),
             "[bias]", _fmt(model.bias),
             "[train_meta]"]
    meta = model.train_meta
    for key in ("iterations", "final_loss", "converged", "dataset_id"):
        if key in meta:
            val = meta[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = _fmt(val)
            lines.append(f"{key} = {val}")
    if model.threshold is not None:
        lines += ["[threshold]", _fmt(model.threshold)]
    return "\n".join(lines) + "\n"


def parse_model(text):
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise DataError("malformed-model", f"line {lineno}: content before first section")
        else:
            sections[current].append(line)
    for name in ("region_order", "weights", "bias"):
        if name not in sections:
            raise DataError("malformed-model", f"missing [{name}] section")
    try:
        weights = [float(v) for v in sections["weights"]]
        bias = float(sections["bias"][0])
        threshold = float(sections["threshold"][0]) if sections.get("threshold") else None
    except (ValueError, IndexError):
        raise DataError("malformed-model", "non-numeric weight, bias or threshold") from None
    meta = {}
    for line in sections.get("train_meta", []):
        key, _, val = (p.strip() for p in line.partition("="))
        if key == "iterations":
            meta[key] = int(val)
        elif key == "final_loss":
            meta[key] = float(val)
        elif key == "converged":
            meta[key] = val == "true"
        else:
            meta[key] = val
    return FusionModel(tuple(sections["region_order"]), weights, bias, meta, threshold)


def fused_eer(table, l2=0.0):
    model = train_llr(table, l2=l2)
    fused = apply_fusion(model, table)
    return eer(ScoreSet.from_labels(fused, table.genuine_mask))[0], model


def best_combination(store, trials, regions, candidates, l2=0.0, limit=100_000):
    """Exhaustive search over per-region provider choices by training EER.

    ``candidates`` maps each region to the provider ids allowed for it.
    Returns (provider_map, eer, model). Ties keep the first combination in
    lexicographic region/provider order.
    """
    regions = tuple(regions)
    options = [sorted(candidates[r]) for r in regions]
    total = int(np.prod([len(o) for o in options]))
    if total > limit:
        raise DataError("search-too-large", f"{total} provider combinations exceed limit {limit}")
    columns = {}
    labels = None
    for region, opts in zip(regions, options):
        for provider in opts:
            t = score_trials(store, trials, [region], {region: provider})
            columns[(region, provider)] = t.scores[:, 0]
            labels = t
    best = None
    for combo in itertools.product(*options):
        S = np.column_stack([columns[(r, p)] for r, p in zip(regions, combo)])
        table = TrialScores(labels.image_a, labels.image_b, labels.labels, regions, S)
        e, model = fused_eer(table, l2)
        if best is None or e < best[1]:
            best = (dict(zip(regions, combo)), e, model)
    return best
