"""Dataset manifests, trial construction and the four evaluation protocols.

* single-dataset EER (holistic vs fused),
* cross-dataset HTER with threshold and fusion weights fixed on a source set,
* the YMU before/after matrix (B vs B, A vs A, A vs B),
* k-fold mean accuracy on balanced test folds.

Fusion is trained per fold on training subjects only unless
``train_mode="whole-dataset"``, which fits and evaluates on the same trials.
"""

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .embeddings import GENUINE, IMPOSTOR, TrialPair, score_trials
from .errors import DataError
from .fusion import FusionModel, apply_fusion, best_combination, train_llr
from .landmarks import HOLISTIC
from .metrics import (EvalReport, ScoreSet, accuracy_at, eer, hter_at, json_float,
                      max_accuracy_threshold)

PAIR_DATASETS = ("emfd", "fam", "m501")
# any other dataset_id is treated as "custom": no per-subject structure is enforced
DATASET_IDS = PAIR_DATASETS + ("ymu", "custom")
STATES = ("before", "after")
MODES = ("before_vs_after", "before_vs_before", "after_vs_after")
MANIFEST_HEADER = ["dataset_id", "subject_id", "image_id", "makeup_state", "landmark_file", "image_file"]

PER_FOLD = "per-fold"
WHOLE_DATASET = "whole-dataset"


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    image_id: str
    makeup_state: str
    landmark_file: str = ""
    image_file: str = ""


@dataclass
class DatasetManifest:
    dataset_id: str
    entries: list

    def __post_init__(self):
        if not self.dataset_id:
            raise DataError("bad-manifest", "empty dataset_id")
        seen = set()
        for e in self.entries:
            if e.makeup_state not in STATES:
                raise DataError("bad-manifest", f"image {e.image_id}: makeup_state {e.makeup_state!r}")
            if e.image_id in seen:
                raise DataError("bad-manifest", f"image {e.image_id} listed twice")
            seen.add(e.image_id)
        expected = {"ymu": 2}.get(self.dataset_id, 1 if self.dataset_id in PAIR_DATASETS else None)
        if expected is not None:
            for subject, imgs in self.by_subject().items():
                for state in STATES:
                    n = len(imgs[state])
                    if n != expected:
                        raise DataError("bad-manifest",
                                        f"{self.dataset_id} subject {subject} has {n} {state} images, "
                                        f"expected {expected}")

    def by_subject(self):
        """subject -> {"before": [image ids], "after": [image ids]}, both sorted."""
        out = {}
        for e in self.entries:
            out.setdefault(e.subject_id, {s: [] for s in STATES})[e.makeup_state].append(e.image_id)
        for imgs in out.values():
            for lst in imgs.values():
                lst.sort()
        return dict(sorted(out.items()))

    @property
    def subjects(self):
        return sorted({e.subject_id for e in self.entries})

    def restricted(self, subjects):
        keep = set(subjects)
        return DatasetManifest(self.dataset_id, [e for e in self.entries if e.subject_id in keep])


def read_manifests(data):
    """Parse a manifest CSV into {dataset_id: DatasetManifest}."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
        raise DataError("malformed-file", "manifest header must be " + ",".join(MANIFEST_HEADER))
    groups = {}
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise DataError("malformed-file", f"manifest line {lineno}: expected 6 columns")
        ds, *rest = (c.strip() for c in row)
        groups.setdefault(ds, []).append(ManifestEntry(*rest))
    return {ds: DatasetManifest(ds, entries) for ds, entries in groups.items()}


def format_manifest(manifests):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for m in manifests:
        for e in m.entries:
            w.writerow([m.dataset_id, e.subject_id, e.image_id, e.makeup_state,
                        e.landmark_file, e.image_file])
    return buf.getvalue()


def _mode_images(imgs, mode):
    if mode == "before_vs_after":
        return imgs["before"], imgs["after"]
    state = "before" if mode == "before_vs_before" else "after"
    return imgs[state], imgs[state]


def build_trials(manifest, mode="before_vs_after", n_impostors=None, seed=0):
    """Genuine and impostor trials for one matching mode.

    Genuine trials are every same-subject pair for the mode; impostor trials
    are every cross-subject pair (each unordered image pair once), or a
    seeded sample of ``n_impostors`` of them drawn without replacement.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    groups = manifest.by_subject()
    if mode != "before_vs_after":
        state = mode.split("_")[0]
        short = [s for s, imgs in groups.items() if len(imgs[state]) < 2]
        if short:
            raise DataError("mode-unsupported-by-dataset",
                            f"{mode} needs >= 2 {state} images per subject; "
                            f"{manifest.dataset_id} subject {short[0]} has fewer")
    genuine = []
    for imgs in groups.values():
        left, right = _mode_images(imgs, mode)
        if mode == "before_vs_after":
            genuine += [TrialPair(a, b, GENUINE) for a in left for b in right]
        else:
            genuine += [TrialPair(a, b, GENUINE) for a, b in itertools.combinations(left, 2)]

    subjects = list(groups)
    impostor = []
    if mode == "before_vs_after":
        for s in subjects:
            for t in subjects:
                if s != t:
                    impostor += [TrialPair(a, b, IMPOSTOR)
                                 for a in groups[s]["before"] for b in groups[t]["after"]]
    else:
        for s, t in itertools.combinations(subjects, 2):
            left, _ = _mode_images(groups[s], mode)
            right, _ = _mode_images(groups[t], mode)
            impostor += [TrialPair(a, b, IMPOSTOR) for a in left for b in right]

    if n_impostors is not None:
        impostor = sample_without_replacement(impostor, n_impostors, seed)
    return genuine + impostor


def sample_without_replacement(items, n, seed):
    if n > len(items):
        raise DataError("fold-too-small", f"need {n} impostor trials, only {len(items)} available")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


@dataclass
class FoldPlan:
    n_folds: int
    seed: int
    folds: list = field(default_factory=list)

    def check(self, subjects=None):
        tests = [set(f["test"]) for f in self.folds]
        for f in self.folds:
            if set(f["train"]) & set(f["test"]):
                raise RuntimeError("fold plan leaks subjects between train and test")
        union = set().union(*tests) if tests else set()
        if sum(len(t) for t in tests) != len(union):
            raise RuntimeError("fold plan test sets overlap")
        if subjects is not None and union != set(subjects):
            raise RuntimeError("fold plan does not cover every subject exactly once")

    def to_dict(self):
        return {"n_folds": self.n_folds, "seed": self.seed,
                "folds": [{"train": list(f["train"]), "test": list(f["test"])} for f in self.folds]}


def make_fold_plan(units, n_folds=5, seed=42):
    """Seeded split of ``units`` (subject ids, normally) into disjoint test folds."""
    units = sorted(units)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if len(units) < n_folds:
        raise DataError("fold-too-small", f"{len(units)} subjects cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(units))
    chunks = np.array_split(order, n_folds)
    folds = []
    for chunk in chunks:
        test = sorted(units[i] for i in chunk)
        held = set(test)
        folds.append({"train": [u for u in units if u not in held], "test": test})
    plan = FoldPlan(n_folds, seed, folds)
    plan.check(units)
    return plan


def _is_search(provider_map):
    return isinstance(provider_map, dict) and any(
        isinstance(v, (list, tuple)) and len(v) > 1 for v in provider_map.values())


def _fixed_map(provider_map, regions):
    if isinstance(provider_map, str):
        return {r: provider_map for r in regions}
    out = {}
    for r in regions:
        if r not in provider_map:
            raise DataError("missing-provider", f"no provider mapped for region {r}")
        v = provider_map[r]
        out[r] = v[0] if isinstance(v, (list, tuple)) else v
    return out


def _holistic_region(regions):
    return HOLISTIC if HOLISTIC in regions else regions[0]


def projection_model(regions, region):
    w = np.zeros(len(regions))
    w[list(regions).index(region)] = 1.0
    return FusionModel(tuple(regions), w, 0.0, {"iterations": 0, "final_loss": float("nan"),
                                                "converged": True, "dataset_id": ""})


@dataclass
class Fit:
    provider_map: dict
    model: FusionModel
    train_scores: ScoreSet


def fit(manifest, store, regions, provider_map, trials, fusion=True, l2=0.0):
    """Choose providers (when a search is requested), train fusion, score the training trials.

    With ``fusion=False`` the model is the identity on the holistic score.
    """
    regions = tuple(regions)
    if not fusion:
        regions = (_holistic_region(regions),)
    if _is_search(provider_map):
        candidates = {r: list(provider_map[r]) if isinstance(provider_map[r], (list, tuple))
                      else [provider_map[r]] for r in regions}
        if fusion:
            pmap, _, model = best_combination(store, trials, regions, candidates, l2)
        else:
            pmap = None
            for p in sorted(candidates[regions[0]]):
                t = score_trials(store, trials, regions, p)
                e = eer(ScoreSet.from_labels(t.scores[:, 0], t.genuine_mask))[0]
                if pmap is None or e < pmap[1]:
                    pmap = ({regions[0]: p}, e)
            pmap = pmap[0]
            model = projection_model(regions, regions[0])
    else:
        pmap = _fixed_map(provider_map, regions)
        model = None
    table = score_trials(store, trials, regions, pmap)
    if model is None:
        model = train_llr(table, l2=l2, dataset_id=manifest.dataset_id) if fusion \
            else projection_model(regions, regions[0])
    fused = apply_fusion(model, table)
    return Fit(pmap, model, ScoreSet.from_labels(fused, table.genuine_mask))


def _apply(fit_, store, trials):
    table = score_trials(store, trials, fit_.model.region_order, fit_.provider_map)
    return apply_fusion(fit_.model, table), table.genuine_mask


def _fold_plan(manifest, plan, seed, n_folds):
    if plan is None:
        plan = make_fold_plan(manifest.subjects, n_folds, seed)
    plan.check()
    return plan


def _eer_scores(manifest, store, regions, provider_map, fusion, l2, train_mode, plan,
                seed, n_folds, train_mode_trials="before_vs_after", eval_modes=("before_vs_after",)):
    """Evaluation scores per mode, pooled over folds. Returns ({mode: ScoreSet}, [fits])."""
    if train_mode == WHOLE_DATASET:
        f = fit(manifest, store, regions, provider_map,
                build_trials(manifest, train_mode_trials), fusion, l2)
        out = {}
        for mode in eval_modes:
            s, g = _apply(f, store, build_trials(manifest, mode))
            out[mode] = ScoreSet.from_labels(s, g)
        return out, [f]
    if train_mode != PER_FOLD:
        raise ValueError(f"unknown train mode {train_mode!r}")
    plan = _fold_plan(manifest, plan, seed, n_folds)
    pooled = {m: ([], []) for m in eval_modes}
    fits = []
    for fold in plan.folds:
        train = manifest.restricted(fold["train"])
        test = manifest.restricted(fold["test"])
        f = fit(train, store, regions, provider_map, build_trials(train, train_mode_trials), fusion, l2)
        fits.append(f)
        for mode in eval_modes:
            s, g = _apply(f, store, build_trials(test, mode))
            pooled[mode][0].append(s)
            pooled[mode][1].append(g)
    out = {}
    for mode, (s, g) in pooled.items():
        out[mode] = ScoreSet.from_labels(np.concatenate(s), np.concatenate(g))
    return out, fits


def _report(scores):
    e, t = eer(scores)
    return EvalReport(eer=e, eer_threshold=t, counts=scores.counts)


def run_single_dataset_eer(manifest, store, regions, provider_map, fusion=True, l2=0.0,
                           train_mode=PER_FOLD, plan=None, seed=42, n_folds=5,
                           mode="before_vs_after"):
    """EER of the holistic baseline (``fusion=False``) or of LLR-fused regions."""
    scores, _ = _eer_scores(manifest, store, regions, provider_map, fusion, l2, train_mode,
                            plan, seed, n_folds, eval_modes=(mode,))
    return _report(scores[mode])


def eer_protocol(manifest, store, regions, provider_map, l2=0.0, train_mode=PER_FOLD,
                 plan=None, seed=42, n_folds=5):
    """Holistic and fused EER on the same trial set, plus per-fold fit details."""
    out = {"dataset_id": manifest.dataset_id, "train_mode": train_mode,
           "regions": list(regions)}
    hol, _ = _eer_scores(manifest, store, regions, provider_map, False, l2, train_mode,
                         plan, seed, n_folds)
    fused, fits = _eer_scores(manifest, store, regions, provider_map, True, l2, train_mode,
                              plan, seed, n_folds)
    out["holistic"] = _report(hol["before_vs_after"]).to_dict()
    out["fused"] = _report(fused["before_vs_after"]).to_dict()
    out["fits"] = [_fit_summary(f) for f in fits]
    return out


def _fit_summary(f):
    return {"provider_map": dict(f.provider_map),
            "region_order": list(f.model.region_order),
            "weights": [float(w) for w in f.model.weights],
            "bias": float(f.model.bias),
            "converged": bool(f.model.train_meta.get("converged", True)),
            "iterations": int(f.model.train_meta.get("iterations", 0))}


def row_summary(values):
    """Mean, sample standard deviation (n - 1) and max of a cross-dataset row."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "sd": sd, "max": float(np.max(v))}


def run_cross_dataset(manifests, store, regions, provider_map, sources=None, fusion=True, l2=0.0):
    """HTER on every target with fusion weights and EER threshold fixed on each source.

    ``manifests`` maps dataset_id -> DatasetManifest. Returns
    ``{"rows": {source: {"hter": {target: EvalReport}, "summary": ...}}}``.
    """
    ids = list(manifests)
    sources = ids if sources is None else list(sources)
    for s in sources:
        if s not in manifests:
            raise DataError("missing-dataset", f"source {s!r} not in manifest")
    rows = {}
    fits = {}
    for src in sources:
        m = manifests[src]
        f = fit(m, store, regions, provider_map, build_trials(m), fusion, l2)
        _, threshold = eer(f.train_scores)
        fits[src] = f
        reports = {}
        for tgt in ids:
            s, g = _apply(f, store, build_trials(manifests[tgt]))
            reports[tgt] = hter_at(ScoreSet.from_labels(s, g), threshold)
        rows[src] = {"threshold": threshold,
                     "hter": reports,
                     "summary": row_summary([r.hter for r in reports.values()])}
    return {"targets": ids, "rows": rows, "fits": fits}


def _balanced_trials(manifest, seed, mode="before_vs_after"):
    trials = build_trials(manifest, mode)
    gen = [t for t in trials if t.is_genuine]
    imp = [t for t in trials if not t.is_genuine]
    if not gen:
        raise DataError("fold-too-small", f"no genuine trials among {len(manifest.subjects)} subjects")
    return gen + sample_without_replacement(imp, len(gen), seed)


def run_kfold_accuracy(manifest, store, regions, provider_map, plan=None, fusion=True, l2=0.0,
                       seed=42, n_folds=5):
    """Mean accuracy over subject-disjoint folds with balanced test sets.

    Training trials use the same balanced construction; the decision
    threshold is the max-accuracy threshold on the fused training scores.
    """
    plan = _fold_plan(manifest, plan, seed, n_folds)
    accs = []
    folds = []
    for k, fold in enumerate(plan.folds):
        if set(fold["train"]) & set(fold["test"]):
            raise RuntimeError(f"fold {k} shares subjects between train and test")
        train = manifest.restricted(fold["train"])
        test = manifest.restricted(fold["test"])
        f = fit(train, store, regions, provider_map,
                _balanced_trials(train, [plan.seed, k, 0]), fusion, l2)
        threshold = max_accuracy_threshold(f.train_scores)
        test_trials = _balanced_trials(test, [plan.seed, k, 1])
        s, g = _apply(f, store, test_trials)
        n_gen = int(np.count_nonzero(g))
        if n_gen != g.size - n_gen:
            raise RuntimeError(f"fold {k} test set is unbalanced")
        acc = accuracy_at(ScoreSet.from_labels(s, g), threshold)
        accs.append(acc)
        folds.append({"fold": k, "accuracy": acc, "threshold": json_float(threshold),
                      "n_genuine": n_gen, "n_impostor": g.size - n_gen,
                      "fit": _fit_summary(f)})
    return {"mean_accuracy": float(np.mean(accs)), "fold_accuracies": accs, "folds": folds}


def run_ymu_matrix(manifest, store, regions, provider_map, l2=0.0, train_mode=PER_FOLD,
                   plan=None, seed=42, n_folds=5):
    """EER for B vs B, A vs A and A vs B, holistic and fused.

    One fusion model per fold (or per dataset), trained on A vs B trials.
    """
    out = {}
    for label, fusion in (("holistic", False), ("fused", True)):
        scores, fits = _eer_scores(manifest, store, regions, provider_map, fusion, l2, train_mode,
                                   plan, seed, n_folds, eval_modes=MODES)
        out[label] = {mode: _report(scores[mode]).to_dict() for mode in MODES}
    out["fits"] = [_fit_summary(f) for f in fits]
    return out


def cross_protocol(manifests, store, regions, provider_map, sources=None, l2=0.0):
    out = {"targets": list(manifests)}
    for label, fusion in (("holistic", False), ("fused", True)):
        res = run_cross_dataset(manifests, store, regions, provider_map, sources, fusion, l2)
        out[label] = {
            "rows": {src: {"threshold": json_float(row["threshold"]),
                           "hter": {t: r.to_dict() for t, r in row["hter"].items()},
                           "summary": row["summary"]}
                     for src, row in res["rows"].items()},
            "fits": {src: _fit_summary(f) for src, f in res["fits"].items()},
        }
    return out


def kfold_protocol(manifest, store, regions, provider_map, plan=None, l2=0.0, seed=42, n_folds=5):
    plan = _fold_plan(manifest, plan, seed, n_folds)
    out = {"dataset_id": manifest.dataset_id, "plan": plan.to_dict()}
    for label, fusion in (("holistic", False), ("fused", True)):
        out[label] = run_kfold_accuracy(manifest, store, regions, provider_map, plan, fusion, l2)
    return out


def ymu_protocol(manifest, store, regions, provider_map, l2=0.0, train_mode=PER_FOLD,
                 plan=None, seed=42, n_folds=5):
    out = {"dataset_id": manifest.dataset_id, "train_mode": train_mode}
    out.update(run_ymu_matrix(manifest, store, regions, provider_map, l2, train_mode,
                              plan, seed, n_folds))
    return out


def fit_summaries(result):
    """Every fit summary inside a protocol result, for convergence checks."""
    found = []

    def walk(node):
        if isinstance(node, dict):
            if "converged" in node and "weights" in node:
                found.append(node)
            for v in node.values():
                walk(v)
        elif isinstance(node, list):
            for v in node:
                walk(v)

    walk(result)
    return found
