"""``partfuse`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import embeddings as emb
from . import fusion, landmarks, metrics, protocols, reports, synth
from .config import format_flat, parse_config
from .errors import DataError, NumericalError

log = logging.getLogger("partfuse")

STRATEGIES = ("holistic", "parts4", "thirds3", "parts4+holistic", "thirds3+holistic")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read(path):
    if not Path(path).exists():
        # a wrong path is a command-line mistake, not bad data
        raise UsageError(f"no such file: {path}")
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError("unreadable-file", f"{path}: {exc.strerror or exc}") from None


def _write(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump_json(obj):
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _regions(text):
    regs = tuple(r.strip() for r in text.split(",") if r.strip())
    bad = [r for r in regs if r not in landmarks.REGION_TAGS]
    if bad or not regs:
        raise UsageError(f"unknown region(s) {bad}; choose from {', '.join(landmarks.REGION_TAGS)}")
    return regs


def load_provider_map(text, source="<provider map>"):
    """TOML ``region = "provider"`` lines.

    A list value, or a comma-separated string, names candidate providers to
    search over.
    """
    out = {}
    for key, val in parse_config(text, source).items():
        if isinstance(val, dict):
            raise DataError("malformed-file", f"{source}: tables are not allowed in a provider map")
        items = val if isinstance(val, list) else str(val).split(",")
        parts = [str(p).strip() for p in items if str(p).strip()]
        if not parts:
            raise DataError("malformed-file", f"{source}: empty provider for region {key!r}")
        out[key] = parts[0] if len(parts) == 1 else parts
    return out


def _provider_map(args):
    if getattr(args, "provider", None):
        return args.provider
    if not getattr(args, "provider_map", None):
        raise UsageError("one of --provider-map or --provider is required")
    return load_provider_map(_read(args.provider_map).decode("utf-8"), args.provider_map)


# ---------------------------------------------------------------- crop

def _find_image(images_dir, image_id):
    for suffix in IMAGE_SUFFIXES:
        p = Path(images_dir) / f"{image_id}{suffix}"
        if p.exists():
            return p
    raise DataError("missing-image", f"no image for {image_id} in {images_dir}")


def cmd_crop(args):
    lm_files = sorted(Path(args.landmarks).glob("*.csv"))
    if not lm_files:
        raise DataError("missing-landmarks", f"no landmark CSVs in {args.landmarks}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = io.StringIO()
    w = csv.writer(index, lineterminator="\n")
    w.writerow(["subject_id", "image_id", "region", "path", "x0", "y0", "x1", "y1",
                "pad_left", "pad_top", "pad_right", "pad_bottom"])
    for lm_path in lm_files:
        try:
            lm = landmarks.parse_landmarks(lm_path.read_bytes())
        except DataError as exc:
            raise DataError(exc.kind, f"{lm_path}: {exc}") from None
        img_path = _find_image(args.images, lm.image_id)
        image = np.asarray(Image.open(img_path).convert("RGB"))
        if image.shape[1] != lm.image_width or image.shape[0] != lm.image_height:
            raise DataError("dims-mismatch",
                            f"{img_path} is {image.shape[1]}x{image.shape[0]}, landmarks say "
                            f"{lm.image_width}x{lm.image_height}")
        if not args.no_align:
            tf, lm = landmarks.align(lm)
            image = landmarks.warp_image(image, tf)
        for crop in landmarks.crop_regions(lm, args.strategy, args.margin, args.resize):
            pixels = landmarks.extract_pixels(image, crop, args.pad_mode)
            name = f"{lm.image_id}__{crop.tag}.png"
            Image.fromarray(pixels).save(out / name)
            w.writerow([lm.subject_id, lm.image_id, crop.tag, name]
                       + [repr(float(v)) for v in crop.box] + [repr(float(v)) for v in crop.pad])
    _write(out / "crops.csv", index.getvalue())
    log.info("cropped %d images into %s", len(lm_files), out)


# ---------------------------------------------------------------- import / score

def _read_crop_index(path):
    base = Path(path).parent
    rows = list(csv.DictReader(io.StringIO(_read(path).decode("utf-8"))))
    try:
        return [(r["subject_id"], r["image_id"], r["region"], base / r["path"]) for r in rows]
    except KeyError as exc:
        raise DataError("malformed-file", f"{path}: missing column {exc.args[0]}") from None


def cmd_import(args):
    spec = emb.ProviderSpec(args.provider, args.dim, args.channel_mode, args.input_side)
    store = emb.import_embeddings(_read(args.store)) if args.store else None
    if args.embeddings:
        store = emb.import_embeddings(_read(args.embeddings), spec, store)
    else:
        if not args.provider_cmd:
            raise UsageError("--crops needs --provider-cmd")
        store = emb.embed_crops(_read_crop_index(args.crops), args.provider_cmd, spec, store)
    _write(args.out, emb.format_embeddings(store))
    log.info("store %s holds %d records", args.out, len(store))


def cmd_score(args):
    store = emb.import_embeddings(_read(args.store))
    trials = emb.read_trials(_read(args.trials))
    table = emb.score_trials(store, trials, _regions(args.regions), _provider_map(args))
    _write(args.out, emb.format_scores(table))


# ---------------------------------------------------------------- fusion

def _check_converged(converged, allow, what):
    if not converged and not allow:
        raise NumericalError(f"{what} did not converge; rerun with --allow-nonconverged to accept it")


def cmd_fuse_train(args):
    table = emb.read_scores(_read(args.scores))
    model = fusion.train_llr(table, l2=args.l2, dataset_id=args.dataset_id)
    _check_converged(model.train_meta["converged"], args.allow_nonconverged, "fusion training")
    fused = fusion.apply_fusion(model, table)
    _, threshold = metrics.eer(metrics.ScoreSet.from_labels(fused, table.genuine_mask))
    _write(args.out, fusion.format_model(model.with_threshold(threshold)))


def cmd_fuse_apply(args):
    model = fusion.parse_model(_read(args.model).decode("utf-8"))
    table = emb.read_scores(_read(args.scores))
    missing = [r for r in model.region_order if r not in table.regions]
    if missing:
        raise DataError("region-order-mismatch", f"{args.scores} lacks model regions {missing}")
    table = table.select(model.region_order)
    fused = fusion.apply_fusion(model, table)
    out = emb.TrialScores(table.image_a, table.image_b, table.labels, ["score"], fused)
    _write(args.out, emb.format_scores(out))


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    table = emb.read_scores(_read(args.fused))
    column = args.column or ("score" if "score" in table.regions else None)
    if column is None:
        if len(table.regions) != 1:
            raise UsageError(f"--column needed: file has columns {list(table.regions)}")
        column = table.regions[0]
    if column not in table.regions:
        raise DataError("missing-column", f"{args.fused} has no column {column!r}")
    scores = metrics.ScoreSet.from_labels(table.column(column), table.genuine_mask)
    report = metrics.evaluate(scores, args.threshold)
    _write(args.report, _dump_json(report.to_dict()))
    if args.det:
        _write(args.det, metrics.format_det(metrics.det_curve(scores)))
    print(f"EER {metrics.percent(report.eer)}% at threshold {report.eer_threshold!r}"
          + (f"; HTER {metrics.percent(report.hter)}% at {args.threshold!r}"
             if args.threshold is not None else ""))


# ---------------------------------------------------------------- protocol

def _pick_dataset(manifests, wanted, flag):
    if wanted:
        if wanted not in manifests:
            raise DataError("missing-dataset", f"{flag} {wanted!r} not in manifest ({', '.join(manifests)})")
        return manifests[wanted]
    if len(manifests) != 1:
        raise UsageError(f"manifest has datasets {', '.join(manifests)}; choose one with {flag}")
    return next(iter(manifests.values()))


def cmd_protocol(args):
    manifests = protocols.read_manifests(_read(args.manifest))
    store = emb.import_embeddings(_read(args.store))
    regions = _regions(args.regions)
    pmap = _provider_map(args)
    train_mode = protocols.WHOLE_DATASET if args.paper_mode == "whole-dataset" else protocols.PER_FOLD
    kind = args.kind
    if kind == "eer":
        m = _pick_dataset(manifests, args.dataset or args.source, "--dataset")
        result = protocols.eer_protocol(m, store, regions, pmap, args.l2, train_mode,
                                        seed=args.seed, n_folds=args.folds)
    elif kind == "cross":
        sources = [args.source] if args.source else None
        result = protocols.cross_protocol(manifests, store, regions, pmap, sources, args.l2)
    elif kind == "kfold":
        m = _pick_dataset(manifests, args.dataset or args.source, "--dataset")
        result = protocols.kfold_protocol(m, store, regions, pmap, l2=args.l2,
                                          seed=args.seed, n_folds=args.folds)
    else:
        m = _pick_dataset(manifests, args.dataset or args.source, "--dataset")
        result = protocols.ymu_protocol(m, store, regions, pmap, args.l2, train_mode,
                                        seed=args.seed, n_folds=args.folds)
    for f in protocols.fit_summaries(result):
        _check_converged(f["converged"], args.allow_nonconverged, "fusion training")
    report = {"protocol": kind, "seed": args.seed, "folds": args.folds,
              "regions": list(regions), "train_mode": train_mode, "result": result}
    _write(args.report, _dump_json(report))
    if args.format == "table":
        sys.stdout.write(reports.render(report))


# ---------------------------------------------------------------- synth

def cmd_synth(args):
    if args.spec:
        spec = synth.parse_scenario(_read(args.spec).decode("utf-8"), args.spec)
        if args.seed is not None:
            spec = synth.ScenarioSpec(**{**spec.__dict__, "seed": args.seed})
    else:
        maker = synth.scenario_s1 if args.scenario == "s1" else synth.scenario_s2
        spec = maker(42 if args.seed is None else args.seed)
    manifest, store = synth.generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.csv", protocols.format_manifest([manifest]))
    _write(out / "embeddings.csv", emb.format_embeddings(store))
    _write(out / "provider_map.toml", format_flat({r: spec.provider_id for r in spec.regions}))
    _write(out / "trials.csv", emb.format_trials(protocols.build_trials(manifest)))


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="partfuse", description="Part-based face verification with LLR score fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("crop", help="align faces and cut region crops from landmark files")
    c.add_argument("--strategy", required=True, choices=STRATEGIES)
    c.add_argument("--landmarks", required=True, help="directory of landmark CSV files")
    c.add_argument("--images", required=True, help="directory holding <image_id>.<ext> images")
    c.add_argument("--out", required=True, help="output directory for crops and crops.csv")
    c.add_argument("--margin", type=float, default=landmarks.DEFAULT_MARGIN,
                   help="part/holistic box scale around the landmark square (default 1.3)")
    c.add_argument("--resize", type=int, default=landmarks.DEFAULT_RESIZE,
                   help="square output side in pixels (default 224)")
    c.add_argument("--pad-mode", choices=("edge", "constant"), default="edge",
                   help="fill for out-of-image area (default edge replication)")
    c.add_argument("--no-align", action="store_true", help="skip eye-based similarity alignment")
    c.set_defaults(func=cmd_crop)

    c = sub.add_parser("import", help="ingest embeddings from a CSV or an external provider")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--embeddings", help="embedding CSV to import")
    src.add_argument("--crops", help="crops.csv from `partfuse crop`, embedded via --provider-cmd")
    c.add_argument("--provider-cmd", help="provider command, run as <cmd> --in <crop.png> --region <tag>")
    c.add_argument("--provider", required=True, help="provider id")
    c.add_argument("--dim", required=True, type=int, help="embedding dimension")
    c.add_argument("--channel-mode", choices=("rgb", "grayscale"), default="rgb")
    c.add_argument("--input-side", type=int, default=224, help="provider input side in pixels")
    c.add_argument("--store", help="existing store to extend")
    c.add_argument("--out", required=True, help="output store (embedding CSV)")
    c.set_defaults(func=cmd_import)

    c = sub.add_parser("score", help="cosine-score trials per region")
    c.add_argument("--store", required=True, help="embedding store CSV")
    c.add_argument("--trials", required=True, help="trial list CSV (image_a,image_b,label)")
    c.add_argument("--regions", required=True, help="comma-separated region tags, e.g. holistic,nose")
    c.add_argument("--provider-map", help="TOML file mapping region to provider id")
    c.add_argument("--provider", help="use one provider id for every region")
    c.add_argument("--out", required=True, help="output score CSV")
    c.set_defaults(func=cmd_score)

    c = sub.add_parser("fuse-train", help="train LLR fusion weights on a score CSV")
    c.add_argument("--scores", required=True)
    c.add_argument("--out", required=True, help="model file")
    c.add_argument("--l2", type=float, default=0.0, help="L2 penalty on weights (default 0)")
    c.add_argument("--dataset-id", default="", help="recorded in the model metadata")
    c.add_argument("--allow-nonconverged", action="store_true")
    c.set_defaults(func=cmd_fuse_train)

    c = sub.add_parser("fuse-apply", help="apply a fusion model to a score CSV")
    c.add_argument("--model", required=True)
    c.add_argument("--scores", required=True)
    c.add_argument("--out", required=True, help="fused score CSV (column 'score')")
    c.set_defaults(func=cmd_fuse_apply)

    c = sub.add_parser("eval", help="EER / HTER report for a score CSV")
    c.add_argument("--fused", required=True, help="score CSV (fused or single column)")
    c.add_argument("--report", required=True, help="output JSON report")
    c.add_argument("--det", help="optional DET curve CSV (threshold,far,frr)")
    c.add_argument("--threshold", type=float, help="fixed threshold for FAR/FRR/HTER/accuracy")
    c.add_argument("--column", help="score column to evaluate (default 'score')")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("protocol", help="run an evaluation protocol end to end")
    c.add_argument("kind", choices=("eer", "cross", "kfold", "ymu-matrix"))
    c.add_argument("--manifest", required=True, help="dataset manifest CSV")
    c.add_argument("--store", required=True, help="embedding store CSV")
    c.add_argument("--regions", default=",".join(landmarks.REGION_TAGS),
                   help="comma-separated region tags (default: all)")
    c.add_argument("--provider-map", help="TOML file mapping region to provider id; a list value requests a best-combination search")
    c.add_argument("--provider", help="use one provider id for every region")
    c.add_argument("--dataset", help="dataset id for eer/kfold/ymu-matrix")
    c.add_argument("--source", help="cross: only this source row; otherwise same as --dataset")
    c.add_argument("--seed", type=int, default=42)
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--l2", type=float, default=0.0)
    c.add_argument("--paper-mode", choices=("whole-dataset",),
                   help="train fusion on all trials instead of per fold (optimistic)")
    c.add_argument("--report", required=True, help="output JSON report")
    c.add_argument("--format", choices=("json", "table"), default="json",
                   help="also print a table view to stdout with 'table'")
    c.add_argument("--allow-nonconverged", action="store_true")
    c.set_defaults(func=cmd_protocol)

    c = sub.add_parser("synth", help="generate a synthetic manifest, store and trial list")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="scenario TOML file")
    g.add_argument("--scenario", choices=("s1", "s2"), help="built-in scenario")
    c.add_argument("--seed", type=int, help="overrides the scenario seed")
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_synth)
    for sp in sub.choices.values():
        sp.set_defaults(usage=sp.format_usage())
    return p


def main(argv=None):
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        if args is not None:
            sys.stderr.write(args.usage)
        print(f"partfuse: error: {exc}" if args is not None else exc, file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"partfuse: numerical failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"partfuse: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"partfuse: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
