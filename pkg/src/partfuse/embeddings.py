"""Per-region embedding store, trial lists and cosine scoring."""

import csv
import io
import os
import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .landmarks import REGION_TAGS

GENUINE = "genuine"
IMPOSTOR = "impostor"
LABELS = (GENUINE, IMPOSTOR)

EMBEDDING_HEADER = ["subject_id", "image_id", "region", "provider_id", "dim"]
TRIAL_HEADER = ["image_a", "image_b", "label"]


@dataclass(frozen=True)
class ProviderSpec:
    provider_id: str
    dim: int
    channel_mode: str = "rgb"
    input_side: int = 224

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"provider {self.provider_id}: dim must be positive")
        if self.channel_mode not in ("rgb", "grayscale"):
            raise ValueError(f"provider {self.provider_id}: bad channel_mode {self.channel_mode!r}")
        if self.input_side <= 0:
            raise ValueError(f"provider {self.provider_id}: input_side must be positive")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    subject_id: str
    image_id: str
    region: str
    provider_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64).ravel()
        key = f"({self.image_id}, {self.region}, {self.provider_id})"
        if self.region not in REGION_TAGS:
            raise DataError("unknown-region", f"{self.region!r} in {key}")
        if not np.all(np.isfinite(vec)):
            raise DataError("non-finite-component", key)
        if not np.linalg.norm(vec) > 0:
            raise DataError("zero-vector", key)
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def key(self):
        return (self.image_id, self.region, self.provider_id)


@dataclass(frozen=True)
class TrialPair:
    image_a: str
    image_b: str
    label: str

    def __post_init__(self):
        if self.image_a == self.image_b:
            raise DataError("self-pair", f"trial compares {self.image_a} with itself")
        if self.label not in LABELS:
            raise DataError("bad-label", f"{self.label!r} (expected genuine or impostor)")

    @property
    def is_genuine(self):
        return self.label == GENUINE


@dataclass(frozen=True, eq=False)
class TrialScoreVector:
    image_a: str
    image_b: str
    label: str
    regions: tuple
    scores: np.ndarray


class EmbeddingStore:
    """Read-only index of embedding records keyed by (image_id, region, provider_id)."""

    def __init__(self, records=()):
        self._records = {}
        self._subjects = {}
        self._dims = {}
        self._matrices = {}
        self._lock = threading.Lock()
        for rec in records:
            self._add(rec)

    def _add(self, rec):
        if rec.key in self._records:
            raise DataError("duplicate-key", "(%s, %s, %s)" % rec.key)
        known = self._subjects.setdefault(rec.image_id, rec.subject_id)
        if known != rec.subject_id:
            raise DataError("subject-conflict",
                            f"image {rec.image_id} tagged with subjects {known} and {rec.subject_id}")
        dim = self._dims.setdefault(rec.provider_id, rec.vector.shape[0])
        if dim != rec.vector.shape[0]:
            raise DataError("dimension-mismatch",
                            f"provider {rec.provider_id} has dim {dim}, got {rec.vector.shape[0]} "
                            "for (%s, %s, %s)" % rec.key)
        self._records[rec.key] = rec

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def __contains__(self, key):
        return key in self._records

    def get(self, image_id, region, provider_id):
        try:
            return self._records[(image_id, region, provider_id)]
        except KeyError:
            raise DataError("missing-embedding",
                            f"no embedding for image {image_id}, region {region}, "
                            f"provider {provider_id}") from None

    def subject_of(self, image_id):
        try:
            return self._subjects[image_id]
        except KeyError:
            raise DataError("missing-embedding", f"image {image_id} not in store") from None

    @property
    def providers(self):
        return dict(self._dims)

    @property
    def image_ids(self):
        return list(self._subjects)

    def matrix(self, region, provider_id):
        """(row index by image_id, stacked vectors, row norms) for one region/provider."""
        key = (region, provider_id)
        with self._lock:
            if key not in self._matrices:
                recs = [r for r in self._records.values()
                        if r.region == region and r.provider_id == provider_id]
                index = {r.image_id: i for i, r in enumerate(recs)}
                mat = np.array([r.vector for r in recs]) if recs else np.empty((0, 0))
                norms = np.linalg.norm(mat, axis=1) if recs else np.empty(0)
                self._matrices[key] = (index, mat, norms)
            return self._matrices[key]

    def merged(self, other):
        return EmbeddingStore(list(self) + list(other))


def _rows(data):
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    return csv.reader(io.StringIO(text))


def import_embeddings(data, spec=None, store=None):
    """Parse an embedding CSV and return a new store.

    With ``spec`` every row must belong to that provider and have its dim;
    without it dims are only checked for consistency per provider. Records
    already in ``store`` are carried over.
    """
    reader = _rows(data)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:5]] != EMBEDDING_HEADER:
        raise DataError("malformed-file", "embedding CSV header must start with "
                        + ",".join(EMBEDDING_HEADER))
    records = list(store) if store is not None else []
    for lineno, row in enumerate(reader, 2):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) < 6:
            raise DataError("malformed-file", f"line {lineno}: too few columns")
        subject_id, image_id, region, provider_id, dim = (c.strip() for c in row[:5])
        values = row[5:]
        while values and not values[-1].strip():
            values.pop()
        try:
            dim = int(dim)
            vec = np.array([float(v) for v in values])
        except ValueError:
            raise DataError("malformed-file", f"line {lineno}: non-numeric value") from None
        if spec is not None and provider_id != spec.provider_id:
            raise DataError("provider-mismatch",
                            f"line {lineno}: provider {provider_id}, importing {spec.provider_id}")
        expected = spec.dim if spec is not None else dim
        if dim != expected or vec.shape[0] != expected:
            raise DataError("dimension-mismatch",
                            f"line {lineno}: {vec.shape[0]} values (dim column {dim}), expected {expected}")
        if not np.all(np.isfinite(vec)):
            raise DataError("non-finite-component", f"line {lineno}: ({image_id}, {region}, {provider_id})")
        try:
            records.append(EmbeddingRecord(subject_id, image_id, region, provider_id, vec))
        except DataError as exc:
            raise DataError(exc.kind, f"line {lineno}: {exc}") from None
    return EmbeddingStore(records)


def format_embeddings(store):
    """Serialize a store in the embedding CSV format (sorted, round-trip exact)."""
    recs = sorted(store, key=lambda r: (r.provider_id, r.image_id, r.region))
    width = max((r.vector.shape[0] for r in recs), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EMBEDDING_HEADER + [f"v{i}" for i in range(width)])
    for r in recs:
        w.writerow([r.subject_id, r.image_id, r.region, r.provider_id, r.vector.shape[0]]
                   + [repr(float(v)) for v in r.vector])
    return buf.getvalue()


def cosine_score(a, b):
    """Cosine similarity of two records of the same region and provider."""
    if a.region != b.region:
        raise DataError("region-mismatch", f"{a.region} vs {b.region}")
    if a.provider_id != b.provider_id:
        raise DataError("provider-mismatch", f"{a.provider_id} vs {b.provider_id}")
    if a.vector.shape != b.vector.shape:
        raise DataError("dimension-mismatch", f"{a.vector.shape[0]} vs {b.vector.shape[0]}")
    va, vb = a.vector, b.vector
    s = float(np.dot(va, vb)) / (float(np.linalg.norm(va)) * float(np.linalg.norm(vb)))
    return min(1.0, max(-1.0, s))


def read_trials(data):
    reader = _rows(data)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != TRIAL_HEADER:
        raise DataError("malformed-file", "trial CSV header must be image_a,image_b,label")
    trials = []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError("malformed-file", f"line {lineno}: expected 3 columns")
        try:
            trials.append(TrialPair(*(c.strip() for c in row)))
        except DataError as exc:
            raise DataError(exc.kind, f"line {lineno}: {exc}") from None
    return trials


def format_trials(trials):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_HEADER)
    for t in trials:
        w.writerow([t.image_a, t.image_b, t.label])
    return buf.getvalue()


def resolve_provider_map(provider_map, regions):
    if isinstance(provider_map, str):
        return {r: provider_map for r in regions}
    missing = [r for r in regions if r not in provider_map]
    if missing:
        raise DataError("missing-provider", f"no provider mapped for regions {missing}")
    return {r: provider_map[r] for r in regions}


def thread_count(threads=None):
    if threads is None:
        threads = int(os.environ.get("PARTFUSE_THREADS", "0") or 0)
    return threads if threads > 0 else (os.cpu_count() or 1)


class TrialScores:
    """Score matrix for a trial list: one row per trial, one column per region.

    Behaves as a sequence of TrialScoreVector.
    """

    def __init__(self, image_a, image_b, labels, regions, scores):
        self.image_a = list(image_a)
        self.image_b = list(image_b)
        self.labels = list(labels)
        self.regions = tuple(regions)
        self.scores = np.asarray(scores, dtype=np.float64).reshape(len(self.labels), len(self.regions))
        if len(set(self.regions)) != len(self.regions):
            raise DataError("duplicate-region", f"region list {self.regions}")

    @classmethod
    def from_vectors(cls, vectors):
        vectors = list(vectors)
        if not vectors:
            raise DataError("empty-input", "no score vectors")
        regions = vectors[0].regions
        for v in vectors:
            if tuple(v.regions) != tuple(regions):
                raise DataError("region-order-mismatch", f"{v.regions} vs {regions}")
        return cls([v.image_a for v in vectors], [v.image_b for v in vectors],
                   [v.label for v in vectors], regions, np.array([v.scores for v in vectors]))

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return TrialScoreVector(self.image_a[i], self.image_b[i], self.labels[i],
                                self.regions, self.scores[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def genuine_mask(self):
        return np.array([lab == GENUINE for lab in self.labels], dtype=bool)

    def column(self, region):
        return self.scores[:, self.regions.index(region)]

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return TrialScores([self.image_a[i] for i in idx], [self.image_b[i] for i in idx],
                           [self.labels[i] for i in idx], self.regions, self.scores[idx])

    def select(self, regions):
        cols = [self.regions.index(r) for r in regions]
        return TrialScores(self.image_a, self.image_b, self.labels, regions, self.scores[:, cols])


def _rows_for(index, images, region, provider):
    try:
        return np.fromiter((index[img] for img in images), dtype=np.intp, count=len(images))
    except KeyError as exc:
        raise DataError("missing-embedding",
                        f"no embedding for image {exc.args[0]}, region {region}, "
                        f"provider {provider}") from None


def _score_chunk(store, trials, regions, pmap):
    cols = []
    for region in regions:
        provider = pmap[region]
        index, mat, norms = store.matrix(region, provider)
        ia = _rows_for(index, [t.image_a for t in trials], region, provider)
        ib = _rows_for(index, [t.image_b for t in trials], region, provider)
        s = np.sum(mat[ia] * mat[ib], axis=1) / (norms[ia] * norms[ib])
        cols.append(np.clip(s, -1.0, 1.0))
    return np.column_stack(cols)


def score_trials(store, trials, regions, provider_map, threads=None, chunk=4096):
    """Cosine score every trial on every region.

    ``provider_map`` maps region -> provider_id (or is one provider id for
    all regions). Labels are checked against the subject ids in the store.
    Output order follows ``trials`` regardless of threading.
    """
    regions = tuple(regions)
    if not regions:
        raise DataError("empty-input", "no regions requested")
    pmap = resolve_provider_map(provider_map, regions)
    trials = list(trials)
    for t in trials:
        same = store.subject_of(t.image_a) == store.subject_of(t.image_b)
        if same != t.is_genuine:
            raise DataError("label-mismatch",
                            f"trial ({t.image_a}, {t.image_b}) labelled {t.label} "
                            f"but subjects {'match' if same else 'differ'}")
    chunks = [trials[i:i + chunk] for i in range(0, len(trials), chunk)]
    workers = min(thread_count(threads), max(1, len(chunks)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _score_chunk(store, c, regions, pmap), chunks))
    else:
        parts = [_score_chunk(store, c, regions, pmap) for c in chunks]
    scores = np.vstack(parts) if parts else np.empty((0, len(regions)))
    return TrialScores([t.image_a for t in trials], [t.image_b for t in trials],
                       [t.label for t in trials], regions, scores)


def format_scores(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_HEADER + list(table.regions))
    for i in range(len(table)):
        w.writerow([table.image_a[i], table.image_b[i], table.labels[i]]
                   + [repr(float(v)) for v in table.scores[i]])
    return buf.getvalue()


def read_scores(data):
    """Read a score CSV (``image_a,image_b,label,<region>...``)."""
    reader = _rows(data)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:3]] != TRIAL_HEADER or len(header) < 4:
        raise DataError("malformed-file", "score CSV header must be image_a,image_b,label,<column>...")
    columns = [h.strip() for h in header[3:]]
    ia, ib, labels, rows = [], [], [], []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError("malformed-file", f"line {lineno}: expected {len(header)} columns")
        if row[2].strip() not in LABELS:
            raise DataError("bad-label", f"line {lineno}: {row[2]!r}")
        try:
            vals = [float(v) for v in row[3:]]
        except ValueError:
            raise DataError("malformed-file", f"line {lineno}: non-numeric score") from None
        if not all(np.isfinite(vals)):
            raise DataError("non-finite-score", f"line {lineno}")
        ia.append(row[0].strip())
        ib.append(row[1].strip())
        labels.append(row[2].strip())
        rows.append(vals)
    return TrialScores(ia, ib, labels, columns, np.array(rows).reshape(len(rows), len(columns)))


def run_provider(cmd, png_path, region, timeout=600):
    """Run an external embedding provider on one crop and parse its output vector."""
    argv = shlex.split(cmd) + ["--in", str(png_path), "--region", region]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise DataError("provider-failure", f"{cmd}: {exc}") from None
    if proc.returncode != 0:
        raise DataError("provider-failure",
                        f"{cmd} exited {proc.returncode} on {png_path}: {proc.stderr.strip()[:200]}")
    tokens = proc.stdout.split()
    try:
        dim = int(tokens[0])
        vec = np.array([float(t) for t in tokens[1:]])
    except (IndexError, ValueError):
        raise DataError("provider-failure", f"{cmd}: unparseable output for {png_path}") from None
    if vec.shape[0] != dim:
        raise DataError("dimension-mismatch", f"{cmd} announced dim {dim}, printed {vec.shape[0]} values")
    return vec


def embed_crops(crop_index, cmd, spec, store=None):
    """Embed every crop listed in ``crop_index`` (rows of subject_id, image_id, region, path).

    Crops are converted to the provider's channel mode and input side before
    the provider sees them.
    """
    records = list(store) if store is not None else []
    with tempfile.TemporaryDirectory() as tmp:
        for n, (subject_id, image_id, region, path) in enumerate(crop_index):
            img = Image.open(path)
            img = img.convert("L" if spec.channel_mode == "grayscale" else "RGB")
            if img.size != (spec.input_side, spec.input_side):
                img = img.resize((spec.input_side, spec.input_side), Image.BILINEAR)
            tmp_png = os.path.join(tmp, f"crop{n}.png")
            img.save(tmp_png)
            vec = run_provider(cmd, tmp_png, region)
            if vec.shape[0] != spec.dim:
                raise DataError("dimension-mismatch",
                                f"{spec.provider_id} produced {vec.shape[0]} values for {path}, expected {spec.dim}")
            records.append(EmbeddingRecord(subject_id, image_id, region, spec.provider_id, vec))
    return EmbeddingStore(records)
