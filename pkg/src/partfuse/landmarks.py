"""68-point landmark parsing, eye-based alignment and region crop geometry.

Point indices follow the iBUG-68 layout emitted by the dlib shape predictor:
jaw 0-16, eyebrows 17-26, nose 27-35, eyes 36-47, mouth 48-67.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError

N_POINTS = 68
CANONICAL_EYE_DISTANCE = 64.0
DEFAULT_MARGIN = 1.3
DEFAULT_RESIZE = 224

HOLISTIC = "holistic"
PARTS4 = ("left_periocular", "right_periocular", "nose", "mouth")
THIRDS3 = ("third_upper", "third_middle", "third_lower")
REGION_TAGS = (HOLISTIC,) + PARTS4 + THIRDS3

LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
JAW = tuple(range(0, 17))

PART_POINTS = {
    "left_periocular": tuple(range(17, 22)) + LEFT_EYE,
    "right_periocular": tuple(range(22, 27)) + RIGHT_EYE,
    "nose": tuple(range(27, 36)),
    "mouth": tuple(range(48, 68)),
}


def _mirror_permutation():
    pairs = [(i, 16 - i) for i in range(17)]
    pairs += [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    pairs += [(27, 27), (28, 28), (29, 29), (30, 30)]
    pairs += [(31, 35), (32, 34), (33, 33)]
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    pairs += [(48, 54), (49, 53), (50, 52), (51, 51), (55, 59), (56, 58), (57, 57)]
    pairs += [(60, 64), (61, 63), (62, 62), (65, 67), (66, 66)]
    perm = list(range(N_POINTS))
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return tuple(perm)


# MIRROR_68[i] is the index that point i becomes after a horizontal flip.
MIRROR_68 = _mirror_permutation()


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray
    image_width: int
    image_height: int
    image_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_POINTS, 2):
            raise DataError("wrong-point-count",
                            f"expected a ({N_POINTS}, 2) point array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("malformed-file", "non-finite landmark coordinate")
        if self.image_width <= 0 or self.image_height <= 0:
            raise DataError("non-positive-dims",
                            f"image dims {self.image_width}x{self.image_height}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def with_points(self, points):
        return LandmarkSet(points, self.image_width, self.image_height,
                           self.image_id, self.subject_id)

    def eye_centers(self):
        return (self.points[list(LEFT_EYE)].mean(axis=0),
                self.points[list(RIGHT_EYE)].mean(axis=0))

    def mirrored(self):
        """Horizontal flip x -> width - x with left/right point groups relabelled."""
        flipped = self.points.copy()
        flipped[:, 0] = self.image_width - flipped[:, 0]
        return self.with_points(flipped[list(MIRROR_68)])


@dataclass(frozen=True, eq=False)
class RegionCrop:
    tag: str
    box: tuple
    pad: tuple = (0.0, 0.0, 0.0, 0.0)
    resize_to: int = DEFAULT_RESIZE
    preserve_aspect: bool = True

    @property
    def width(self):
        return self.box[2] - self.box[0]

    @property
    def height(self):
        return self.box[3] - self.box[1]


@dataclass(frozen=True, eq=False)
class AlignmentTransform:
    """2x3 similarity transform acting on column vectors [x, y, 1]."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(2, 3))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self):
        lin = np.linalg.inv(self.matrix[:, :2])
        return AlignmentTransform(np.hstack([lin, -lin @ self.matrix[:, 2:]]))

    @property
    def determinant(self):
        return float(np.linalg.det(self.matrix[:, :2]))


def _fail(kind, msg, lineno=None):
    where = f" (line {lineno})" if lineno is not None else ""
    raise DataError(kind, msg + where)


def parse_landmarks(data):
    """Parse a landmark CSV (bytes or str) into a validated LandmarkSet.

    Line 1 holds ``subject_id,image_id,image_width,image_height``; an
    optional literal column-name line before it is skipped. Then 68
    ``idx,x,y`` rows with idx ascending from 0.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = [(n, ln.strip()) for n, ln in enumerate(text.splitlines(), 1) if ln.strip()]
    if not lines:
        _fail("malformed-file", "empty landmark file")
    if lines[0][1].replace(" ", "") == "subject_id,image_id,image_width,image_height":
        lines = lines[1:]
        if not lines:
            _fail("malformed-file", "missing header values")
    lineno, header = lines[0]
    fields = [f.strip() for f in header.split(",")]
    if len(fields) != 4:
        _fail("malformed-file", f"header needs 4 columns, got {len(fields)}", lineno)
    subject_id, image_id, w, h = fields
    try:
        width, height = int(w), int(h)
    except ValueError:
        _fail("malformed-file", f"non-integer image dims {w!r}, {h!r}", lineno)
    if width <= 0 or height <= 0:
        _fail("non-positive-dims", f"image dims {width}x{height}", lineno)

    rows = lines[1:]
    if len(rows) != N_POINTS:
        _fail("wrong-point-count", f"expected {N_POINTS} point rows, got {len(rows)}")
    pts = np.empty((N_POINTS, 2))
    for expected, (lineno, row) in enumerate(rows):
        cols = row.split(",")
        if len(cols) != 3:
            _fail("malformed-file", f"expected idx,x,y, got {len(cols)} columns", lineno)
        try:
            idx, x, y = int(cols[0]), float(cols[1]), float(cols[2])
        except ValueError:
            _fail("malformed-file", f"non-numeric value in {row!r}", lineno)
        if idx != expected:
            _fail("malformed-file", f"point index {idx} out of order, expected {expected}", lineno)
        if not (math.isfinite(x) and math.isfinite(y)):
            _fail("malformed-file", "non-finite coordinate", lineno)
        pts[idx] = (x, y)
    return LandmarkSet(pts, width, height, image_id, subject_id)


def format_landmarks(lm):
    out = [f"{lm.subject_id},{lm.image_id},{lm.image_width},{lm.image_height}"]
    out += [f"{i},{x!r},{y!r}" for i, (x, y) in enumerate(lm.points.tolist())]
    return "\n".join(out) + "\n"


def align(lm, eye_distance=CANONICAL_EYE_DISTANCE):
    """Rotate and scale about the eye midpoint so the eyes lie level at ``eye_distance``.

    The midpoint between the eye centers is the fixed point, so a face that is
    already level at the canonical distance maps to itself.
    """
    left, right = lm.eye_centers()
    delta = right - left
    dist = math.hypot(delta[0], delta[1])
    if dist < 1e-9:
        raise DataError("degenerate-eyes", f"eye centers coincide in {lm.image_id or 'landmark set'}")
    scale = eye_distance / dist
    cos_t, sin_t = delta[0] / dist, delta[1] / dist
    # rotation by -theta, where theta is the current eye-line angle
    lin = scale * np.array([[cos_t, sin_t], [-sin_t, cos_t]])
    mid = (left + right) / 2.0
    matrix = np.hstack([lin, (mid - lin @ mid)[:, None]])
    tf = AlignmentTransform(matrix)
    return tf, lm.with_points(tf.apply(lm.points))


def _overflow(box, width, height):
    x0, y0, x1, y1 = box
    return (max(0.0, -x0), max(0.0, -y0), max(0.0, x1 - width), max(0.0, y1 - height))


def _square_crop(tag, pts, lm, margin, resize_to):
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    cx, cy = (lo + hi) / 2.0
    side = max(hi[0] - lo[0], hi[1] - lo[1]) * margin
    if side <= 0:
        # all points coincide; fall back to a 1 px square so the box stays non-empty
        side = 1.0
    half = side / 2.0
    box = (cx - half, cy - half, cx + half, cy + half)
    return RegionCrop(tag, box, _overflow(box, lm.image_width, lm.image_height),
                      resize_to, True)


def crop_parts4(lm, margin=DEFAULT_MARGIN, resize_to=DEFAULT_RESIZE):
    """Periocular, nose and mouth squares around their landmark groups."""
    return [_square_crop(tag, lm.points[list(PART_POINTS[tag])], lm, margin, resize_to)
            for tag in PARTS4]


def crop_holistic(lm, margin=DEFAULT_MARGIN, resize_to=DEFAULT_RESIZE):
    return _square_crop(HOLISTIC, lm.points, lm, margin, resize_to)


def thirds_anchors(lm, hairline_y=None):
    pts = lm.points
    glabella = (pts[21, 1] + pts[22, 1]) / 2.0
    subnasale = pts[33, 1]
    menton = pts[8, 1]
    raw_hairline = glabella - (subnasale - glabella) if hairline_y is None else hairline_y
    return raw_hairline, glabella, subnasale, menton


def crop_thirds3(lm, resize_to=DEFAULT_RESIZE, hairline_y=None):
    """Upper/middle/lower facial thirds, stacked without overlap.

    The hairline is reflected from the middle third unless ``hairline_y`` is
    given, then clipped at the top image edge; the clipped amount is kept in
    the upper crop's ``pad[1]``.
    """
    raw_hairline, glabella, subnasale, menton = thirds_anchors(lm, hairline_y)
    hairline = max(raw_hairline, 0.0)
    if not hairline < glabella < subnasale < menton:
        raise DataError(
            "inverted-anchors",
            f"hairline={hairline:g} glabella={glabella:g} subnasale={subnasale:g} "
            f"menton={menton:g} in {lm.image_id or 'landmark set'}")
    jaw_x = lm.points[list(JAW), 0]
    x0, x1 = float(jaw_x.min()), float(jaw_x.max())
    if not x1 > x0:
        raise DataError("inverted-anchors", "jaw contour has zero width")
    spans = [(raw_hairline, glabella), (glabella, subnasale), (subnasale, menton)]
    crops = []
    for tag, (top, bottom) in zip(THIRDS3, spans):
        pre_clip = (x0, top, x1, bottom)
        pad = _overflow(pre_clip, lm.image_width, lm.image_height)
        box = (x0, max(top, 0.0), x1, bottom)
        crops.append(RegionCrop(tag, box, pad, resize_to, False))
    return crops


def crop_regions(lm, strategy, margin=DEFAULT_MARGIN, resize_to=DEFAULT_RESIZE,
                 hairline_y=None):
    """Crops for a strategy name: holistic, parts4, thirds3 or a ``+holistic`` combo."""
    crops = []
    names = strategy.split("+")
    if HOLISTIC in names:
        crops.append(crop_holistic(lm, margin, resize_to))
    if "parts4" in names:
        crops.extend(crop_parts4(lm, margin, resize_to))
    if "thirds3" in names:
        crops.extend(crop_thirds3(lm, resize_to, hairline_y))
    unknown = set(names) - {HOLISTIC, "parts4", "thirds3"}
    if unknown or not crops:
        raise ValueError(f"unknown crop strategy {strategy!r}")
    return crops


def pixel_window(crop):
    """Integer pixel window [ix0, ix1) x [iy0, iy1) covered by a crop box."""
    x0, y0, x1, y1 = crop.box
    ix0 = int(math.floor(x0 + 0.5))
    iy0 = int(math.floor(y0 + 0.5))
    if crop.preserve_aspect:
        side = max(1, int(math.floor(x1 - x0 + 0.5)))
        return ix0, iy0, ix0 + side, iy0 + side
    ix1 = max(ix0 + 1, int(math.floor(x1 + 0.5)))
    iy1 = max(iy0 + 1, int(math.floor(y1 + 0.5)))
    return ix0, iy0, ix1, iy1


def _resize(arr, side):
    if arr.shape[0] == side and arr.shape[1] == side:
        return arr.copy()
    if arr.dtype == np.uint8 and (arr.ndim == 2 or arr.shape[2] in (3, 4)):
        img = Image.fromarray(arr)
        return np.asarray(img.resize((side, side), Image.BILINEAR))
    chans = arr[..., None] if arr.ndim == 2 else arr
    out = [np.asarray(Image.fromarray(chans[..., c].astype(np.float32), mode="F")
                      .resize((side, side), Image.BILINEAR))
           for c in range(chans.shape[2])]
    res = np.stack(out, axis=-1).astype(arr.dtype)
    return res[..., 0] if arr.ndim == 2 else res


def extract_pixels(image, crop, pad_mode="edge"):
    """Cut ``crop`` out of ``image`` (H x W or H x W x C) and resize to a square.

    Parts of the window outside the image are filled by ``pad_mode``:
    ``"edge"`` replicates border pixels, ``"constant"`` fills zeros.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    ix0, iy0, ix1, iy1 = pixel_window(crop)
    cx0, cy0, cx1, cy1 = max(ix0, 0), max(iy0, 0), min(ix1, w), min(iy1, h)
    if cx0 >= cx1 or cy0 >= cy1:
        raise DataError("empty-intersection", f"{crop.tag} box {crop.box} lies outside {w}x{h} image")
    patch = image[cy0:cy1, cx0:cx1]
    widths = [(cy0 - iy0, iy1 - cy1), (cx0 - ix0, ix1 - cx1)]
    if any(a or b for a, b in widths):
        widths += [(0, 0)] * (image.ndim - 2)
        patch = np.pad(patch, widths, mode=pad_mode)
    return _resize(patch, crop.resize_to)


def warp_image(image, transform):
    """Apply an alignment transform to a raster, keeping its size."""
    image = np.asarray(image)
    inv = transform.inverse().matrix
    img = Image.fromarray(image)
    out = img.transform(img.size, Image.AFFINE, tuple(inv.ravel()), resample=Image.BILINEAR)
    return np.asarray(out)
