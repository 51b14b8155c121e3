"""Two desk-scale feature extractors driven by one shared parameter set.

The corner pipeline runs a FAST-style segment test ranked by the Harris
measure and describes keypoints with 256 steered binary point-pair
comparisons. The blob pipeline finds spatial extrema of a
difference-of-Gaussians response and describes keypoints with 4x4x8
gradient-orientation histograms. Both consume the same (nf, sf, nl, st)
parameters and both are deterministic: same inputs, bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .image import (
    GrayImage,
    ImagePyramid,
    blur_array,
    build_pyramid,
    gradient_arrays,
)

# Corner detector: FAST segment test on a radius-3 Bresenham circle.
FAST_RADIUS = 3
FAST_ARC = 9
HARRIS_K = 0.04
NMS_RADIUS = 3

# Blob detector: difference of two Gaussians per pyramid level, computed on
# intensities rescaled to [0, 1] so the conventional contrast threshold applies.
DOG_SIGMA = 1.6
DOG_K = 2.0 ** (1.0 / 3.0)
# Maps the shared selectivity threshold into DoG units: the default st=20
# lands on the conventional 0.04 contrast threshold.
ST_TO_DOG = 0.04 / 20.0

# Orientation assignment.
CENTROID_RADIUS = 15     # corner pipeline: intensity-centroid disc
ORI_WINDOW_RADIUS = 8    # blob pipeline: gradient-histogram window
ORI_BINS = 36

# Descriptors.
BINARY_BITS = 256
BINARY_PATCH_RADIUS = 13  # point-pair offsets stay inside this radius
BINARY_PATTERN_SEED = 42
HIST_GRID = 4             # spatial cells per axis
HIST_ORI_BINS = 8
HIST_WINDOW = 16          # sampling window side, in pixels
HIST_CLIP = 0.2

MATCH_RATIO = 0.8

FEATURES_MAGIC = "#nfex-features v1"


class ExtractorKind(Enum):
    """The two extractor families; values double as tokens in files and the DSL."""

    CORNER_BINARY = "corner"
    BLOB_HISTOGRAM = "blob"


@dataclass(frozen=True)
class ParamSet:
    """The four tunable extraction parameters.

    nf caps how many features are kept, sf and nl shape the image pyramid,
    and st is the keypoint selectivity threshold in detector-specific units
    (FAST intensity delta for corners, rescaled to DoG contrast for blobs).
    """

    nf: int
    sf: float
    nl: int
    st: float

    def __post_init__(self):
        if not (isinstance(self.nf, (int, np.integer)) and self.nf >= 1):
            raise ValueError(f"nf must be a positive integer, got {self.nf!r}")
        if not (1.0 < self.sf <= 4.0):
            raise ValueError(f"sf must lie in (1.0, 4.0], got {self.sf!r}")
        if not (isinstance(self.nl, (int, np.integer)) and 1 <= self.nl <= 16):
            raise ValueError(f"nl must be an integer in [1, 16], got {self.nl!r}")
        if not (self.st >= 0):
            raise ValueError(f"st must be non-negative, got {self.st!r}")
        object.__setattr__(self, "nf", int(self.nf))
        object.__setattr__(self, "sf", float(self.sf))
        object.__setattr__(self, "nl", int(self.nl))
        object.__setattr__(self, "st", float(self.st))


# Conventional defaults for the shared parameter set.
DEFAULT_PARAMS = ParamSet(nf=500, sf=1.2, nl=8, st=20.0)


@dataclass(frozen=True)
class Keypoint:
    """Detected interest point; x, y are sub-pixel coordinates at base scale."""

    x: float
    y: float
    level: int
    score: float
    orientation: float = 0.0


@dataclass(frozen=True, eq=False)
class Descriptor:
    """Fixed-length signature: 256 packed bits or a 128-bin unit histogram.

    `degenerate` marks flat patches (all-zero histogram, undefined orientation);
    `clipped` marks descriptors whose sampling window ran off the image.
    """

    kind: ExtractorKind
    vector: np.ndarray
    degenerate: bool = False
    clipped: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector)
        if self.kind is ExtractorKind.CORNER_BINARY:
            if v.dtype != np.uint8 or v.shape != (BINARY_BITS // 8,):
                raise ValueError(f"binary descriptor must be {BINARY_BITS // 8} packed bytes")
        else:
            if v.shape != (HIST_GRID * HIST_GRID * HIST_ORI_BINS,):
                raise ValueError("histogram descriptor must have 128 bins")
            norm = float(np.linalg.norm(v))
            if not self.degenerate and abs(norm - 1.0) > 1e-6:
                raise ValueError(f"histogram descriptor must be unit-norm, got {norm}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.degenerate == other.degenerate
            and self.clipped == other.clipped
            and bool(np.array_equal(self.vector, other.vector))
        )


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints plus parallel descriptors from one extractor run on one frame."""

    keypoints: tuple[Keypoint, ...]
    descriptors: tuple[Descriptor, ...]
    extractor: ExtractorKind
    params: ParamSet
    frame_id: int = 0

    def __post_init__(self):
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must be parallel")
        if len(self.keypoints) > self.params.nf:
            raise ValueError(f"{len(self.keypoints)} features exceed the nf={self.params.nf} cap")

    def __len__(self) -> int:
        return len(self.keypoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.extractor is other.extractor
            and self.params == other.params
            and self.frame_id == other.frame_id
            and self.keypoints == other.keypoints
            and tuple(self.descriptors) == tuple(other.descriptors)
        )


# --- detection ---------------------------------------------------------------

# Radius-3 Bresenham circle, clockwise from 12 o'clock; (dx, dy) pairs.
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
_COMPASS = (0, 4, 8, 12)  # indices of the 4 axis-aligned circle points


def _fast_candidates(a: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel (ys, xs) passing the FAST segment test with threshold t."""
    h, w = a.shape
    if h < 2 * FAST_RADIUS + 1 or w < 2 * FAST_RADIUS + 1:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    r = FAST_RADIUS
    center = a[r : h - r, r : w - r]
    # Compass pretest: any 9-long arc covers at least 2 of the 4 compass points.
    nb = np.zeros(center.shape, np.uint8)
    nd = np.zeros(center.shape, np.uint8)
    for idx in _COMPASS:
        dx, dy = FAST_CIRCLE[idx]
        v = a[r + dy : h - r + dy, r + dx : w - r + dx]
        nb += v > center + t
        nd += v < center - t
    ys, xs = np.nonzero((nb >= 2) | (nd >= 2))
    if ys.size == 0:
        return ys, xs
    cy = ys + r
    cx = xs + r
    centers = a[cy, cx]
    ring = np.empty((16, ys.size), np.float64)
    for i, (dx, dy) in enumerate(FAST_CIRCLE):
        ring[i] = a[cy + dy, cx + dx]
    keep = _has_arc(ring > centers + t) | _has_arc(ring < centers - t)
    return cy[keep], cx[keep]


def _has_arc(mask: np.ndarray) -> np.ndarray:
    """True where a column of the (16, n) mask has >= FAST_ARC contiguous True
    values on the wrapped circle."""
    wrapped = np.concatenate([mask, mask[: FAST_ARC - 1]], axis=0).astype(np.int16)
    csum = np.cumsum(wrapped, axis=0)
    padded = np.vstack([np.zeros((1, mask.shape[1]), np.int16), csum])
    window = padded[FAST_ARC:] - padded[:-FAST_ARC]
    return (window == FAST_ARC).any(axis=0)


def _harris_at(a: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Harris response at the given pixels, 3x3 box-summed structure tensor."""
    gx, gy = gradient_arrays(a)
    sxx = np.zeros(ys.shape, np.float64)
    syy = np.zeros(ys.shape, np.float64)
    sxy = np.zeros(ys.shape, np.float64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            vx = gx[ys + dy, xs + dx]
            vy = gy[ys + dy, xs + dx]
            sxx += vx * vx
            syy += vy * vy
            sxy += vx * vy
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    return det - HARRIS_K * tr * tr


def _nms_sparse(h: int, w: int, ys: np.ndarray, xs: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Keep candidates whose score is maximal within NMS_RADIUS (Chebyshev)."""
    if ys.size == 0:
        return np.zeros(0, bool)
    grid = np.full((h, w), -np.inf)
    grid[ys, xs] = scores
    r = NMS_RADIUS
    padded = np.pad(grid, r, mode="constant", constant_values=-np.inf)
    local_max = np.full((ys.size,), -np.inf)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            np.maximum(local_max, padded[ys + r + dy, xs + r + dx], out=local_max)
    return scores >= local_max


def _to_base(
    pyr: ImagePyramid, level: int, ys: np.ndarray, xs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Map level-pixel centers to base-scale sub-pixel coordinates."""
    rx, ry = pyr.level_scale(level)
    bx = (xs + 0.5) * rx - 0.5
    by = (ys + 0.5) * ry - 0.5
    return bx, by


def _cap_candidates(rows: list[tuple], nf: int) -> list[Keypoint]:
    """Rank merged per-level candidates by |score| and keep the strongest nf.

    `rows` must already be in (level, y, x) order so that ties resolve
    identically regardless of how levels were produced.
    """
    if not rows:
        return []
    scores = np.array([abs(r[0]) for r in rows])
    order = np.argsort(-scores, kind="stable")[:nf]
    return [rows[i][1] for i in order]


def detect_corner(pyr: ImagePyramid, params: ParamSet) -> list[Keypoint]:
    """FAST segment test on every level, ranked by Harris response.

    Non-maximum suppression runs per level with radius NMS_RADIUS; survivors
    from all levels are merged in (level, y, x) order and the strongest
    params.nf are kept. Coordinates are mapped back to base scale.
    """
    rows: list[tuple] = []
    for lvl, img in enumerate(pyr.levels):
        a = img.data
        ys, xs = _fast_candidates(a, params.st)
        if ys.size == 0:
            continue
        scores = _harris_at(a, ys, xs)
        keep = _nms_sparse(a.shape[0], a.shape[1], ys, xs, scores)
        ys, xs, scores = ys[keep], xs[keep], scores[keep]
        bx, by = _to_base(pyr, lvl, ys, xs)
        for i in range(ys.size):
            rows.append((scores[i], Keypoint(float(bx[i]), float(by[i]), lvl, float(scores[i]))))
    return _cap_candidates(rows, params.nf)


def detect_blob(pyr: ImagePyramid, params: ParamSet) -> list[Keypoint]:
    """3x3 spatial extrema of a per-level difference-of-Gaussians response.

    The response is computed on intensities rescaled to [0, 1]; candidates
    need |response| above params.st * ST_TO_DOG. The strongest params.nf by
    |response| are kept, with the same deterministic merge as detect_corner.
    """
    thr = params.st * ST_TO_DOG
    rows: list[tuple] = []
    for lvl, img in enumerate(pyr.levels):
        u = img.data / 255.0
        dog = blur_array(u, DOG_SIGMA * DOG_K) - blur_array(u, DOG_SIGMA)
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        mask = ((dog >= mx) | (dog <= mn)) & (np.abs(dog) > thr)
        mask[0, :] = mask[-1, :] = False
        mask[:, 0] = mask[:, -1] = False
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        scores = dog[ys, xs]
        bx, by = _to_base(pyr, lvl, ys, xs)
        for i in range(ys.size):
            rows.append((scores[i], Keypoint(float(bx[i]), float(by[i]), lvl, float(scores[i]))))
    return _cap_candidates(rows, params.nf)


# --- orientation -------------------------------------------------------------

def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside], dy[inside]

_CENTROID_DX, _CENTROID_DY = _disc_offsets(CENTROID_RADIUS)


def _wrap_angle(theta: float) -> float:
    """Wrap to [-pi, pi)."""
    out = (theta + math.pi) % (2.0 * math.pi) - math.pi
    return out


def compute_orientation(img: GrayImage, kp: Keypoint, kind: ExtractorKind) -> tuple[float, bool]:
    """Keypoint orientation in [-pi, pi) plus a degeneracy flag.

    Corner keypoints take the angle of the intensity centroid over a
    radius-15 disc; blob keypoints take the peak of a magnitude-weighted
    36-bin gradient-orientation histogram over a radius-8 window. Angles
    follow image axes: +x right, +y down.
    """
    cx = int(round(kp.x))
    cy = int(round(kp.y))
    if not (0 <= cx < img.width and 0 <= cy < img.height):
        raise ValueError(f"keypoint ({kp.x}, {kp.y}) lies outside the image")
    a = img.data
    if kind is ExtractorKind.CORNER_BINARY:
        xs = cx + _CENTROID_DX
        ys = cy + _CENTROID_DY
        ok = (xs >= 0) & (xs < img.width) & (ys >= 0) & (ys < img.height)
        vals = a[ys[ok], xs[ok]]
        m10 = float((_CENTROID_DX[ok] * vals).sum())
        m01 = float((_CENTROID_DY[ok] * vals).sum())
        if math.hypot(m10, m01) < 1e-9:
            return 0.0, True
        return _wrap_angle(math.atan2(m01, m10)), False
    r = ORI_WINDOW_RADIUS
    y0, y1 = max(0, cy - r), min(img.height, cy + r + 1)
    x0, x1 = max(0, cx - r), min(img.width, cx + r + 1)
    patch = a[y0:y1, x0:x1]
    if patch.shape[0] < 3 or patch.shape[1] < 3:
        return 0.0, True
    gx, gy = gradient_arrays(patch)
    mag = np.hypot(gx, gy).ravel()
    if mag.sum() < 1e-9:
        return 0.0, True
    ang = np.arctan2(gy, gx).ravel()
    bins = ((ang + math.pi) / (2.0 * math.pi) * ORI_BINS).astype(np.intp) % ORI_BINS
    hist = np.bincount(bins, weights=mag, minlength=ORI_BINS)
    peak = int(np.argmax(hist))
    theta = (peak + 0.5) / ORI_BINS * 2.0 * math.pi - math.pi
    return _wrap_angle(theta), False


# --- description -------------------------------------------------------------

def _binary_pattern() -> np.ndarray:
    """The 256 fixed point-pair offsets (x1, y1, x2, y2), Gaussian-sampled once
    from seed 42 and clipped to BINARY_PATCH_RADIUS."""
    rng = np.random.default_rng(BINARY_PATTERN_SEED)
    sigma = BINARY_PATCH_RADIUS / 2.0
    offs = rng.normal(0.0, sigma, size=(BINARY_BITS, 4))
    return np.clip(np.rint(offs), -BINARY_PATCH_RADIUS, BINARY_PATCH_RADIUS).astype(np.int64)

BINARY_PATTERN = _binary_pattern()


def _sample_clamped(a: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, bool]:
    """Nearest-pixel lookup with coordinates clamped to bounds; reports clamping."""
    xi = np.rint(xs).astype(np.intp)
    yi = np.rint(ys).astype(np.intp)
    h, w = a.shape
    clipped = bool((xi < 0).any() or (xi >= w).any() or (yi < 0).any() or (yi >= h).any())
    np.clip(xi, 0, w - 1, out=xi)
    np.clip(yi, 0, h - 1, out=yi)
    return a[yi, xi], clipped


def _describe_binary(img: GrayImage, kp: Keypoint) -> Descriptor:
    a = img.data
    c, s = math.cos(kp.orientation), math.sin(kp.orientation)
    x1 = BINARY_PATTERN[:, 0] * c - BINARY_PATTERN[:, 1] * s + kp.x
    y1 = BINARY_PATTERN[:, 0] * s + BINARY_PATTERN[:, 1] * c + kp.y
    x2 = BINARY_PATTERN[:, 2] * c - BINARY_PATTERN[:, 3] * s + kp.x
    y2 = BINARY_PATTERN[:, 2] * s + BINARY_PATTERN[:, 3] * c + kp.y
    v1, clip1 = _sample_clamped(a, x1, y1)
    v2, clip2 = _sample_clamped(a, x2, y2)
    bits = (v1 < v2).astype(np.uint8)
    return Descriptor(
        kind=ExtractorKind.CORNER_BINARY,
        vector=np.packbits(bits),
        clipped=clip1 or clip2,
    )


def _describe_histogram(img: GrayImage, kp: Keypoint, gx: np.ndarray, gy: np.ndarray) -> Descriptor:
    half = HIST_WINDOW / 2.0
    us = np.arange(HIST_WINDOW) - half + 0.5
    uu, vv = np.meshgrid(us, us)  # uu: along-orientation axis, vv: orthogonal
    c, s = math.cos(kp.orientation), math.sin(kp.orientation)
    xs = uu * c - vv * s + kp.x
    ys = uu * s + vv * c + kp.y
    mag_x, clip1 = _sample_clamped(gx, xs.ravel(), ys.ravel())
    mag_y, clip2 = _sample_clamped(gy, xs.ravel(), ys.ravel())
    mag = np.hypot(mag_x, mag_y)
    rel = np.arctan2(mag_y, mag_x) - kp.orientation
    obins = np.floor((rel + math.pi) % (2.0 * math.pi) / (2.0 * math.pi) * HIST_ORI_BINS)
    obins = obins.astype(np.intp) % HIST_ORI_BINS
    cell = HIST_WINDOW // HIST_GRID
    cu = np.minimum((uu.ravel() + half) // cell, HIST_GRID - 1).astype(np.intp)
    cv = np.minimum((vv.ravel() + half) // cell, HIST_GRID - 1).astype(np.intp)
    flat = (cv * HIST_GRID + cu) * HIST_ORI_BINS + obins
    hist = np.bincount(flat, weights=mag, minlength=HIST_GRID * HIST_GRID * HIST_ORI_BINS)
    norm = float(np.linalg.norm(hist))
    if norm < 1e-12:
        return Descriptor(
            kind=ExtractorKind.BLOB_HISTOGRAM,
            vector=np.zeros_like(hist),
            degenerate=True,
            clipped=clip1 or clip2,
        )
    hist = np.minimum(hist / norm, HIST_CLIP)
    hist /= np.linalg.norm(hist)
    return Descriptor(kind=ExtractorKind.BLOB_HISTOGRAM, vector=hist, clipped=clip1 or clip2)


def describe(img: GrayImage, kps: list[Keypoint], kind: ExtractorKind) -> list[Descriptor]:
    """Descriptors for oriented keypoints; windows running off the image are
    computed on clamped samples and flagged."""
    if kind is ExtractorKind.CORNER_BINARY:
        return [_describe_binary(img, kp) for kp in kps]
    gx, gy = gradient_arrays(img.data)
    return [_describe_histogram(img, kp, gx, gy) for kp in kps]


def extract(img: GrayImage, kind: ExtractorKind, params: ParamSet, frame_id: int = 0) -> FeatureSet:
    """Full pipeline: pyramid, detection, orientation, description."""
    pyr = build_pyramid(img, params.sf, params.nl)
    if kind is ExtractorKind.CORNER_BINARY:
        kps = detect_corner(pyr, params)
    else:
        kps = detect_blob(pyr, params)
    oriented = []
    for kp in kps:
        theta, _ = compute_orientation(img, kp, kind)
        oriented.append(replace(kp, orientation=theta))
    descs = describe(img, oriented, kind)
    return FeatureSet(
        keypoints=tuple(oriented),
        descriptors=tuple(descs),
        extractor=kind,
        params=params,
        frame_id=frame_id,
    )


# --- matching ----------------------------------------------------------------

def _unpack_bits(descs: tuple[Descriptor, ...]) -> np.ndarray:
    packed = np.stack([d.vector for d in descs])
    return np.unpackbits(packed, axis=1).astype(np.float64)


def distance_matrix(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    """Pairwise descriptor distances: Hamming counts or Euclidean distances."""
    if a.extractor is not b.extractor:
        raise ValueError(f"cannot compare {a.extractor.value} with {b.extractor.value} descriptors")
    if a.extractor is ExtractorKind.CORNER_BINARY:
        pa = _unpack_bits(a.descriptors)
        pb = _unpack_bits(b.descriptors)
        return pa @ (1.0 - pb.T) + (1.0 - pa) @ pb.T
    pa = np.stack([d.vector for d in a.descriptors])
    pb = np.stack([d.vector for d in b.descriptors])
    sq = np.sum(pa * pa, axis=1)[:, None] + np.sum(pb * pb, axis=1)[None, :] - 2.0 * (pa @ pb.T)
    return np.sqrt(np.maximum(sq, 0.0))


def _nn_with_ratio(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise nearest neighbour and whether it passes the ratio test."""
    nn = np.argmin(dist, axis=1)
    best = dist[np.arange(dist.shape[0]), nn]
    if dist.shape[1] < 2:
        return nn, np.ones(dist.shape[0], bool)
    part = np.partition(dist, 1, axis=1)
    second = part[:, 1]
    return nn, best <= MATCH_RATIO * second


def match(a: FeatureSet, b: FeatureSet) -> list[tuple[int, int, float]]:
    """Mutual nearest neighbours passing a symmetric ratio test.

    Returns (index in a, index in b, distance) triples sorted by the first
    index; match(a, b) mirrors match(b, a).
    """
    if a.extractor is not b.extractor:
        raise ValueError(f"cannot match {a.extractor.value} against {b.extractor.value}")
    if len(a) == 0 or len(b) == 0:
        return []
    dist = distance_matrix(a, b)
    nn12, ok12 = _nn_with_ratio(dist)
    nn21, ok21 = _nn_with_ratio(dist.T)
    out = []
    for i in range(len(a)):
        j = nn12[i]
        if nn21[j] == i and ok12[i] and ok21[j]:
            out.append((i, int(j), float(dist[i, j])))
    return out


# --- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def dump_features(fs: FeatureSet, extra_comments: tuple[str, ...] = ()) -> str:
    """Line-oriented text form; loses only the diagnostic descriptor flags."""
    lines = [
        f"{FEATURES_MAGIC} kind={fs.extractor.value} nf={fs.params.nf} "
        f"sf={_fmt(fs.params.sf)} nl={fs.params.nl} st={_fmt(fs.params.st)}"
    ]
    for c in extra_comments:
        lines.append(f"# {c}")
    for kp, d in zip(fs.keypoints, fs.descriptors):
        if fs.extractor is ExtractorKind.CORNER_BINARY:
            desc = d.vector.tobytes().hex()
        else:
            desc = " ".join(_fmt(v) for v in d.vector)
        lines.append(
            f"{_fmt(kp.x)} {_fmt(kp.y)} {kp.level} {_fmt(kp.score)} {_fmt(kp.orientation)} {desc}"
        )
    return "\n".join(lines) + "\n"


def parse_features(text: str, frame_id: int = 0) -> FeatureSet:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FEATURES_MAGIC):
        raise ValueError("not a feature file (bad header)")
    header = dict(kv.split("=", 1) for kv in lines[0][len(FEATURES_MAGIC) :].split())
    kind = ExtractorKind(header["kind"])
    params = ParamSet(
        nf=int(header["nf"]), sf=float(header["sf"]), nl=int(header["nl"]), st=float(header["st"])
    )
    kps: list[Keypoint] = []
    descs: list[Descriptor] = []
    for line in lines[1:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kps.append(
            Keypoint(
                x=float(parts[0]),
                y=float(parts[1]),
                level=int(parts[2]),
                score=float(parts[3]),
                orientation=float(parts[4]),
            )
        )
        if kind is ExtractorKind.CORNER_BINARY:
            vec = np.frombuffer(bytes.fromhex(parts[5]), dtype=np.uint8)
            descs.append(Descriptor(kind=kind, vector=vec.copy()))
        else:
            vec = np.array([float(v) for v in parts[5:]], dtype=np.float64)
            degenerate = bool(np.linalg.norm(vec) < 1e-6)
            descs.append(Descriptor(kind=kind, vector=vec, degenerate=degenerate))
    return FeatureSet(
        keypoints=tuple(kps),
        descriptors=tuple(descs),
        extractor=kind,
        params=params,
        frame_id=frame_id,
    )


def save_features(fs: FeatureSet, path, extra_comments: tuple[str, ...] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_features(fs, extra_comments))


def load_features(path, frame_id: int = 0) -> FeatureSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_features(fh.read(), frame_id=frame_id)
