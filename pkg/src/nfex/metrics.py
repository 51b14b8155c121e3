"""The seven per-frame feature-quality measures and their cross-candidate
normalization.

Raw values have wildly different units (intensity sums, pixels, ratios), so
candidate extractors are compared through per-component min-max normalization
over the candidates evaluated on the same frame. Degenerate inputs never
raise; they produce the documented convention value plus a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extractors import ExtractorKind, FeatureSet, distance_matrix, match
from .image import GrayImage, patch_stats

TEXTURE_PATCH_RADIUS = 4   # 9x9 patch for texture variance
DISSIM_INNER_RADIUS = 2    # 5x5 feature patch
DISSIM_OUTER_RADIUS = 5    # 11x11 surrounding patch
STABILITY_WINDOW = 5       # frames considered by the persistence test
DENSITY_UNIT = 1000.0      # features per kilopixel
SIMILARITY_CAP = 1e6       # distinctiveness when no pair shows any similarity

METRIC_NAMES = (
    "texturedness",
    "dissimilarity",
    "motion",
    "stability",
    "spatial_density",
    "distinctiveness",
    "repeatability",
)


@dataclass(frozen=True)
class MetricVector:
    """Raw values of the seven metrics for one extractor on one frame."""

    m1: float
    m2: float
    m3: float
    m4: float
    m5: float
    m6: float
    m7: float
    frame_id: int = 0
    extractor: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        vals = self.values()
        if not np.isfinite(vals).all():
            raise ValueError(f"metrics must be finite, got {vals}")
        if not (0.0 <= self.m4 <= 1.0 and 0.0 <= self.m7 <= 1.0):
            raise ValueError(f"m4 and m7 must lie in [0, 1], got {self.m4}, {self.m7}")
        if self.m5 < 0.0:
            raise ValueError(f"m5 must be non-negative, got {self.m5}")

    def values(self) -> np.ndarray:
        return np.array([self.m1, self.m2, self.m3, self.m4, self.m5, self.m6, self.m7])


@dataclass(frozen=True, eq=False)
class NormalizedMetricVector:
    """Min-max normalized metrics, each component in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (7,):
            raise ValueError(f"expected 7 components, got shape {v.shape}")
        if (v < -1e-12).any() or (v > 1.0 + 1e-12).any():
            raise ValueError(f"normalized components must lie in [0, 1], got {v}")
        v = np.clip(v, 0.0, 1.0)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormalizedMetricVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def mean(self) -> float:
        return float(self.values.mean())


# --- individual metrics -------------------------------------------------------

def texturedness(img: GrayImage, fs: FeatureSet) -> float:
    """Mean, over keypoints, of the root summed squared intensity deviation
    on the 9x9 patch around each keypoint. Empty set gives 0."""
    if len(fs) == 0:
        return 0.0
    total = 0.0
    for kp in fs.keypoints:
        _, ssd = patch_stats(img, (kp.x, kp.y), TEXTURE_PATCH_RADIUS)
        total += float(np.sqrt(ssd))
    return total / len(fs)


def _dissimilarity_at(img: GrayImage, x: float, y: float) -> float:
    cx, cy = int(round(x)), int(round(y))
    ro = DISSIM_OUTER_RADIUS
    ri = DISSIM_INNER_RADIUS
    y0, y1 = max(0, cy - ro), min(img.height, cy + ro + 1)
    x0, x1 = max(0, cx - ro), min(img.width, cx + ro + 1)
    patch = img.data[y0:y1, x0:x1]
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inner = (np.abs(xx - cx) <= ri) & (np.abs(yy - cy) <= ri)
    ring = patch[~inner]
    ring_mean = float(ring.mean()) if ring.size else 0.0
    return float(np.abs(patch[inner] - ring_mean).sum())


def dissimilarity(img: GrayImage, fs: FeatureSet) -> float:
    """Mean, over keypoints, of the summed absolute difference between the 5x5
    feature patch and the mean intensity of the surrounding 11x11 ring."""
    if len(fs) == 0:
        return 0.0
    return sum(_dissimilarity_at(img, kp.x, kp.y) for kp in fs.keypoints) / len(fs)


def _mean_displacement(prev: FeatureSet, curr: FeatureSet, pairs) -> float:
    if not pairs:
        return 0.0
    total = 0.0
    for i, j, _ in pairs:
        kp_prev = prev.keypoints[i]
        kp_curr = curr.keypoints[j]
        total += float(np.hypot(kp_curr.x - kp_prev.x, kp_curr.y - kp_prev.y))
    return total / len(pairs)


def motion(prev: FeatureSet, curr: FeatureSet) -> float:
    """Mean displacement of matched features between two frames; 0 if nothing
    matches."""
    return _mean_displacement(prev, curr, match(prev, curr))


def _stable_count(window: list[FeatureSet]) -> tuple[int, int]:
    """(# persistent features in the latest frame, total features there)."""
    latest = window[-1]
    previous = window[:-1]
    need = -(-len(previous) // 2)  # ceil((W-1)/2)
    counts = np.zeros(len(latest), dtype=np.intp)
    for prev in previous:
        for _, j, _ in match(prev, latest):
            counts[j] += 1
    return int((counts >= need).sum()), len(latest)


def stability(window: list[FeatureSet]) -> float:
    """Share of the latest frame's features re-found in at least half of the
    previous frames in the window."""
    if len(window) < 2:
        raise ValueError(f"stability needs a window of at least 2 frames, got {len(window)}")
    stable, total = _stable_count(window)
    if total == 0:
        return 0.0
    return stable / total


def spatial_density(fs: FeatureSet, img: GrayImage) -> float:
    """Features per kilopixel of their bounding box; degenerate boxes fall back
    to the feature count."""
    if len(fs) == 0:
        return 0.0
    xs = np.array([kp.x for kp in fs.keypoints])
    ys = np.array([kp.y for kp in fs.keypoints])
    area = float((xs.max() - xs.min()) * (ys.max() - ys.min()))
    if area <= 0.0:
        return float(len(fs))
    return len(fs) / (area / DENSITY_UNIT)


def _similarity_sum(fs: FeatureSet) -> float:
    dist = distance_matrix(fs, fs)
    if fs.extractor is ExtractorKind.CORNER_BINARY:
        sim = 1.0 - dist / 256.0
    else:
        sim = 1.0 / (1.0 + dist)
    np.fill_diagonal(sim, 0.0)
    return float(sim.sum())


def distinctiveness(fs: FeatureSet) -> float:
    """Inverse of the total pairwise descriptor similarity, capped at
    SIMILARITY_CAP; a single feature scores 1.0 by convention."""
    if len(fs) <= 1:
        return 1.0 if len(fs) == 1 else 0.0
    total = _similarity_sum(fs)
    if total <= 1.0 / SIMILARITY_CAP:
        return SIMILARITY_CAP
    return min(1.0 / total, SIMILARITY_CAP)


def repeatability(prev: FeatureSet, curr: FeatureSet) -> float:
    """Share of the current frame's features matched in the previous frame."""
    if len(curr) == 0:
        return 0.0
    return len(match(prev, curr)) / len(curr)


# --- aggregation ---------------------------------------------------------------

def evaluate_all(
    history: list[FeatureSet],
    img: GrayImage,
    *,
    window: int = STABILITY_WINDOW,
    tag: str | None = None,
) -> MetricVector:
    """All seven metrics for the newest FeatureSet in `history`.

    The temporal metrics (motion, stability, repeatability) use the preceding
    entries; with fewer than two frames of history they are 0 and flagged.
    Matches are computed once per (previous, latest) pair and shared.
    """
    if not history:
        raise ValueError("history must contain at least the current FeatureSet")
    curr = history[-1]
    flags: set[str] = set()

    m1 = texturedness(img, curr)
    m2 = dissimilarity(img, curr)

    if len(curr) == 0:
        flags.add("empty-features")

    if len(history) < 2:
        m3 = m4 = m7 = 0.0
        flags.add("short-history")
    else:
        recent = history[-window:]
        pair_matches = {}
        for k, prev in enumerate(recent[:-1]):
            if len(prev) and len(curr):
                pair_matches[k] = match(prev, curr)
            else:
                pair_matches[k] = []
        last = pair_matches[len(recent) - 2]
        m3 = _mean_displacement(recent[-2], curr, last)
        if not last:
            flags.add("no-matches")
        m7 = len(last) / len(curr) if len(curr) else 0.0
        need = -(-(len(recent) - 1) // 2)
        counts = np.zeros(len(curr), dtype=np.intp)
        for k in pair_matches:
            for _, j, _ in pair_matches[k]:
                counts[j] += 1
        m4 = float((counts >= need).sum()) / len(curr) if len(curr) else 0.0

    m5 = spatial_density(curr, img)
    if len(curr) <= 1:
        flags.add("degenerate-area")
    else:
        xs = [kp.x for kp in curr.keypoints]
        ys = [kp.y for kp in curr.keypoints]
        if (max(xs) - min(xs)) * (max(ys) - min(ys)) <= 0.0:
            flags.add("degenerate-area")

    m6 = distinctiveness(curr)
    if len(curr) == 1:
        flags.add("single-feature")
    elif len(curr) > 1 and m6 >= SIMILARITY_CAP:
        flags.add("similarity-cap")

    return MetricVector(
        m1=m1, m2=m2, m3=m3, m4=m4, m5=m5, m6=m6, m7=m7,
        frame_id=curr.frame_id,
        extractor=tag if tag is not None else curr.extractor.value,
        flags=tuple(sorted(flags)),
    )


def normalize(vectors: list[MetricVector]) -> list[NormalizedMetricVector]:
    """Per-component min-max over the candidates on one frame; components that
    are equal across all candidates map to 0.5."""
    if not vectors:
        return []
    raw = np.stack([v.values() for v in vectors])
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    out = np.full_like(raw, 0.5)
    varying = span > 0.0
    out[:, varying] = (raw[:, varying] - lo[varying]) / span[varying]
    return [NormalizedMetricVector(values=row) for row in out]


# --- CSV export ------------------------------------------------------------------

METRICS_CSV_HEADER = "frame_id,extractor,m1,m2,m3,m4,m5,m6,m7,flags"


def metrics_csv_row(v: MetricVector) -> str:
    vals = ",".join(repr(float(x)) for x in v.values())
    return f"{v.frame_id},{v.extractor},{vals},{'|'.join(v.flags)}"
