"""Evaluation tooling: trajectory error with rigid alignment, synthetic scene
sequences with controllable conditions, match/selection reports and latency
measurement.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .dsl import EnvConditions
from .extractors import (
    DEFAULT_PARAMS,
    ExtractorKind,
    ParamSet,
    extract,
    match,
)
from .fitness import (
    CANDIDATE_ORDER,
    Decision,
    default_adjustment_table,
    default_weight_function,
    select_alpha,
    tune_theta,
)
from .image import GrayImage, blur_array
from .metrics import NormalizedMetricVector, evaluate_all

# Ground-truth association: nearest timestamps within this many seconds.
ASSOC_WINDOW_S = 0.020

SYNTH_FPS = 30.0
CHECKER_PERIOD = 16      # tile period in pixels
CHECKER_SEAM = 2         # light seam width between tiles
BLOB_SPACING = 24        # blob lattice period in pixels
BLOB_SIGMA = 4.0
SPOT_RADIUS = 3          # reflectance glint radius
SPOT_VALUE = 250.0

SCENE_KINDS = ("checkerboard", "blob-field", "gradient-ramp", "noise")


class TrajectoryAssociationError(ValueError):
    """Too few timestamp associations to evaluate a trajectory pair."""

    def __init__(self, n_gt: int, n_est: int, n_assoc: int):
        super().__init__(
            f"need at least 2 associated poses, got {n_assoc} "
            f"(gt has {n_gt}, est has {n_est})"
        )
        self.n_gt = n_gt
        self.n_est = n_est
        self.n_assoc = n_assoc


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered poses: timestamps, positions and unit quaternions (xyzw)."""

    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        p = np.asarray(self.positions, dtype=np.float64)
        q = np.asarray(self.quaternions, dtype=np.float64)
        if t.ndim != 1 or p.shape != (t.size, 3) or q.shape != (t.size, 4):
            raise ValueError(
                f"inconsistent trajectory shapes: {t.shape}, {p.shape}, {q.shape}"
            )
        if t.size and (np.diff(t) <= 0).any():
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if t.size and (np.abs(norms - 1.0) > 1e-6).any():
            raise ValueError("quaternions must be unit-norm within 1e-6")
        for name, arr in (("times", t), ("positions", p), ("quaternions", q)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.times.size)


def load_trajectory(path) -> Trajectory:
    """Whitespace-separated `timestamp tx ty tz qx qy qz qw` lines."""
    times, positions, quats = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            vals = [float(v) for v in parts]
            times.append(vals[0])
            positions.append(vals[1:4])
            quats.append(vals[4:8])
    return Trajectory(
        times=np.array(times),
        positions=np.array(positions).reshape(-1, 3),
        quaternions=np.array(quats).reshape(-1, 4),
    )


def save_trajectory(traj: Trajectory, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        for t, p, q in zip(traj.times, traj.positions, traj.quaternions):
            fields = [t, *p, *q]
            fh.write(" ".join(repr(float(v)) for v in fields) + "\n")


def associate(gt: Trajectory, est: Trajectory, max_dt: float = ASSOC_WINDOW_S):
    """One-to-one nearest-timestamp pairing within max_dt, greediest first."""
    if len(gt) == 0 or len(est) == 0:
        return []
    potential = []
    for i, t in enumerate(gt.times):
        j = int(np.searchsorted(est.times, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(est):
                dt = abs(float(est.times[jj]) - float(t))
                if dt <= max_dt:
                    potential.append((dt, i, jj))
    potential.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for _, i, j in potential:
        if i not in used_i and j not in used_j:
            used_i.add(i)
            used_j.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with R @ src + t ~= dst (rotation + translation, no
    scale), via the orthogonal-Procrustes closed form."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (dst - dc).T @ (src - sc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    t = dc - r @ sc
    return r, t


def ate(gt: Trajectory, est: Trajectory, align: str = "rigid") -> float:
    """Root-mean-square position error over associated poses.

    With align="rigid" the estimate is first mapped onto the ground truth by
    the least-squares rigid transform; "none" compares raw positions.
    """
    if align not in ("none", "rigid"):
        raise ValueError(f"align must be 'none' or 'rigid', got {align!r}")
    pairs = associate(gt, est)
    if len(pairs) < 2:
        raise TrajectoryAssociationError(len(gt), len(est), len(pairs))
    p = gt.positions[[i for i, _ in pairs]]
    q = est.positions[[j for _, j in pairs]]
    if align == "rigid":
        r, t = rigid_align(q, p)
        q = q @ r.T + t
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


# --- synthetic scenes ------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for a short test sequence.

    blur_sigma doubles as the motion/defocus proxy; motion_per_frame is the
    planted translation of the world pattern between consecutive frames.
    """

    kind: str = "checkerboard"
    brightness: float = 0.8
    contrast: float = 0.8
    blur_sigma: float = 0.0
    reflectance_spots: int = 0
    size: int = 128
    motion_per_frame: tuple[float, float] = (0.0, 0.0)
    n_frames: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if not (0.0 <= self.brightness <= 1.0 and 0.0 <= self.contrast <= 1.0):
            raise ValueError("brightness and contrast must lie in [0, 1]")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be non-negative, got {self.blur_sigma}")
        if self.size < 64:
            raise ValueError(f"size must be at least 64, got {self.size}")
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be at least 1, got {self.n_frames}")
        if self.reflectance_spots < 0:
            raise ValueError("reflectance_spots must be non-negative")


def conditions_for_spec(spec: SceneSpec) -> EnvConditions:
    """Condition labels implied by a scene recipe.

    Desk-scale sequences are nominally an indoor human viewpoint; lighting
    follows brightness, motion follows the blur proxy, texture follows the
    pattern kind.
    """
    return EnvConditions(
        scene="indoor",
        agent="human",
        lighting="dark" if spec.brightness < 0.3 else "bright",
        motion="fast" if spec.blur_sigma > 1.5 else "slow",
        reflective="yes" if spec.reflectance_spots > 0 else "no",
        texture="high" if spec.kind == "checkerboard" else "low",
    )


def _checker_pattern(xx: np.ndarray, yy: np.ndarray, rng_seed: int) -> np.ndarray:
    """Shaded tile grid: dark squares with seeded per-tile shades separated by
    light seams, so corners are strong and locally distinctive."""
    ix = np.floor(xx / CHECKER_PERIOD).astype(np.int64)
    iy = np.floor(yy / CHECKER_PERIOD).astype(np.int64)
    rng = np.random.default_rng(rng_seed)
    shade_table = rng.uniform(0.0, 0.45, size=(64, 64))
    shades = shade_table[iy % 64, ix % 64]
    on_seam = ((xx - ix * CHECKER_PERIOD) >= CHECKER_PERIOD - CHECKER_SEAM) | (
        (yy - iy * CHECKER_PERIOD) >= CHECKER_PERIOD - CHECKER_SEAM
    )
    return np.where(on_seam, 1.0, shades)


def _blob_pattern(xx: np.ndarray, yy: np.ndarray, rng_seed: int) -> np.ndarray:
    """Gaussian bumps on a jittered lattice with seeded amplitudes."""
    rng = np.random.default_rng(rng_seed)
    jitter = rng.uniform(-6.0, 6.0, size=(32, 32, 2))
    amp = rng.uniform(0.55, 1.0, size=(32, 32))
    out = np.zeros_like(xx, dtype=np.float64)
    ix0 = int(np.floor(xx.min() / BLOB_SPACING)) - 1
    ix1 = int(np.floor(xx.max() / BLOB_SPACING)) + 2
    iy0 = int(np.floor(yy.min() / BLOB_SPACING)) - 1
    iy1 = int(np.floor(yy.max() / BLOB_SPACING)) + 2
    for iy in range(iy0, iy1):
        for ix in range(ix0, ix1):
            cx = ix * BLOB_SPACING + BLOB_SPACING / 2 + jitter[iy % 32, ix % 32, 0]
            cy = iy * BLOB_SPACING + BLOB_SPACING / 2 + jitter[iy % 32, ix % 32, 1]
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            out += amp[iy % 32, ix % 32] * np.exp(-d2 / (2.0 * BLOB_SIGMA**2))
    return np.clip(out, 0.0, 1.0)


def _ramp_pattern(xx: np.ndarray, yy: np.ndarray, period: float) -> np.ndarray:
    return ((xx + yy) % period) / period


def render_frame(spec: SceneSpec, offset: tuple[float, float], shape: tuple[int, int]) -> GrayImage:
    """One frame of the world pattern at the given translation offset."""
    h, w = shape
    ox, oy = offset
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        total_x = spec.motion_per_frame[0] * (spec.n_frames - 1)
        total_y = spec.motion_per_frame[1] * (spec.n_frames - 1)
        min_ox, max_ox = min(0.0, total_x), max(0.0, total_x)
        min_oy, max_oy = min(0.0, total_y), max(0.0, total_y)
        world = rng.uniform(
            0.0, 1.0,
            size=(h + int(math.ceil(max_oy - min_oy)) + 1,
                  w + int(math.ceil(max_ox - min_ox)) + 1),
        )
        sy = int(round(oy - min_oy))
        sx = int(round(ox - min_ox))
        p = world[sy : sy + h, sx : sx + w]
    elif spec.kind == "checkerboard":
        p = _checker_pattern(xx + ox, yy + oy, spec.seed)
    elif spec.kind == "blob-field":
        p = _blob_pattern(xx + ox, yy + oy, spec.seed)
    else:
        p = _ramp_pattern(xx + ox, yy + oy, period=2.0 * spec.size)
    vals = 255.0 * spec.brightness * (0.5 + spec.contrast * (p - 0.5))
    vals = np.clip(vals, 0.0, 255.0)
    if spec.reflectance_spots > 0:
        rng = np.random.default_rng(spec.seed + 1)
        for _ in range(spec.reflectance_spots):
            cx = rng.uniform(SPOT_RADIUS, w - SPOT_RADIUS)
            cy = rng.uniform(SPOT_RADIUS, h - SPOT_RADIUS)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            vals = np.where(d2 <= SPOT_RADIUS**2, SPOT_VALUE, vals)
    if spec.blur_sigma > 0:
        vals = np.clip(blur_array(vals, spec.blur_sigma), 0.0, 255.0)
    return GrayImage(vals)


@dataclass(frozen=True)
class SynthSequence:
    frames: tuple[GrayImage, ...]
    env: EnvConditions
    shifts: np.ndarray          # cumulative planted (dx, dy) per frame
    trajectory: Trajectory      # planted ground truth


def synth_sequence(spec: SceneSpec) -> SynthSequence:
    """Deterministic frames + condition labels + planted ground truth."""
    frames = []
    shifts = np.zeros((spec.n_frames, 2))
    for f in range(spec.n_frames):
        offset = (spec.motion_per_frame[0] * f, spec.motion_per_frame[1] * f)
        shifts[f] = offset
        frames.append(render_frame(spec, offset, (spec.size, spec.size)))
    times = np.arange(spec.n_frames) / SYNTH_FPS
    positions = np.column_stack([shifts, np.zeros(spec.n_frames)])
    quats = np.tile([0.0, 0.0, 0.0, 1.0], (spec.n_frames, 1))
    return SynthSequence(
        frames=tuple(frames),
        env=conditions_for_spec(spec),
        shifts=shifts,
        trajectory=Trajectory(times=times, positions=positions, quaternions=quats),
    )


# --- reports -----------------------------------------------------------------------

@dataclass(frozen=True)
class MatchReportRow:
    config: str
    avg_features: float
    avg_matches: float


MATCHES_CSV_HEADER = "config,avg_features,avg_matches"


def report_matches(
    frames, configs: list[tuple[str, ExtractorKind, ParamSet]]
) -> list[MatchReportRow]:
    """Average per-frame feature count and consecutive-frame match count for
    each named extractor configuration."""
    rows = []
    for name, kind, params in configs:
        sets = [extract(frame, kind, params, frame_id=i) for i, frame in enumerate(frames)]
        feats = float(np.mean([len(s) for s in sets])) if sets else 0.0
        if len(sets) >= 2:
            matches = float(np.mean([len(match(a, b)) for a, b in zip(sets, sets[1:])]))
        else:
            matches = 0.0
        rows.append(MatchReportRow(config=name, avg_features=feats, avg_matches=matches))
    return rows


SELECTION_CSV_HEADER = "candidate,frames"


def report_selection(decisions: list[Decision]) -> dict[str, int]:
    """Frame counts per candidate, zero-filled so the bins always partition."""
    counts = {c.name: 0 for c in CANDIDATE_ORDER}
    for d in decisions:
        counts[d.alpha_star.name] += 1
    return counts


# --- latency --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    """Medians plus median absolute deviations over the measured iterations."""

    param_selection_us: float
    param_selection_mad_us: float
    frame_processing_ms: float
    frame_processing_mad_ms: float
    extractor_selection_us: float
    extractor_selection_mad_us: float
    iterations: int


LATENCY_CSV_HEADER = "task,median,mad,unit"


def latency_csv_rows(rep: LatencyReport) -> list[str]:
    return [
        f"parameter-selection,{rep.param_selection_us!r},{rep.param_selection_mad_us!r},us",
        f"frame-processing,{rep.frame_processing_ms!r},{rep.frame_processing_mad_ms!r},ms",
        f"extractor-selection,{rep.extractor_selection_us!r},{rep.extractor_selection_mad_us!r},us",
    ]


def _time_task(fn, iterations: int, warmup: int) -> tuple[float, float]:
    """(median, median absolute deviation) of fn's wall time in seconds."""
    for _ in range(warmup):
        fn()
    samples = np.empty(iterations)
    for i in range(iterations):
        start = time.perf_counter()
        fn()
        samples[i] = time.perf_counter() - start
    med = float(np.median(samples))
    mad = float(np.median(np.abs(samples - med)))
    return med, mad


def measure_latency(iterations: int = 30, warmup: int = 5) -> LatencyReport:
    """Wall-clock medians for the three decision-loop tasks, single-threaded.

    Frame processing is one candidate's extract + metric evaluation on a
    640x480 frame with one frame of history; the two selection tasks run on
    precomputed inputs so they isolate the decision arithmetic.
    """
    spec = SceneSpec(kind="checkerboard", size=128, seed=7)
    frame = render_frame(spec, (0.0, 0.0), (480, 640))
    prev = render_frame(spec, (2.0, 1.0), (480, 640))
    env = conditions_for_spec(spec)
    table = default_adjustment_table()
    weights = default_weight_function()
    dsl_factors = {"nf": 1.2, "sf": 1.0, "nl": 1.0, "st": 0.8}

    def task_param_selection():
        tune_theta(DEFAULT_PARAMS, env, table, dsl_factors)

    rng = np.random.default_rng(11)
    nmvs = [
        NormalizedMetricVector(values=rng.uniform(0.0, 1.0, 7)) for _ in CANDIDATE_ORDER
    ]
    candidates = list(zip(CANDIDATE_ORDER, nmvs))

    def task_extractor_selection():
        select_alpha(candidates, env, weights)

    prev_fs = extract(prev, ExtractorKind.CORNER_BINARY, DEFAULT_PARAMS, frame_id=0)

    def task_frame_processing():
        fs = extract(frame, ExtractorKind.CORNER_BINARY, DEFAULT_PARAMS, frame_id=1)
        evaluate_all([prev_fs, fs], frame, window=2)

    sel_med, sel_mad = _time_task(task_param_selection, iterations, warmup)
    ext_med, ext_mad = _time_task(task_extractor_selection, iterations, warmup)
    frm_med, frm_mad = _time_task(task_frame_processing, iterations, warmup)
    return LatencyReport(
        param_selection_us=sel_med * 1e6,
        param_selection_mad_us=sel_mad * 1e6,
        frame_processing_ms=frm_med * 1e3,
        frame_processing_mad_ms=frm_mad * 1e3,
        extractor_selection_us=ext_med * 1e6,
        extractor_selection_mad_us=ext_mad * 1e6,
        iterations=iterations,
    )
