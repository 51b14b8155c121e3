"""The per-frame decision procedure: condition-driven parameter tuning and
weighted-metric extractor selection.

Each parameter is scaled by the product of one factor per condition field
(from the adjustment table) times the multiplier composed by the decision
program, then clamped back into the legal parameter range. Candidates are the
two extractor families crossed with default/dynamic parameters; each is scored
with a condition-weighted sum of normalized metrics and the argmax wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .dsl import CONDITION_VOCAB, PARAM_NAMES, DslProgram, EnvConditions, evaluate
from .extractors import (
    DEFAULT_PARAMS,
    ExtractorKind,
    FeatureSet,
    ParamSet,
    extract,
)
from .metrics import MetricVector, NormalizedMetricVector, evaluate_all, normalize

# Individual adjustment factors are clamped here to stop runaway products
# across the six condition fields.
FACTOR_MIN = 0.1
FACTOR_MAX = 10.0

# Tuned scale factors may not collapse below a usable pyramid step.
SF_TUNED_MIN = 1.05
SF_MAX = 4.0
NL_MAX = 16

N_METRICS = 7

ADJUST_MAGIC = "#nfex-adjust v1"
WEIGHTS_MAGIC = "#nfex-weights v1"


class ParamMode(Enum):
    DEFAULT = "def"
    DYNAMIC = "dyn"


@dataclass(frozen=True)
class Candidate:
    """One selectable configuration: an extractor family plus a parameter mode."""

    kind: ExtractorKind
    mode: ParamMode

    @property
    def name(self) -> str:
        return f"{self.kind.value}-{self.mode.value}"


# Fixed candidate order; also the tie-break order for selection.
CANDIDATE_ORDER = (
    Candidate(ExtractorKind.CORNER_BINARY, ParamMode.DYNAMIC),
    Candidate(ExtractorKind.BLOB_HISTOGRAM, ParamMode.DYNAMIC),
    Candidate(ExtractorKind.CORNER_BINARY, ParamMode.DEFAULT),
    Candidate(ExtractorKind.BLOB_HISTOGRAM, ParamMode.DEFAULT),
)

CANDIDATES_BY_NAME = {c.name: c for c in CANDIDATE_ORDER}


def _clamp_factor(f: float) -> float:
    return min(FACTOR_MAX, max(FACTOR_MIN, float(f)))


class AdjustmentTable:
    """Per-(parameter, condition) multiplicative factors; absent entries are 1."""

    def __init__(self):
        self._factors: dict[tuple[str, str, str], float] = {}

    def set_factor(self, param: str, cfield: str, value: str, factor: float) -> None:
        if param not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {param!r}")
        if cfield not in CONDITION_VOCAB or value not in CONDITION_VOCAB[cfield]:
            raise ValueError(f"unknown condition {cfield}={value!r}")
        if not (factor > 0.0 and math.isfinite(factor)):
            raise ValueError(f"factor must be positive and finite, got {factor}")
        self._factors[(param, cfield, value)] = _clamp_factor(factor)

    def factor(self, param: str, cfield: str, value: str) -> float:
        return self._factors.get((param, cfield, value), 1.0)

    def weight(self, param: str, env: EnvConditions) -> float:
        """Product of this parameter's factors over all six condition fields."""
        w = 1.0
        for cfield, value in env.as_dict().items():
            w *= self.factor(param, cfield, value)
        return w

    def items(self):
        return self._factors.items()

    def dump(self) -> str:
        lines = [ADJUST_MAGIC]
        for (param, cfield, value), f in self._factors.items():
            lines.append(f"adjust {param} {cfield}={value} {f!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "AdjustmentTable":
        lines = text.splitlines()
        if not lines or lines[0].strip() != ADJUST_MAGIC:
            raise ValueError(f"not an adjustment table (expected {ADJUST_MAGIC!r} header)")
        table = cls()
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                tag, param, cond, factor = line.split()
                if tag != "adjust":
                    raise ValueError(f"unknown directive {tag!r}")
                cfield, _, value = cond.partition("=")
                table.set_factor(param, cfield, value, float(factor))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
        return table

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dump())

    @classmethod
    def load(cls, path) -> "AdjustmentTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())


def default_adjustment_table() -> AdjustmentTable:
    """Hand-seeded factors: each entry states the condition it compensates."""
    t = AdjustmentTable()
    t.set_factor("nf", "lighting", "dark", 1.5)      # few usable landmarks; cast a wider net
    t.set_factor("st", "lighting", "dark", 0.5)      # contrast deltas shrink with brightness
    t.set_factor("st", "motion", "fast", 1.25)       # blur breeds unstable keypoints; be stricter
    t.set_factor("nf", "texture", "low", 1.3)        # sparse texture needs a bigger budget
    t.set_factor("st", "reflective", "yes", 1.2)     # glints fake features; raise the bar
    t.set_factor("nl", "scene", "outdoor", 1.25)     # outdoor depth range spans more scales
    return t


class WeightFunction:
    """Condition-dependent positive weights for the seven metrics.

    Each metric's weight starts at `scale` and is multiplied by one
    contribution per matching (field, value) entry.
    """

    def __init__(self, scale: float = 1.0):
        if not (scale > 0.0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive and finite, got {scale}")
        self.scale = float(scale)
        self._mult: dict[tuple[int, str, str], float] = {}

    def set_multiplier(self, metric: int, cfield: str, value: str, mult: float) -> None:
        if not (1 <= metric <= N_METRICS):
            raise ValueError(f"metric index must be 1..{N_METRICS}, got {metric}")
        if cfield not in CONDITION_VOCAB or value not in CONDITION_VOCAB[cfield]:
            raise ValueError(f"unknown condition {cfield}={value!r}")
        if not (mult > 0.0 and math.isfinite(mult)):
            raise ValueError(f"multiplier must be positive and finite, got {mult}")
        self._mult[(metric, cfield, value)] = float(mult)

    def rho(self, env: EnvConditions) -> np.ndarray:
        """The seven metric weights under the given conditions."""
        out = np.full(N_METRICS, self.scale, dtype=np.float64)
        d = env.as_dict()
        for (metric, cfield, value), mult in self._mult.items():
            if d[cfield] == value:
                out[metric - 1] *= mult
        return out

    def scaled(self, c: float) -> "WeightFunction":
        """A copy with every resulting weight multiplied by c."""
        out = WeightFunction(scale=self.scale * c)
        out._mult = dict(self._mult)
        return out

    def items(self):
        return self._mult.items()

    def dump(self) -> str:
        lines = [WEIGHTS_MAGIC, f"scale {self.scale!r}"]
        for (metric, cfield, value), m in self._mult.items():
            lines.append(f"weight m{metric} {cfield}={value} {m!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "WeightFunction":
        lines = text.splitlines()
        if not lines or lines[0].strip() != WEIGHTS_MAGIC:
            raise ValueError(f"not a weight table (expected {WEIGHTS_MAGIC!r} header)")
        wf = cls()
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                parts = line.split()
                if parts[0] == "scale":
                    wf.scale = float(parts[1])
                elif parts[0] == "weight":
                    metric = int(parts[1].lstrip("m"))
                    cfield, _, value = parts[2].partition("=")
                    wf.set_multiplier(metric, cfield, value, float(parts[3]))
                else:
                    raise ValueError(f"unknown directive {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
        return wf

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dump())

    @classmethod
    def load(cls, path) -> "WeightFunction":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())


def default_weight_function() -> WeightFunction:
    """Hand-seeded emphasis: temporal consistency matters more in the dark,
    raw displacement matters less under fast motion, and so on."""
    wf = WeightFunction()
    wf.set_multiplier(4, "lighting", "dark", 1.5)     # stability
    wf.set_multiplier(7, "lighting", "dark", 1.5)     # repeatability
    wf.set_multiplier(3, "motion", "fast", 0.5)       # displacement is mostly noise when blurred
    wf.set_multiplier(6, "reflective", "yes", 1.5)    # distinctiveness filters glint twins
    wf.set_multiplier(1, "texture", "low", 1.5)       # texture is scarce; value it
    return wf


# --- parameter tuning ----------------------------------------------------------

def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tune_theta(
    theta: ParamSet,
    env: EnvConditions,
    table: AdjustmentTable,
    dsl_factors: dict[str, float] | None = None,
) -> ParamSet:
    """Scale each parameter by its composed condition weight and clamp.

    The weight is the product of the table's per-field factors and the
    decision program's multiplier. Counts (nf, nl) round half-up; sf and st
    stay real. Clamping guarantees the result is a valid ParamSet.
    """
    dsl_factors = dsl_factors or {}
    w = {p: table.weight(p, env) * dsl_factors.get(p, 1.0) for p in PARAM_NAMES}
    nf = max(1, _half_up(w["nf"] * theta.nf))
    nl = min(NL_MAX, max(1, _half_up(w["nl"] * theta.nl)))
    sf = min(SF_MAX, max(SF_TUNED_MIN, w["sf"] * theta.sf))
    st = max(0.0, w["st"] * theta.st)
    return ParamSet(nf=nf, sf=sf, nl=nl, st=st)


def fitness_theta(
    theta_prime: ParamSet,
    env: EnvConditions,
    predictor=None,
    metrics: NormalizedMetricVector | None = None,
) -> float:
    """Diagnostic quality score for a tuned parameter set.

    With a trained predictor (anything exposing predict(env, theta) -> float)
    the learned estimate is returned; otherwise the mean of the normalized
    metric components the parameters achieved on the current frame, or the
    0.5 degenerate convention when no metrics are available.
    """
    if predictor is not None:
        return float(predictor.predict(env, theta_prime))
    if metrics is not None:
        return metrics.mean()
    return 0.5


# --- selection -------------------------------------------------------------------

@dataclass(frozen=True)
class Decision:
    """Outcome of scoring the candidates on one frame."""

    alpha_star: Candidate
    theta_prime: dict[Candidate, ParamSet]
    scores: dict[Candidate, float]
    frame_id: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.alpha_star not in self.scores:
            raise ValueError("alpha_star must be one of the scored candidates")
        values = list(self.scores.values())
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"scores must be finite, got {self.scores}")
        if self.scores[self.alpha_star] < max(values):
            raise ValueError("alpha_star must attain the maximum score")


def score_extractor(
    metrics: NormalizedMetricVector, env: EnvConditions, weights: WeightFunction
) -> float:
    """Condition-weighted sum of the normalized metrics."""
    return float(np.dot(weights.rho(env), metrics.values))


def _order_index(c: Candidate) -> int:
    return CANDIDATE_ORDER.index(c)


def select_alpha(
    candidates: list[tuple[Candidate, NormalizedMetricVector]],
    env: EnvConditions,
    weights: WeightFunction,
    *,
    theta_prime: dict[Candidate, ParamSet] | None = None,
    frame_id: int = 0,
    flags: tuple[str, ...] = (),
) -> Decision:
    """Argmax of score_extractor over the candidates; exact ties fall back to
    the fixed candidate order."""
    if not candidates:
        raise ValueError("need at least one candidate")
    scores = {cand: score_extractor(nmv, env, weights) for cand, nmv in candidates}
    best = max(scores.values())
    winner = min((c for c in scores if scores[c] == best), key=_order_index)
    return Decision(
        alpha_star=winner,
        theta_prime=dict(theta_prime or {}),
        scores=scores,
        frame_id=frame_id,
        flags=flags,
    )


# --- per-frame engine ---------------------------------------------------------------

@dataclass
class EngineConfig:
    """Everything run_frame needs besides the frame itself."""

    program: DslProgram
    table: AdjustmentTable = field(default_factory=AdjustmentTable)
    weights: WeightFunction = field(default_factory=default_weight_function)
    base_params: ParamSet = DEFAULT_PARAMS
    mode: str = "exhaustive"  # or "fast"
    window: int = 5

    def __post_init__(self):
        if self.mode not in ("exhaustive", "fast"):
            raise ValueError(f"mode must be 'exhaustive' or 'fast', got {self.mode!r}")
        if self.window < 2:
            raise ValueError(f"window must be at least 2, got {self.window}")


class Engine:
    """Stateful per-frame loop: evaluate the program, tune parameters, extract
    with each candidate, score and select.

    Exhaustive mode extracts with all four candidates every frame, matching
    the selection-table semantics; fast mode extracts only the program's pick
    plus the incumbent, trading selection breadth for latency. Frames must be
    fed in sequence order because the temporal metrics consume history.
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        self.histories: dict[Candidate, list[FeatureSet]] = {c: [] for c in CANDIDATE_ORDER}
        self.incumbent: Candidate | None = None
        self.extraction_calls = 0
        self.metric_log: list[MetricVector] = []

    def _theta_for(self, cand: Candidate, theta_dyn: ParamSet) -> ParamSet:
        return theta_dyn if cand.mode is ParamMode.DYNAMIC else self.config.base_params

    def _active_candidates(self, dsl_kind: ExtractorKind | None) -> list[Candidate]:
        if self.config.mode == "exhaustive":
            return list(CANDIDATE_ORDER)
        picked = Candidate(dsl_kind, ParamMode.DYNAMIC) if dsl_kind is not None else None
        active = []
        for cand in (picked, self.incumbent):
            if cand is not None and cand not in active:
                active.append(cand)
        if not active:
            active.append(CANDIDATE_ORDER[0])
        return sorted(active, key=_order_index)

    def run_frame(self, img, env: EnvConditions, frame_id: int = 0):
        """Process one frame; returns (Decision, winning FeatureSet)."""
        cfg = self.config
        dsl_kind, dsl_factors = evaluate(cfg.program, env)
        theta_dyn = tune_theta(cfg.base_params, env, cfg.table, dsl_factors)
        active = self._active_candidates(dsl_kind)

        feature_sets: dict[Candidate, FeatureSet] = {}
        raw: list[MetricVector] = []
        theta_used: dict[Candidate, ParamSet] = {}
        for cand in active:
            theta = self._theta_for(cand, theta_dyn)
            theta_used[cand] = theta
            fs = extract(img, cand.kind, theta, frame_id=frame_id)
            feature_sets[cand] = fs
            hist = self.histories[cand][-(cfg.window - 1):] + [fs]
            raw.append(evaluate_all(hist, img, window=cfg.window, tag=cand.name))
            self.extraction_calls += 1
        self.metric_log.extend(raw)

        normalized = normalize(raw)
        degenerate = all(len(feature_sets[c]) == 0 for c in active)
        if degenerate:
            fallback = self.incumbent if self.incumbent in feature_sets else active[0]
            decision = Decision(
                alpha_star=fallback,
                theta_prime=theta_used,
                scores={c: 0.0 for c in active},
                frame_id=frame_id,
                flags=("degenerate-frame",),
            )
        else:
            decision = select_alpha(
                list(zip(active, normalized)),
                env,
                cfg.weights,
                theta_prime=theta_used,
                frame_id=frame_id,
            )

        for cand in active:
            hist = self.histories[cand]
            hist.append(feature_sets[cand])
            if len(hist) > cfg.window:
                del hist[: len(hist) - cfg.window]
        self.incumbent = decision.alpha_star
        return decision, feature_sets[decision.alpha_star]


def run_frame(img, env: EnvConditions, history, config: EngineConfig):
    """Single-shot functional form of Engine.run_frame.

    `history` is a mapping from Candidate to that candidate's previous
    FeatureSets (newest last); pass {} for the first frame.
    """
    engine = Engine(config)
    for cand, sets in (history or {}).items():
        engine.histories[cand] = list(sets)
    return engine.run_frame(img, env)


# --- decision log ----------------------------------------------------------------

DECISIONS_CSV_HEADER = (
    "frame_id,alpha_star,"
    + ",".join(f"score_{i + 1}" for i in range(len(CANDIDATE_ORDER)))
    + ",nf,sf,nl,st,flags"
)


def decision_csv_row(d: Decision) -> str:
    cells = [str(d.frame_id), d.alpha_star.name]
    for cand in CANDIDATE_ORDER:
        cells.append(repr(float(d.scores[cand])) if cand in d.scores else "")
    theta = d.theta_prime.get(d.alpha_star)
    if theta is None:
        cells.extend(["", "", "", ""])
    else:
        cells.extend([str(theta.nf), repr(theta.sf), str(theta.nl), repr(theta.st)])
    cells.append("|".join(d.flags))
    return ",".join(cells)


def parse_decision_row(row: str) -> tuple[int, str]:
    """(frame_id, alpha_star name) from one decision-log row."""
    parts = row.split(",")
    return int(parts[0]), parts[1]
