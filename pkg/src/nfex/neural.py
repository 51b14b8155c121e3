"""Learned side of the synthesis: a small MLP regressor for parameter quality,
a hybrid image+numeric classifier for extractor choice, z-score scaling, Adam
training loops and synthetic dataset generation.

Everything is dense numpy with hand-written backprop. The networks are tiny,
and the from-scratch path keeps training bit-reproducible under a fixed seed:
fixed He-uniform init, fixed shuffle sequence, fixed summation order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dsl import CONDITION_VOCAB, PARAM_NAMES, EnvConditions
from .extractors import ExtractorKind, ParamSet, extract
from .fitness import FACTOR_MAX, FACTOR_MIN, AdjustmentTable
from .metrics import evaluate_all, normalize

MODEL_MAGIC = "#nfex-model v1"

PROB_CLIP = 1e-7

# Theta grid used for dataset generation and table distillation.
DEFAULT_THETA_GRID: dict[str, tuple] = {
    "nf": (100, 250, 500, 1000),
    "sf": (1.1, 1.2, 1.5, 2.0),
    "nl": (2, 4, 8),
    "st": (5.0, 10.0, 20.0, 40.0),
}

# Neutral conditions used when distilling per-condition factors.
REFERENCE_ENV = EnvConditions(
    scene="indoor", agent="human", lighting="bright",
    motion="slow", reflective="no", texture="high",
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


# --- losses -------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Per-class binary cross-entropy, summed over classes and averaged over
    the batch (first axis). Probabilities are clipped away from {0, 1}."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    bce = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(bce.sum() / probs.shape[0])


def _cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(loss)/d(probs); zero where the clip saturates."""
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    grad = (-labels / p + (1.0 - labels) / (1.0 - p)) / probs.shape[0]
    inside = (probs > PROB_CLIP) & (probs < 1.0 - PROB_CLIP)
    return grad * inside


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --- feature scaling -----------------------------------------------------------

class Scaler:
    """Z-score normalization with population standard deviation.

    Zero-variance columns cannot be scaled; they are dropped and their indices
    recorded in `dropped`.
    """

    def __init__(self):
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None
        self.kept: np.ndarray | None = None

    @property
    def dropped(self) -> tuple[int, ...]:
        if self.kept is None:
            return ()
        return tuple(int(i) for i in np.nonzero(~self.kept)[0])

    def fit(self, data: np.ndarray) -> "Scaler":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"expected a non-empty 2-D matrix, got shape {data.shape}")
        self.mean = data.mean(axis=0)
        self.std = data.std(axis=0)
        self.kept = self.std > 1e-12
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ValueError("scaler is not fitted")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        out = (x[:, self.kept] - self.mean[self.kept]) / self.std[self.kept]
        return out[0] if single else out

    def fit_transform(self, data: np.ndarray) -> np.ndarray:
        return self.fit(data).transform(data)


# --- dense layers ---------------------------------------------------------------

def _he_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Mlp:
    """Fully-connected ReLU network; default shape is in -> 32 -> 16 -> 1."""

    def __init__(self, n_inputs: int, hidden: tuple[int, ...] = (32, 16),
                 n_outputs: int = 1, seed: int = 0):
        widths = (n_inputs, *hidden, n_outputs)
        if len(widths) < 2:
            raise ValueError("need at least one layer")
        rng = np.random.default_rng(seed)
        self.widths = widths
        self.weights = [
            _he_uniform(rng, widths[i], (widths[i], widths[i + 1]))
            for i in range(len(widths) - 1)
        ]
        self.biases = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward_cached(x)[0]

    def _forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        acts = [x]
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else z)
        return acts[-1], (acts, pre)

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients in params() order given d(loss)/d(output)."""
        acts, pre = cache
        grads: list[np.ndarray] = []
        delta = grad_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                delta = delta * (pre[i] > 0.0)
            grads.append(delta.sum(axis=0))          # bias
            grads.append(acts[i].T @ delta)          # weight
            delta = delta @ self.weights[i].T
        grads.reverse()
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return out[:, 0] if out.shape[1] == 1 else out


class Adam:
    """Standard Adam with bias correction; state is per-parameter."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1**self.t
        b2t = 1.0 - cfg.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + cfg.eps)


def train_mlp(
    features: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    *,
    hidden: tuple[int, ...] = (32, 16),
    stop_at_loss: float | None = None,
) -> tuple[Mlp, list[float]]:
    """Mini-batch Adam on mean squared error.

    Features must already be scaler-normalized. Returns the model and the
    full-dataset loss recorded after every epoch. Deterministic under a fixed
    seed. Raises TrainingDivergedError if the loss goes non-finite.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"feature/target row mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {x.shape[0]}")
    model = Mlp(x.shape[1], hidden=hidden, n_outputs=1, seed=cfg.seed)
    params = model.params()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            out, cache = model._forward_cached(x[idx])
            grad = 2.0 * (out - y[idx]) / out.size
            opt.step(params, model.backward(cache, grad))
        epoch_loss = mse_loss(model.forward(x)[:, 0], y[:, 0])
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        losses.append(epoch_loss)
        if stop_at_loss is not None and epoch_loss < stop_at_loss:
            break
    return model, losses


# --- hybrid classifier ------------------------------------------------------------

def _im2col(x: np.ndarray, k: int):
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    patches = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            patches[:, :, dy, dx] = x[:, :, dy : dy + oh, dx : dx + ow]
    return patches.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, xshape: tuple, k: int) -> np.ndarray:
    n, c, h, w = xshape
    oh, ow = h - k + 1, w - k + 1
    dpatches = dcols.reshape(n, c, k, k, oh, ow)
    dx = np.zeros(xshape, dtype=np.float64)
    for dy in range(k):
        for dxo in range(k):
            dx[:, :, dy : dy + oh, dxo : dxo + ow] += dpatches[:, :, dy, dxo]
    return dx


def _maxpool2(x: np.ndarray):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    xt = x[:, :, : oh * 2, : ow * 2].reshape(n, c, oh, 2, ow, 2)
    xt = xt.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    amax = xt.argmax(axis=-1)
    out = np.take_along_axis(xt, amax[..., None], axis=-1)[..., 0]
    return out, amax


def _maxpool2_back(dout: np.ndarray, amax: np.ndarray, xshape: tuple) -> np.ndarray:
    n, c, h, w = xshape
    oh, ow = h // 2, w // 2
    dxt = np.zeros((n, c, oh, ow, 4), dtype=np.float64)
    np.put_along_axis(dxt, amax[..., None], dout[..., None], axis=-1)
    dxt = dxt.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(xshape, dtype=np.float64)
    dx[:, :, : oh * 2, : ow * 2] = dxt.reshape(n, c, oh * 2, ow * 2)
    return dx


class HybridClassifier:
    """Two 3x3 conv + 2x2 maxpool stages on a grayscale patch, concatenated
    with a numeric vector and pushed through three dense layers to logits."""

    KERNEL = 3

    def __init__(
        self,
        image_hw: int = 64,
        numeric_dim: int = 0,
        conv_channels: tuple[int, int] = (8, 16),
        fc_hidden: tuple[int, int] = (16, 8),
        n_classes: int = 4,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        k = self.KERNEL
        c1, c2 = conv_channels
        self.image_hw = image_hw
        self.numeric_dim = numeric_dim
        self.conv_channels = conv_channels
        self.fc_hidden = fc_hidden
        self.n_classes = n_classes

        h1 = (image_hw - k + 1) // 2
        h2 = (h1 - k + 1) // 2
        if h2 < 1:
            raise ValueError(f"image_hw={image_hw} too small for two conv/pool stages")
        self.flat_dim = c2 * h2 * h2
        self._h1, self._h2 = h1, h2

        self.conv_w = [
            _he_uniform(rng, 1 * k * k, (c1, 1 * k * k)),
            _he_uniform(rng, c1 * k * k, (c2, c1 * k * k)),
        ]
        self.conv_b = [np.zeros(c1), np.zeros(c2)]
        widths = (self.flat_dim + numeric_dim, *fc_hidden, n_classes)
        self.fc_w = [
            _he_uniform(rng, widths[i], (widths[i], widths[i + 1]))
            for i in range(len(widths) - 1)
        ]
        self.fc_b = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def num_params(self) -> int:
        arrays = self.conv_w + self.conv_b + self.fc_w + self.fc_b
        return sum(a.size for a in arrays)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend((w, b))
        for w, b in zip(self.fc_w, self.fc_b):
            out.extend((w, b))
        return out

    def _forward_cached(self, images: np.ndarray, numerics: np.ndarray):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None, :, :]
        cache = {"x0": x}
        a = x
        for i in range(2):
            cols, oh, ow = _im2col(a, self.KERNEL)
            z = np.einsum("ok,nkp->nop", self.conv_w[i], cols)
            z += self.conv_b[i][None, :, None]
            z = z.reshape(a.shape[0], -1, oh, ow)
            r = np.maximum(z, 0.0)
            p, amax = _maxpool2(r)
            cache[f"in{i}"] = a
            cache[f"cols{i}"] = cols
            cache[f"z{i}"] = z
            cache[f"r{i}"] = r
            cache[f"amax{i}"] = amax
            a = p
        flat = a.reshape(a.shape[0], -1)
        joint = np.concatenate([flat, np.asarray(numerics, dtype=np.float64)], axis=1)
        cache["pool_shape"] = a.shape
        acts = [joint]
        pre = []
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if i < len(self.fc_w) - 1 else z)
        cache["acts"] = acts
        cache["pre"] = pre
        return acts[-1], cache

    def forward(self, images: np.ndarray, numerics: np.ndarray) -> np.ndarray:
        return self._forward_cached(images, numerics)[0]

    def backward(self, cache, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients in params() order given d(loss)/d(logits)."""
        acts, pre = cache["acts"], cache["pre"]
        fc_grads: list[np.ndarray] = []
        delta = grad_logits
        for i in reversed(range(len(self.fc_w))):
            if i < len(self.fc_w) - 1:
                delta = delta * (pre[i] > 0.0)
            fc_grads.append(delta.sum(axis=0))
            fc_grads.append(acts[i].T @ delta)
            delta = delta @ self.fc_w[i].T
        fc_grads.reverse()

        dflat = delta[:, : self.flat_dim].reshape(cache["pool_shape"])
        conv_grads: list[np.ndarray] = []
        dp = dflat
        for i in reversed(range(2)):
            dr = _maxpool2_back(dp, cache[f"amax{i}"], cache[f"r{i}"].shape)
            dz = dr * (cache[f"z{i}"] > 0.0)
            n, o, oh, ow = dz.shape
            dzf = dz.reshape(n, o, oh * ow)
            conv_grads.append(dz.sum(axis=(0, 2, 3)))                      # bias
            conv_grads.append(np.einsum("nop,nkp->ok", dzf, cache[f"cols{i}"]))  # weight
            dcols = np.einsum("ok,nop->nkp", self.conv_w[i], dzf)
            dp = _col2im(dcols, cache[f"in{i}"].shape, self.KERNEL)
        conv_grads.reverse()
        return conv_grads + fc_grads

    def predict_proba(self, images: np.ndarray, numerics: np.ndarray) -> np.ndarray:
        return softmax(self.forward(images, numerics))

    def predict(self, images: np.ndarray, numerics: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(images, numerics), axis=1)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.intp)] = 1.0
    return out


def classifier_loss_grad(net: HybridClassifier, cache, probs, onehot_labels):
    """d(loss)/d(logits) through the softmax for the per-class BCE loss."""
    dprobs = _cross_entropy_grad(probs, onehot_labels)
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def train_classifier(
    images: np.ndarray,
    numerics: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    *,
    conv_channels: tuple[int, int] = (8, 16),
    fc_hidden: tuple[int, int] = (16, 8),
    n_classes: int = 4,
    stop_at_accuracy: float | None = None,
) -> tuple[HybridClassifier, list[float], list[float]]:
    """Mini-batch Adam on softmax + per-class cross-entropy.

    Returns the model, per-epoch losses and per-epoch training accuracies.
    """
    images = np.asarray(images, dtype=np.float64)
    numerics = np.asarray(numerics, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = images.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    net = HybridClassifier(
        image_hw=images.shape[-1],
        numeric_dim=numerics.shape[1],
        conv_channels=conv_channels,
        fc_hidden=fc_hidden,
        n_classes=n_classes,
        seed=cfg.seed,
    )
    params = net.params()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    targets = one_hot(labels, n_classes)
    losses: list[float] = []
    accuracies: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, cache = net._forward_cached(images[idx], numerics[idx])
            probs = softmax(logits)
            grad = classifier_loss_grad(net, cache, probs, targets[idx])
            opt.step(params, net.backward(cache, grad))
        probs = net.predict_proba(images, numerics)
        epoch_loss = cross_entropy_loss(probs, targets)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        acc = float((np.argmax(probs, axis=1) == labels).mean())
        losses.append(epoch_loss)
        accuracies.append(acc)
        if stop_at_accuracy is not None and acc >= stop_at_accuracy:
            break
    return net, losses, accuracies


# --- encodings and dataset generation ----------------------------------------------

def condition_columns() -> tuple[str, ...]:
    return tuple(
        f"{cfield}={value}" for cfield, values in CONDITION_VOCAB.items() for value in values
    )


DATASET_COLUMNS: tuple[str, ...] = condition_columns() + PARAM_NAMES


def encode_conditions(env: EnvConditions) -> np.ndarray:
    """One-hot encoding over the condition vocabulary, 13 dims."""
    d = env.as_dict()
    out = []
    for cfield, values in CONDITION_VOCAB.items():
        for value in values:
            out.append(1.0 if d[cfield] == value else 0.0)
    return np.array(out)


def encode_params(theta: ParamSet) -> np.ndarray:
    return np.array([theta.nf, theta.sf, theta.nl, theta.st], dtype=np.float64)


def encode_example(env: EnvConditions, theta: ParamSet) -> np.ndarray:
    return np.concatenate([encode_conditions(env), encode_params(theta)])


@dataclass
class ThetaDataset:
    """Rows of (encoded conditions + parameters) with a quality target."""

    features: np.ndarray
    targets: np.ndarray
    columns: tuple[str, ...] = DATASET_COLUMNS
    row_flags: tuple[tuple[str, ...], ...] = ()

    def __len__(self) -> int:
        return self.features.shape[0]


def theta_grid_points(grid: dict[str, tuple] = DEFAULT_THETA_GRID) -> list[ParamSet]:
    combos = itertools.product(grid["nf"], grid["sf"], grid["nl"], grid["st"])
    return [ParamSet(nf=nf, sf=sf, nl=nl, st=st) for nf, sf, nl, st in combos]


def generate_theta_dataset(
    scenes,
    grid: dict[str, tuple] = DEFAULT_THETA_GRID,
    kind: ExtractorKind = ExtractorKind.CORNER_BINARY,
    window: int = 3,
) -> ThetaDataset:
    """Empirical quality labels from exhaustive parameter sweeps.

    For every (scene, grid point) pair the extractor runs over the scene's
    frames, the seven metrics are evaluated on the last frame, and quality is
    the mean of the metric components min-max normalized across the grid
    points of the same scene.
    """
    from .evaluation import synth_sequence  # deferred: evaluation imports fitness

    points = theta_grid_points(grid)
    feats: list[np.ndarray] = []
    targets: list[float] = []
    row_flags: list[tuple[str, ...]] = []
    for spec in scenes:
        seq = synth_sequence(spec)
        raw = []
        for theta in points:
            history = [
                extract(frame, kind, theta, frame_id=i)
                for i, frame in enumerate(seq.frames[-window:])
            ]
            raw.append(evaluate_all(history, seq.frames[-1], window=window))
        for theta, nmv, mv in zip(points, normalize(raw), raw):
            feats.append(encode_example(seq.env, theta))
            targets.append(nmv.mean())
            row_flags.append(mv.flags)
    return ThetaDataset(
        features=np.stack(feats),
        targets=np.array(targets),
        row_flags=tuple(row_flags),
    )


def save_theta_dataset(ds: ThetaDataset, path, comments: tuple[str, ...] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(ds.columns) + ",quality,flags\n")
        flags = ds.row_flags or tuple(() for _ in range(len(ds)))
        for row, target, fl in zip(ds.features, ds.targets, flags):
            cells = [repr(float(v)) for v in row] + [repr(float(target)), "|".join(fl)]
            fh.write(",".join(cells) + "\n")


def load_theta_dataset(path) -> ThetaDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty dataset")
    header = tuple(lines[0].split(","))
    expected = DATASET_COLUMNS + ("quality", "flags")
    if header != expected:
        raise ValueError(
            f"{path}: malformed dataset header; expected {','.join(expected)}"
        )
    feats, targets, flags = [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        feats.append([float(v) for v in cells[: len(DATASET_COLUMNS)]])
        targets.append(float(cells[len(DATASET_COLUMNS)]))
        flags.append(tuple(f for f in cells[len(DATASET_COLUMNS) + 1].split("|") if f))
    return ThetaDataset(
        features=np.array(feats), targets=np.array(targets), row_flags=tuple(flags)
    )


# --- trained-model wrappers ----------------------------------------------------------

@dataclass
class ThetaQualityModel:
    """MLP regressor plus the scaler its inputs were normalized with."""

    mlp: Mlp
    scaler: Scaler

    def predict_encoded(self, x: np.ndarray) -> np.ndarray:
        return self.mlp.predict(self.scaler.transform(np.atleast_2d(x)))

    def predict(self, env: EnvConditions, theta: ParamSet) -> float:
        return float(self.predict_encoded(encode_example(env, theta))[0])


@dataclass
class AlphaClassifierModel:
    """Hybrid classifier plus the scaler for its numeric inputs."""

    net: HybridClassifier
    scaler: Scaler

    def predict(self, images: np.ndarray, numerics: np.ndarray) -> np.ndarray:
        return self.net.predict(images, self.scaler.transform(np.atleast_2d(numerics)))


def distill_adjustment_table(
    model: ThetaQualityModel,
    base: ParamSet,
    grid: dict[str, tuple] = DEFAULT_THETA_GRID,
    reference_env: EnvConditions = REFERENCE_ENV,
) -> AdjustmentTable:
    """Read per-condition multiplicative factors out of a trained regressor.

    For each condition value, the model is scanned over one parameter's grid
    (others at the base values) under an environment that differs from the
    reference only in that condition; the factor is argmax / base, with exact
    ties resolving to the base value. Factors are clamped like any table entry.
    """
    table = AdjustmentTable()
    base_values = {"nf": base.nf, "sf": base.sf, "nl": base.nl, "st": base.st}
    for cfield, values in CONDITION_VOCAB.items():
        for value in values:
            env = EnvConditions(**{**reference_env.as_dict(), cfield: value})
            for param in PARAM_NAMES:
                candidates = grid[param]
                thetas = [
                    ParamSet(**{**base_values, param: v}) for v in candidates
                ]
                preds = np.array([model.predict(env, t) for t in thetas])
                best = preds.max()
                chosen = None
                for v, p in zip(candidates, preds):
                    if v == base_values[param] and p >= best - 1e-12:
                        chosen = v  # tie with the base keeps the base
                        break
                if chosen is None:
                    chosen = candidates[int(np.argmax(preds))]
                factor = float(chosen) / float(base_values[param])
                factor = min(FACTOR_MAX, max(FACTOR_MIN, factor))
                if factor != 1.0:
                    table.set_factor(param, cfield, value, factor)
    return table


# --- model files -----------------------------------------------------------------------

def _write_array(fh, name: str, arr: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    fh.write(f"array {name} {a.shape[0]} {a.shape[1]}\n")
    for row in a:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _write_scaler(fh, scaler: Scaler) -> None:
    _write_array(fh, "scaler_mean", scaler.mean)
    _write_array(fh, "scaler_std", scaler.std)
    _write_array(fh, "scaler_kept", scaler.kept.astype(np.float64))


def save_model(model, path, comments: tuple[str, ...] = ()) -> None:
    """Versioned text serialization for both model kinds."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if isinstance(model, ThetaQualityModel):
            fh.write(f"{MODEL_MAGIC} kind=mlp\n")
            for c in comments:
                fh.write(f"# {c}\n")
            fh.write("widths " + " ".join(str(w) for w in model.mlp.widths) + "\n")
            _write_scaler(fh, model.scaler)
            for i, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
                _write_array(fh, f"W{i}", w)
                _write_array(fh, f"b{i}", b)
        elif isinstance(model, AlphaClassifierModel):
            net = model.net
            fh.write(f"{MODEL_MAGIC} kind=hybrid\n")
            for c in comments:
                fh.write(f"# {c}\n")
            fh.write(
                "hybrid "
                + " ".join(
                    str(v)
                    for v in (
                        net.image_hw, net.numeric_dim, *net.conv_channels,
                        *net.fc_hidden, net.n_classes,
                    )
                )
                + "\n"
            )
            _write_scaler(fh, model.scaler)
            for i in range(2):
                _write_array(fh, f"convW{i}", net.conv_w[i])
                _write_array(fh, f"convb{i}", net.conv_b[i])
            for i, (w, b) in enumerate(zip(net.fc_w, net.fc_b)):
                _write_array(fh, f"W{i}", w)
                _write_array(fh, f"b{i}", b)
        else:
            raise ValueError(f"cannot serialize {type(model).__name__}")


def _read_arrays(lines: list[str], start: int) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    i = start
    while i < len(lines):
        parts = lines[i].split()
        if not parts or parts[0] != "array":
            raise ValueError(f"expected an array block at line {i + 1}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        data = [
            [float(v) for v in lines[i + 1 + r].split()]
            for r in range(rows)
        ]
        arr = np.array(data, dtype=np.float64)
        if arr.shape != (rows, cols):
            raise ValueError(f"array {name} has shape {arr.shape}, expected ({rows}, {cols})")
        arrays[name] = arr
        i += 1 + rows
    return arrays


def _scaler_from_arrays(arrays: dict[str, np.ndarray]) -> Scaler:
    scaler = Scaler()
    scaler.mean = arrays["scaler_mean"][0]
    scaler.std = arrays["scaler_std"][0]
    scaler.kept = arrays["scaler_kept"][0] > 0.5
    return scaler


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("# ")]
    if not lines or not lines[0].startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not a model file (expected {MODEL_MAGIC!r})")
    kind = lines[0].split("kind=")[1].strip()
    if kind == "mlp":
        widths = tuple(int(v) for v in lines[1].split()[1:])
        arrays = _read_arrays(lines, 2)
        mlp = Mlp(widths[0], hidden=widths[1:-1], n_outputs=widths[-1], seed=0)
        for i in range(len(widths) - 1):
            mlp.weights[i] = arrays[f"W{i}"]
            mlp.biases[i] = arrays[f"b{i}"][0]
        return ThetaQualityModel(mlp=mlp, scaler=_scaler_from_arrays(arrays))
    if kind == "hybrid":
        meta = [int(v) for v in lines[1].split()[1:]]
        image_hw, numeric_dim, c1, c2, f1, f2, n_classes = meta
        arrays = _read_arrays(lines, 2)
        net = HybridClassifier(
            image_hw=image_hw, numeric_dim=numeric_dim, conv_channels=(c1, c2),
            fc_hidden=(f1, f2), n_classes=n_classes, seed=0,
        )
        for i in range(2):
            net.conv_w[i] = arrays[f"convW{i}"]
            net.conv_b[i] = arrays[f"convb{i}"][0]
        for i in range(len(net.fc_w)):
            net.fc_w[i] = arrays[f"W{i}"]
            net.fc_b[i] = arrays[f"b{i}"][0]
        return AlphaClassifierModel(net=net, scaler=_scaler_from_arrays(arrays))
    raise ValueError(f"{path}: unknown model kind {kind!r}")
