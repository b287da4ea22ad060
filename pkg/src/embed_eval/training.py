"""Small numpy trainers: softmax classifiers and a contrastive embedder.

Softmax variants (the embedding is the layer that feeds the output layer):

    plain   embedding = x                       logits = W e + b
    FCR1    embedding = A x + a                 logits = W e + b
    FCR2    FCR1 with inverted dropout on the embedding at train time

The contrastive embedder maps ``f(x) = L x + l`` and uses the loss
``d^2`` for same-class pairs and ``max(0, margin - d)^2`` otherwise, with
``d = ||f(x_a) - f(x_b)||``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import LabeledDataset, as_feature_matrix
from .errors import ConfigError, DataFormatError, NumericError
from .metrics import log_softmax, softmax

VARIANTS = ("plain", "FCR1", "FCR2")


@dataclass(eq=False)
class SoftmaxModel:
    variant: str
    W: np.ndarray
    b: np.ndarray
    A: np.ndarray | None = None
    a: np.ndarray | None = None
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "plain":
            if self.A is not None or self.a is not None:
                raise ConfigError("plain model has no bottleneck layer")
        elif self.A is None or self.a is None:
            raise ConfigError(f"{self.variant} needs bottleneck parameters A and a")
        elif self.A.shape[0] != self.W.shape[1] or self.a.shape != (self.A.shape[0],):
            raise ConfigError("bottleneck shape does not match the output layer")
        if self.b.shape != (self.W.shape[0],):
            raise ConfigError("bias length must equal number of classes")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def in_dims(self) -> int:
        return self.W.shape[1] if self.A is None else self.A.shape[1]

    @property
    def embed_dims(self) -> int:
        return self.W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        p = {"W": self.W, "b": self.b}
        if self.A is not None:
            p.update(A=self.A, a=self.a)
        return p

    def with_params(self, params: dict[str, np.ndarray]) -> "SoftmaxModel":
        return replace(self, **params)


@dataclass(eq=False)
class ContrastiveModel:
    L: np.ndarray
    l: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.l.shape != (self.L.shape[0],):
            raise ConfigError("bias length must equal embedding dims")

    @property
    def in_dims(self) -> int:
        return self.L.shape[1]

    @property
    def embed_dims(self) -> int:
        return self.L.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"L": self.L, "l": self.l}

    def with_params(self, params: dict[str, np.ndarray]) -> "ContrastiveModel":
        return replace(self, **params)

    def embed(self, x) -> np.ndarray:
        return as_feature_matrix(x) @ self.L.T + self.l


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    lr_multiplier_new_layers: float = 10.0
    weight_decay: float = 0.0
    # parameters that get the multiplier; ("W", "b", "A", "a") boosts output layers too
    new_layer_params: tuple[str, ...] = ("A", "a")

    def __post_init__(self):
        object.__setattr__(self, "new_layer_params", tuple(self.new_layer_params))
        unknown = set(self.new_layer_params) - {"W", "b", "A", "a", "L", "l"}
        if unknown:
            raise ConfigError(f"new_layer_params: unknown parameter names {sorted(unknown)}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def _scaled_normal(rng, rows, cols):
    return rng.standard_normal((rows, cols)) / math.sqrt(cols)


def init_model(variant: str, d: int, C: int, m: int | None = None, seed: int = 0,
               dropout_rate: float = 0.5) -> SoftmaxModel:
    """Seeded init: weights ~ N(0, 1/fan_in), biases zero."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if d < 1 or C < 1:
        raise ConfigError("d and C must be positive")
    rng = np.random.default_rng(seed)
    if variant == "plain":
        if m is not None and m != d:
            raise ConfigError("plain variant has m == d")
        return SoftmaxModel("plain", _scaled_normal(rng, C, d), np.zeros(C), dropout_rate=dropout_rate)
    if m is None or m < 1:
        raise ConfigError(f"{variant} needs a positive bottleneck size m")
    A = _scaled_normal(rng, m, d)
    W = _scaled_normal(rng, C, m)
    return SoftmaxModel(variant, W, np.zeros(C), A, np.zeros(m), dropout_rate)


def init_contrastive(d: int, m: int, seed: int = 0, margin: float = 1.0) -> ContrastiveModel:
    if d < 1 or m < 1:
        raise ConfigError("d and m must be positive")
    rng = np.random.default_rng(seed)
    return ContrastiveModel(_scaled_normal(rng, m, d), np.zeros(m), margin)


def dropout_mask(shape, rate: float, seed) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1 - rate)."""
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def _forward(model: SoftmaxModel, x: np.ndarray, train_mode: bool, seed):
    if model.A is None:
        h = x
    else:
        h = x @ model.A.T + model.a
    mask = None
    if model.variant == "FCR2" and train_mode and model.dropout_rate > 0:
        if seed is None:
            raise ConfigError("FCR2 in train mode needs a dropout seed")
        mask = dropout_mask(h.shape, model.dropout_rate, seed)
        e = h * mask
    else:
        e = h
    return e, e @ model.W.T + model.b, mask


def forward_extract(model: SoftmaxModel, x, train_mode: bool = False, dropout_seed=None):
    """Return (embedding, logits) for one vector or a batch of rows."""
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    xb = np.atleast_2d(x_arr)
    if xb.shape[1] != model.in_dims:
        raise DataFormatError(f"expected {model.in_dims}-dim input, got {xb.shape[1]}")
    e, logits, _ = _forward(model, xb, train_mode, dropout_seed)
    return (e[0], logits[0]) if single else (e, logits)


def extract_features(model, x) -> np.ndarray:
    """Eval-mode embeddings: bottleneck output, raw input, or ``L x + l``."""
    if isinstance(model, ContrastiveModel):
        return model.embed(x)
    return forward_extract(model, as_feature_matrix(x))[0]


def softmax_loss_grad(model: SoftmaxModel, x, y, train_mode: bool = False, seed=None):
    """Mean cross-entropy over the batch and its exact gradients.

    ``y`` holds class indices (or one-hot rows). In train mode the FCR2
    dropout mask is drawn from ``seed``, so repeated calls see the same mask.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if y.ndim == 2:
        y = np.argmax(y, axis=1)
    y = y.astype(np.int64).reshape(-1)
    B = x.shape[0]
    if B == 0 or len(y) != B:
        raise ConfigError("batch must be non-empty with one target per row")
    e, logits, mask = _forward(model, x, train_mode, seed)
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(B), y]))
    dlogits = softmax(logits)
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads = {"W": dlogits.T @ e, "b": dlogits.sum(axis=0)}
    if model.A is not None:
        dh = dlogits @ model.W
        if mask is not None:
            dh = dh * mask
        grads["A"] = dh.T @ x
        grads["a"] = dh.sum(axis=0)
    return loss, grads


@dataclass
class PairBatch:
    xa: np.ndarray
    xb: np.ndarray
    same: np.ndarray
    idx_a: np.ndarray | None = None
    idx_b: np.ndarray | None = None

    def __len__(self):
        return len(self.same)


def contrastive_loss_grad(model: ContrastiveModel, batch: PairBatch):
    xa = np.atleast_2d(np.asarray(batch.xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(batch.xb, dtype=np.float64))
    same = np.asarray(batch.same, dtype=bool).reshape(-1)
    B = len(same)
    if B == 0 or xa.shape != xb.shape or xa.shape[0] != B:
        raise ConfigError("pair batch must be non-empty with matching shapes")
    dx = xa - xb
    diff = dx @ model.L.T  # the bias cancels in f(xa) - f(xb)
    d = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(0.0, model.margin - d)
    loss = float(np.mean(np.where(same, d**2, hinge**2)))
    # d(d^2)/d(diff) = 2 diff;  d(hinge^2)/d(diff) = -2 hinge diff / d  (0 at d = 0)
    safe_d = np.where(d > 0, d, 1.0)
    coef = np.where(same, 2.0, np.where(d > 0, -2.0 * hinge / safe_d, 0.0))
    g_diff = coef[:, None] * diff / B
    return loss, {"L": g_diff.T @ dx, "l": np.zeros_like(model.l)}


def contrastive_pair_sampler(ds: LabeledDataset, batch_size: int, seed) -> PairBatch:
    """Half same-class pairs, half different-class pairs, drawn uniformly.

    Positive pairs: anchor uniform over rows whose class has >= 2 rows,
    partner uniform over the other rows of that class. Negative pairs:
    anchor uniform over all rows, partner uniform over rows of other classes.
    With an odd ``batch_size`` the extra pair is negative.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 to hold both pair kinds")
    labels = ds.labels
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise ConfigError("need >= 2 classes to form negative pairs")
    pos_anchor_pool = np.flatnonzero(counts[inverse] >= 2)
    if len(pos_anchor_pool) == 0:
        raise ConfigError("every class is a singleton; no positive pairs possible")
    rng = np.random.default_rng(seed)
    n_pos = batch_size // 2
    n_neg = batch_size - n_pos
    members = {c: np.flatnonzero(labels == c) for c in classes}
    ia, ib = [], []
    for i in rng.choice(pos_anchor_pool, size=n_pos):
        group = members[labels[i]]
        others = group[group != i]
        ia.append(i)
        ib.append(others[rng.integers(len(others))])
    n = len(labels)
    for i in rng.integers(n, size=n_neg):
        others = np.flatnonzero(labels != labels[i])
        ia.append(i)
        ib.append(others[rng.integers(len(others))])
    ia, ib = np.asarray(ia, dtype=np.int64), np.asarray(ib, dtype=np.int64)
    same = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    return PairBatch(ds.features[ia], ds.features[ib], same, ia, ib)


def _check_contiguous(labels: np.ndarray, C: int):
    present = np.unique(labels)
    if not np.array_equal(present, np.arange(len(present))):
        raise ConfigError("class ids must be contiguous 0..C-1 for softmax training")
    if len(present) > C:
        raise ConfigError(f"dataset has {len(present)} classes but the model outputs {C}")


@dataclass
class TrainResult:
    model: SoftmaxModel | ContrastiveModel
    loss_trace: list[float] = field(default_factory=list)


def train(model, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Mini-batch SGD with momentum.

    Softmax models see every row once per epoch in a seeded shuffled order.
    Contrastive models draw ``ceil(n / batch_size)`` pair batches per epoch.
    Parameters named in ``new_layer_params`` (default: the bottleneck A, a)
    use ``learning_rate * lr_multiplier_new_layers``.
    The returned trace holds the mean batch loss of each epoch.
    """
    x = dataset.features
    if x.shape[1] != model.in_dims:
        raise DataFormatError(f"model expects {model.in_dims}-dim input, got {x.shape[1]}")
    contrastive = isinstance(model, ContrastiveModel)
    if not contrastive:
        _check_contiguous(dataset.labels, model.n_classes)
    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr = {k: config.learning_rate * (config.lr_multiplier_new_layers if k in config.new_layer_params else 1.0)
          for k in params}
    n = len(dataset)
    steps = math.ceil(n / config.batch_size)
    trace = []
    # divergence surfaces as a NumericError below, not as float warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.epochs):
            current = model.with_params(params)
            losses = []
            if contrastive:
                for _ in range(steps):
                    batch = contrastive_pair_sampler(dataset, config.batch_size, rng.integers(2**63))
                    loss, grads = contrastive_loss_grad(current, batch)
                    losses.append(loss)
                    _sgd_step(params, velocity, grads, lr, config)
            else:
                order = rng.permutation(n)
                for s in range(steps):
                    rows = order[s * config.batch_size : (s + 1) * config.batch_size]
                    loss, grads = softmax_loss_grad(
                        current, x[rows], dataset.labels[rows], train_mode=True,
                        seed=rng.integers(2**63),
                    )
                    losses.append(loss)
                    _sgd_step(params, velocity, grads, lr, config)
            epoch_loss = float(np.mean(losses))
            if not math.isfinite(epoch_loss):
                raise NumericError(f"training diverged: non-finite loss at epoch {len(trace)}")
            trace.append(epoch_loss)
    return TrainResult(model.with_params(params), trace)


def _sgd_step(params, velocity, grads, lr, config: TrainConfig):
    # updates arrays in place; the dataclass instance built per epoch shares them
    for k, g in grads.items():
        if config.weight_decay and k not in ("b", "a", "l"):
            g = g + config.weight_decay * params[k]
        velocity[k] *= config.momentum
        velocity[k] -= lr[k] * g
        params[k] += velocity[k]


def predict(model: SoftmaxModel, x) -> np.ndarray:
    return np.argmax(forward_extract(model, as_feature_matrix(x))[1], axis=1)


def make_blobs(n_classes: int, samples_per_class: int, dims: int, cluster_std: float = 1.0,
               separation: float = 10.0, seed: int = 0) -> LabeledDataset:
    """Gaussian blobs: centers ~ N(0, separation^2 I), samples ~ N(center, std^2 I).

    Rows are grouped by class (class 0 first).
    """
    if min(n_classes, samples_per_class, dims) < 1:
        raise ConfigError("n_classes, samples_per_class and dims must be positive")
    if cluster_std < 0 or separation < 0:
        raise ConfigError("cluster_std and separation must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dims)) * separation
    noise = rng.standard_normal((n_classes * samples_per_class, dims)) * cluster_std
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    ids = [f"blob-{i}" for i in range(len(labels))]
    return LabeledDataset(centers[labels] + noise, labels, ids)


# Checkpoint container: magic, model tag, float64 scalar (dropout rate or
# margin), array count, then per array: name length, name, rows, cols, values.
_CKPT_MAGIC = b"CKP1"
_CKPT_HEADER = struct.Struct("<4sBdI")
_ARRAY_HEADER = struct.Struct("<II")
_TAGS = {"plain": 0, "FCR1": 1, "FCR2": 2, "contrastive": 3}


def save_checkpoint(model, path) -> None:
    if isinstance(model, ContrastiveModel):
        tag, scalar = _TAGS["contrastive"], model.margin
    else:
        tag, scalar = _TAGS[model.variant], model.dropout_rate
    params = model.params()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, tag, scalar, len(params)))
        for name, arr in params.items():
            mat = np.atleast_2d(arr)
            raw = name.encode("ascii")
            fh.write(struct.pack("<B", len(raw)) + raw)
            fh.write(_ARRAY_HEADER.pack(*mat.shape))
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    try:
        magic, tag, scalar, count = _CKPT_HEADER.unpack_from(raw)
        if magic != _CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint (magic {magic!r})")
        pos = _CKPT_HEADER.size
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<B", raw, pos)
            name = raw[pos + 1 : pos + 1 + nlen].decode("ascii")
            pos += 1 + nlen
            rows, cols = _ARRAY_HEADER.unpack_from(raw, pos)
            pos += _ARRAY_HEADER.size
            size = rows * cols * 8
            if pos + size > len(raw):
                raise DataFormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(raw):
        raise DataFormatError(f"{path}: trailing bytes after checkpoint payload")
    vectors = {"b", "a", "l"}
    arrays = {k: (v[0] if k in vectors else v) for k, v in arrays.items()}
    names = {v: k for k, v in _TAGS.items()}
    if tag not in names:
        raise DataFormatError(f"{path}: unknown model tag {tag}")
    if names[tag] == "contrastive":
        return ContrastiveModel(arrays["L"], arrays["l"], scalar)
    return SoftmaxModel(names[tag], arrays["W"], arrays["b"], arrays.get("A"), arrays.get("a"), scalar)
