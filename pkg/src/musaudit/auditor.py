"""The membership auditor: pair features, MLP/CNN classifiers and training.

Vector embeddings (dim d) are concatenated ``[original || generation]`` and
fed to an MLP 2d -> 256 -> 128 -> 64 -> 1. Map embeddings (L, D) are stacked
as two channels and fed to a CNN with 3x3 convolutions of 32, 64 and 128
channels, global average pooling and a single-logit head.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embeddings import PairExample, read_maud, write_maud
from .errors import DimensionError, FormatError, NumericalError, ValidationError

MLP_WIDTHS = (256, 128, 64)
CNN_CHANNELS = (32, 64, 128)
CHECKPOINT_HEADER = "header.json"
CHECKPOINT_FORMAT = "musaudit-checkpoint"

__all__ = [
    "PairExample",
    "AuditorParams",
    "TrainConfig",
    "TrainingLog",
    "pair_feature_vector",
    "pair_feature_map",
    "pair_features",
    "init_params",
    "forward",
    "loss_and_grads",
    "train",
    "score",
    "score_pairs",
    "save_checkpoint",
    "load_checkpoint",
]


# ---------------------------------------------------------------------------
# Pair features
# ---------------------------------------------------------------------------


def pair_feature_vector(pair: PairExample) -> np.ndarray:
    a, b = pair.original.values, pair.generation.values
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"vector pair needs two equal-length vectors, got {a.shape} and {b.shape}")
    return np.concatenate([a, b])


def pair_feature_map(pair: PairExample) -> np.ndarray:
    a, b = pair.original.values, pair.generation.values
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"map pair needs two equal (L, D) maps, got {a.shape} and {b.shape}")
    return np.stack([a, b])


def pair_features(pairs, standardizer=None):
    """Stack pairs into ``(X, y)``; X is (N, 2d) or (N, 2, L, D)."""
    if not pairs:
        raise ValidationError("no pairs given")
    shape = pairs[0].original.values.shape
    build = pair_feature_vector if len(shape) == 1 else pair_feature_map
    X = np.stack([build(p) for p in pairs])
    if standardizer is not None:
        X = standardizer.apply(X)
    y = np.array([p.label for p in pairs], dtype=np.float64)
    return X, y


@dataclass
class Standardizer:
    """Per-entry embedding standardization, fit on training pairs only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, pairs) -> "Standardizer":
        stack = np.stack([p.original.values for p in pairs] + [p.generation.values for p in pairs])
        std = stack.std(axis=0)
        return cls(stack.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.ndim == 2:
            d = self.mean.shape[0]
            return np.concatenate([(X[:, :d] - self.mean) / self.std, (X[:, d:] - self.mean) / self.std], axis=1)
        return (X - self.mean) / self.std


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class AuditorParams:
    architecture: str
    embedding_shape: tuple
    weights: dict
    standardizer: Standardizer | None = None

    @property
    def input_shape(self) -> tuple:
        if self.architecture == "mlp":
            return (2 * self.embedding_shape[0],)
        return (2,) + tuple(self.embedding_shape)

    def n_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "AuditorParams":
        return AuditorParams(
            self.architecture,
            self.embedding_shape,
            {k: v.copy() for k, v in self.weights.items()},
            copy.deepcopy(self.standardizer),
        )


def architecture_for(embedding_shape) -> str:
    return "mlp" if len(embedding_shape) == 1 else "cnn"


def init_params(embedding_shape, seed: int, architecture: str | None = None) -> AuditorParams:
    embedding_shape = tuple(int(s) for s in embedding_shape)
    architecture = architecture or architecture_for(embedding_shape)
    if architecture != architecture_for(embedding_shape):
        raise ValidationError(f"{architecture} auditor cannot take embeddings of shape {embedding_shape}")
    rng = nx.make_rng(seed, "init", architecture)
    w = {}
    if architecture == "mlp":
        widths = (2 * embedding_shape[0],) + MLP_WIDTHS + (1,)
        names = ["fc1", "fc2", "fc3", "out"]
        for name, fan_in, fan_out in zip(names, widths[:-1], widths[1:]):
            w[f"{name}.weight"] = nx.uniform_init(rng, (fan_in, fan_out), fan_in)
            w[f"{name}.bias"] = nx.uniform_init(rng, (fan_out,), fan_in)
    else:
        chans = (2,) + CNN_CHANNELS
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:]), start=1):
            w[f"conv{i}.weight"] = nx.uniform_init(rng, (cout, cin, 3, 3), cin * 9)
            w[f"conv{i}.bias"] = nx.uniform_init(rng, (cout,), cin * 9)
        w["fc.weight"] = nx.uniform_init(rng, (CNN_CHANNELS[-1], 1), CNN_CHANNELS[-1])
        w["fc.bias"] = nx.uniform_init(rng, (1,), CNN_CHANNELS[-1])
    return AuditorParams(architecture, embedding_shape, w)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_input(params: AuditorParams, X: np.ndarray):
    if X.ndim < 2 or X.shape[0] == 0:
        raise DimensionError(f"expected a non-empty batch, got shape {X.shape}")
    if tuple(X.shape[1:]) != params.input_shape:
        raise DimensionError(f"auditor expects inputs of shape {params.input_shape}, got {tuple(X.shape[1:])}")


def _forward_cache(params: AuditorParams, X: np.ndarray):
    _check_input(params, X)
    w = params.weights
    cache = []
    h = X
    if params.architecture == "mlp":
        for name in ("fc1", "fc2", "fc3"):
            z = nx.matmul_affine(h, w[f"{name}.weight"], w[f"{name}.bias"])
            cache.append((name, h, z))
            h = nx.relu(z)
        logits = nx.matmul_affine(h, w["out.weight"], w["out.bias"])
        cache.append(("out", h, None))
    else:
        for i in (1, 2, 3):
            name = f"conv{i}"
            z = nx.conv3x3(h, w[f"{name}.weight"], w[f"{name}.bias"])
            cache.append((name, h, z))
            h = nx.relu(z)
        pooled = nx.adaptive_avg_pool(h)
        cache.append(("pool", h.shape, None))
        logits = nx.matmul_affine(pooled, w["fc.weight"], w["fc.bias"])
        cache.append(("fc", pooled, None))
    return logits[:, 0], cache


def forward(params: AuditorParams, X: np.ndarray) -> np.ndarray:
    """One logit per example."""
    return _forward_cache(params, X)[0]


def _backward(params: AuditorParams, cache, d_logits: np.ndarray) -> dict:
    w = params.weights
    grads = {}
    g = d_logits[:, None]
    for name, inp, z in reversed(cache):
        if name == "pool":
            g = nx.adaptive_avg_pool_backward(g, inp)
            continue
        if name.startswith("conv"):
            g = nx.relu_backward(g, z)
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = nx.conv3x3_backward(g, inp, w[f"{name}.weight"])
        else:
            if z is not None:
                g = nx.relu_backward(g, z)
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = nx.matmul_affine_backward(g, inp, w[f"{name}.weight"])
    return grads


def loss_and_grads(params: AuditorParams, X: np.ndarray, y: np.ndarray):
    """Mean BCE-with-logits over the batch, its parameter gradients and the logits."""
    logits, cache = _forward_cache(params, X)
    losses, d = nx.bce_with_logits(logits, y)
    grads = _backward(params, cache, d / len(y))
    return float(losses.mean()), grads, logits


def mean_loss(params: AuditorParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(nx.bce_with_logits(forward(params, X), y)[0].mean())


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_features(params: AuditorParams, X: np.ndarray) -> np.ndarray:
    return nx.sigmoid(forward(params, X))


def score_pairs(params: AuditorParams, pairs) -> np.ndarray:
    X, _ = pair_features(pairs, params.standardizer)
    return score_features(params, X)


def score(params: AuditorParams, pair: PairExample) -> float:
    """Membership score in (0, 1): the sigmoid of the auditor's logit."""
    return float(score_pairs(params, [pair])[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if self.patience < 1 or self.patience >= self.max_epochs:
            problems.append("patience must satisfy 1 <= patience < max_epochs")
        if self.min_delta < 0:
            problems.append("min_delta must be >= 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if problems:
            raise ValidationError("invalid training config: " + "; ".join(problems))


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for e in self.epochs:
            lines.append(f"{e['epoch']},{e['train_loss']!r},{e['train_acc']!r},{e['val_loss']!r},{e['val_acc']!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def _canonical(pairs):
    # batches are a function of the seeded shuffle only, never of input order
    return sorted(pairs, key=lambda p: (p.generator_id, p.pair_id))


def train(train_pairs, val_pairs, config: TrainConfig):
    """Fit an auditor with AdamW and early stopping on validation loss.

    Returns ``(params, log)`` where ``params`` is the snapshot from the epoch
    with the best validation loss.
    """
    if not train_pairs or not val_pairs:
        raise ValidationError("training and validation sets must be non-empty")
    labels = {p.label for p in train_pairs}
    if labels != {0, 1}:
        raise ValidationError(f"training set needs both classes, found only {sorted(labels)}")
    shape = train_pairs[0].original.values.shape
    for p in list(train_pairs) + list(val_pairs):
        if p.original.values.shape != shape or p.generation.values.shape != shape:
            raise DimensionError(f"pair {p.pair_id} has embedding shape {p.original.values.shape}, expected {shape}")

    train_pairs = _canonical(train_pairs)
    val_pairs = _canonical(val_pairs)
    params = init_params(shape, config.seed)
    if config.standardize:
        params.standardizer = Standardizer.fit(train_pairs)
    X, y = pair_features(train_pairs, params.standardizer)
    Xv, yv = pair_features(val_pairs, params.standardizer)

    state = nx.AdamWState.zeros_like(params.weights)
    log = TrainingLog()
    best = params.copy()
    wait = 0
    n = len(y)
    for epoch in range(1, config.max_epochs + 1):
        order = nx.make_rng(config.seed, "shuffle", epoch).permutation(n)
        total_loss = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads, logits = loss_and_grads(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "loss": loss, "step": state.t},
                )
            try:
                nx.adamw_step(params.weights, grads, state, lr=config.lr, weight_decay=config.weight_decay)
            except NumericalError as exc:
                exc.diagnostics.update(epoch=epoch, batch=b)
                raise
            total_loss += loss * len(idx)
            correct += int(np.sum((logits >= 0) == (y[idx] == 1)))
        val_logits = forward(params, Xv)
        val_loss = float(nx.bce_with_logits(val_logits, yv)[0].mean())
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}", {"epoch": epoch, "val_loss": val_loss})
        val_acc = float(np.mean((val_logits >= 0) == (yv == 1)))
        log.epochs.append(
            {
                "epoch": epoch,
                "train_loss": total_loss / n,
                "train_acc": correct / n,
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if val_loss < log.best_val_loss - config.min_delta:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best = params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                log.stopped_early = True
                break
    return best, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: AuditorParams, header: dict | None = None) -> None:
    """Directory checkpoint: header.json plus one MAUD (binary32) file per array."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = dict(params.weights)
    if params.standardizer is not None:
        arrays["standardizer.mean"] = params.standardizer.mean
        arrays["standardizer.std"] = params.standardizer.std
    meta = dict(header or {})
    meta.update(
        {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "architecture": params.architecture,
            "embedding_shape": list(params.embedding_shape),
            "input_shape": list(params.input_shape),
            "arrays": list(arrays),
        }
    )
    for name, values in arrays.items():
        write_maud(path / f"{name}.maud", values)
    (path / CHECKPOINT_HEADER).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return ``(params, header)``."""
    path = Path(path)
    header_path = path / CHECKPOINT_HEADER
    if not header_path.is_file():
        raise FileNotFoundError(f"{path}: no {CHECKPOINT_HEADER}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a musaudit checkpoint")
    arrays = {}
    for name in header["arrays"]:
        values, _ = read_maud(path / f"{name}.maud")
        arrays[name] = values.astype(np.float64)
    standardizer = None
    if "standardizer.mean" in arrays:
        standardizer = Standardizer(arrays.pop("standardizer.mean"), arrays.pop("standardizer.std"))
    params = AuditorParams(header["architecture"], tuple(header["embedding_shape"]), arrays, standardizer)
    expected = init_params(params.embedding_shape, 0, params.architecture).weights
    for name, ref in expected.items():
        if name not in arrays or arrays[name].shape != ref.shape:
            raise FormatError(f"{path}: parameter {name} missing or mis-shaped")
    return params, header
