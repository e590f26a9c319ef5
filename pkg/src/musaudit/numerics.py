"""Dense float64 building blocks for the auditors.

Each layer is a pair of plain functions: a forward pass and an explicit
backward pass returning analytic gradients. There is no autodiff graph;
the two auditor architectures wire these together by hand.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError

_U64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def stream_id(*names) -> int:
    """Stable 64-bit id for a tuple of stream names (str/int)."""
    text = "\x1f".join(str(n) for n in names)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class RngState:
    """Seed plus named stream; both together key a Philox counter RNG."""

    seed: int
    stream: tuple = ()

    def generator(self) -> np.random.Generator:
        key = (stream_id(*self.stream) << 64) | (int(self.seed) & _U64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *names) -> "RngState":
        return RngState(self.seed, tuple(self.stream) + tuple(names))


def make_rng(seed: int, *names) -> np.random.Generator:
    return RngState(seed, tuple(names)).generator()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Affine
# ---------------------------------------------------------------------------


def matmul_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[n, o] = sum_i x[n, i] * w[i, o] + b[o]``."""
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"affine shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    return x @ w + b


def matmul_affine_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return ``(d_input, d_weights, d_bias)``."""
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad * (x > 0)


# ---------------------------------------------------------------------------
# 3x3 convolution, stride 1, zero padding 1
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, L, D) -> (B, C*9, L*D), column order (c, u, v) matching kernels."""
    b, c, length, depth = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, length, depth), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            cols[:, :, 3 * u + v] = xp[:, :, u : u + length, v : v + depth]
    return cols.reshape(b, c * 9, length * depth)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    b, c, length, depth = shape
    cols = cols.reshape(b, c, 9, length, depth)
    xp = np.zeros((b, c, length + 2, depth + 2), dtype=cols.dtype)
    for u in range(3):
        for v in range(3):
            xp[:, :, u : u + length, v : v + depth] += cols[:, :, 3 * u + v]
    return xp[:, :, 1:-1, 1:-1]


def _check_conv(x, kernels, bias):
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 expects 4-d input and (Co,Ci,3,3) kernels, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv3x3 channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv3x3 bias {bias.shape} does not match kernels {kernels.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"conv3x3 needs non-empty spatial extents, got {x.shape}")


def conv3x3(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_conv(x, kernels, bias)
    b, _, length, depth = x.shape
    co = kernels.shape[0]
    out = np.matmul(kernels.reshape(co, -1), _im2col(x))
    out += bias[None, :, None]
    return out.reshape(b, co, length, depth)


def conv3x3_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Return ``(d_input, d_kernels, d_bias)`` for :func:`conv3x3`."""
    b, _, length, depth = x.shape
    co = kernels.shape[0]
    g = grad.reshape(b, co, length * depth)
    cols = _im2col(x)
    kmat = kernels.reshape(co, -1)
    d_k = np.einsum("bop,bkp->ok", g, cols, optimize=True).reshape(kernels.shape)
    d_x = _col2im(np.matmul(kmat.T, g), x.shape)
    return d_x, d_k, g.sum(axis=(0, 2))


# ---------------------------------------------------------------------------
# Global (1x1) adaptive average pooling
# ---------------------------------------------------------------------------


def adaptive_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def adaptive_avg_pool_backward(grad: np.ndarray, shape) -> np.ndarray:
    length, depth = shape[2], shape[3]
    return np.broadcast_to(grad[:, :, None, None] / (length * depth), shape).copy()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def bce_with_logits(z, y):
    """Stable binary cross-entropy on logits.

    Returns ``(loss, dloss/dz)`` elementwise; both have the broadcast shape
    of ``z`` and ``y``.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float = 1e-3,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``state.t`` is incremented before the bias corrections, so the first
    call runs with t = 1.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))
            raise NumericalError(
                f"non-finite gradient for parameter {name!r}",
                {"parameter": name, "step": state.t + 1, "first_bad_index": bad[0].tolist(), "n_bad": len(bad)},
            )
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        w = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        w -= lr * step + lr * weight_decay * w
    return state
