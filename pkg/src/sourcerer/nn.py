"""Small dense-array numerics for TempCNN: layer ops with hand-written
reverse-mode gradients, parameter containers, Adam and seeded RNG streams.

Every op comes as a pair ``op(...)`` / ``op_backward(grad_out, ...)``.  The
backward function receives the same inputs as the forward one, so a training
loop only has to keep the forward inputs on a tape.  Parameters and
activations are float32; reductions (matmuls, batch statistics, losses)
accumulate in float64 and round back once.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
ACC = np.float64
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, n_bad: int):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r} ({n_bad} bad values)")


class RngStream:
    """Deterministic random stream identified by a seed and a path.

    Uses the counter-based Philox generator.  ``child(name)`` derives an
    independent sub-stream, so e.g. dropout draws never perturb the batch
    order.
    """

    algorithm = "philox"

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed)
        self.path = path
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(path.encode())])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.path}/{name}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"


class ParamSet:
    """Ordered, named collection of float32 arrays with a trainable flag each.

    Non-trainable entries (batch-norm running statistics, frozen layers) live
    in the same set so that they are saved, cloned and compared together.
    """

    def __init__(self):
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._data:
            raise KeyError(name)
        old = self._data[name]
        if value.shape != old.shape:
            raise ShapeError("ParamSet", f"{name}: shape {value.shape} != {old.shape}")
        self._data[name] = np.ascontiguousarray(value, dtype=DTYPE)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._data:
            raise KeyError(name)
        self._trainable[name] = bool(flag)

    def trainable_names(self) -> list[str]:
        return [n for n in self._data if self._trainable[n]]

    def count(self, trainable_only: bool = True) -> int:
        return sum(v.size for n, v in self._data.items() if self._trainable[n] or not trainable_only)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._data.items():
            out.add(name, value.copy(), self._trainable[name])
        return out

    def flat(self, names: list[str] | None = None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self._data[n].ravel() for n in names]) if names else np.zeros(0, DTYPE)


# ---------------------------------------------------------------------------
# layer ops


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Temporal convolution with zero "same" padding.

    x is N x C_in x T, w is C_out x C_in x K (K odd), b is C_out.
    Returns N x C_out x T.  ``cols`` may carry a precomputed :func:`im2col`.
    """
    if cols is None:
        cols = im2col(x, w.shape)
    n, _, t = x.shape
    out = cols @ w.reshape(w.shape[0], -1).T.astype(ACC)
    out += b.astype(ACC)
    return out.reshape(n, t, -1).transpose(0, 2, 1).astype(DTYPE)


def conv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, b: np.ndarray,
                    cols: np.ndarray | None = None):
    """Returns (dx, dw, db) for :func:`conv1d`."""
    n, c, t = x.shape
    o = w.shape[0]
    if cols is None:
        cols = im2col(x, w.shape)
    g = g.astype(ACC)
    g2 = g.transpose(0, 2, 1).reshape(n * t, o)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    # input gradient is a "same" convolution of g with the flipped, transposed kernel
    w_t = w.astype(ACC)[:, :, ::-1].transpose(1, 0, 2)
    gcols = im2col(g, w_t.shape)
    dx = (gcols @ w_t.reshape(c, -1).T).reshape(n, t, c).transpose(0, 2, 1)
    return dx, dw, db


def im2col(x: np.ndarray, w_shape) -> np.ndarray:
    """(N*T) x (C*K) matrix of zero-padded temporal windows."""
    if x.ndim != 3 or len(w_shape) != 3:
        raise ShapeError("conv1d", f"expected 3-d input and weights, got {x.shape} and {tuple(w_shape)}")
    n, c, t = x.shape
    o, c_w, k = w_shape
    if c != c_w:
        raise ShapeError("conv1d", f"input has {c} channels but weights expect {c_w}")
    if k % 2 == 0:
        raise ShapeError("conv1d", f"kernel length must be odd, got {k}")
    pad = (k - 1) // 2
    xp = np.pad(x.astype(ACC), ((0, 0), (0, 0), (pad, pad)))
    # n, c, t, k -> n, t, c, k -> (n*t) x (c*k)
    win = sliding_window_view(xp, k, axis=2)
    return win.transpose(0, 2, 1, 3).reshape(n * t, c * k)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``x @ w + b`` with x N x D, w D x H, b H."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("dense", f"incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.astype(ACC) @ w.astype(ACC)
    out += b.astype(ACC)
    return out.astype(DTYPE)


def dense_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, b: np.ndarray):
    g = g.astype(ACC)
    return g @ w.T.astype(ACC), x.T.astype(ACC) @ g, g.sum(axis=0)


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 3:
        return (0, 2)
    if x.ndim == 2:
        return (0,)
    raise ShapeError("batch_norm1d", f"expected 2-d or 3-d input, got {x.shape}")


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, 1) if ndim == 3 else v.reshape(1, -1)


def batch_norm1d(x, gamma, beta, running_mean, running_var, mode: str = "batch",
                 momentum: float = 0.1, eps: float = BN_EPS):
    """Batch normalization over the channel axis (axis 1).

    ``mode="batch"`` normalizes with the statistics of ``x`` (over batch and
    time) and returns exponentially updated running statistics;
    ``mode="frozen"`` normalizes with the stored running statistics and
    returns them untouched.  Returns ``(y, new_mean, new_var)``.
    """
    axes = _bn_axes(x)
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError("batch_norm1d", f"{name} has shape {v.shape}, expected ({c},)")
    if mode == "batch":
        m = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2:
            raise ValueError("batch_norm1d: batch statistics need at least 2 samples in the batch")
        x64 = x.astype(ACC)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(DTYPE)
        new_var = ((1 - momentum) * running_var + momentum * var * m / (m - 1)).astype(DTYPE)
    elif mode == "frozen":
        x64 = x.astype(ACC)
        mean = running_mean.astype(ACC)
        var = running_var.astype(ACC)
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
    y = xhat * _bn_bcast(gamma.astype(ACC), x.ndim) + _bn_bcast(beta.astype(ACC), x.ndim)
    return y.astype(DTYPE), new_mean, new_var


def batch_norm1d_backward(g, x, gamma, beta, running_mean, running_var, mode: str = "batch",
                          eps: float = BN_EPS):
    """Returns (dx, dgamma, dbeta) for :func:`batch_norm1d`."""
    axes = _bn_axes(x)
    nd = x.ndim
    x64 = x.astype(ACC)
    g = g.astype(ACC)
    if mode == "batch":
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
    else:
        mean = running_mean.astype(ACC)
        var = running_var.astype(ACC)
    inv_std = _bn_bcast(1.0 / np.sqrt(var + eps), nd)
    xhat = (x64 - _bn_bcast(mean, nd)) * inv_std
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * _bn_bcast(gamma.astype(ACC), nd)
    if mode == "batch":
        m = np.prod([x.shape[a] for a in axes])
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def dropout_mask(shape, rate: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.gen.random(shape) >= rate
    return keep.astype(DTYPE) / DTYPE(1.0 - rate)


def dropout(x: np.ndarray, rate: float, mode: str, rng: RngStream | None = None):
    """Inverted dropout.  Returns ``(y, mask)``; the mask is None in eval mode."""
    if mode == "eval" or rate == 0.0:
        return x, None
    mask = dropout_mask(x.shape, rate, rng)
    return x * mask, mask


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels``; returns (loss, probs)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    z = logits.astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    nll = log_norm - z[idx, labels]
    probs = np.exp(z - log_norm[:, None])
    return float(nll.mean()), probs


def softmax_cross_entropy_backward(probs: np.ndarray, labels) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    p = np.asarray(probs, dtype=ACC)
    return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())


def cosine_logits(x: np.ndarray, w: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled cosine similarity between rows of x (N x D) and the
    columns of w (D x C), i.e. a classifier over L2-normalized prototypes."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("cosine_logits", f"incompatible shapes x{x.shape} w{w.shape}")
    u, _ = _row_normalize(x.astype(ACC))
    p, _ = _row_normalize(w.astype(ACC).T)
    return (u @ p.T / temperature).astype(DTYPE)


def cosine_logits_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, temperature: float):
    u, rx = _row_normalize(x.astype(ACC))
    p, rw = _row_normalize(w.astype(ACC).T)
    g = g.astype(ACC) / temperature
    du = g @ p
    dp = g.T @ u
    dx = (du - u * (du * u).sum(axis=1, keepdims=True)) / rx
    dwt = (dp - p * (dp * p).sum(axis=1, keepdims=True)) / rw
    return dx, dwt.T


def _row_normalize(a: np.ndarray, eps: float = 1e-12):
    r = np.sqrt((a * a).sum(axis=1, keepdims=True))
    r = np.maximum(r, eps)
    return a / r, r


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    # moments are kept in float64; parameters stay float32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        st = cls(**hyper)
        for name in params.trainable_names():
            st.m[name] = np.zeros(params[name].shape, ACC)
            st.v[name] = np.zeros(params[name].shape, ACC)
        return st


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState):
    """One Adam update with bias correction, in place.

    Only entries that are trainable *and* tracked by ``state`` move; a missing
    gradient counts as zero.  Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        # one cheap reduction first; the exact count only on failure
        if name in state.m and not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, int((~np.isfinite(g)).sum()))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** state.step)
    sqrt_corr2 = np.sqrt(1.0 - b2 ** state.step)
    for name in state.m:
        if not params.is_trainable(name):
            continue
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, ACC)
        elif g.shape != p.shape:
            raise ShapeError("adam_step", f"{name}: gradient shape {g.shape} != {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        denom = np.sqrt(v)
        denom /= sqrt_corr2
        denom += state.epsilon
        np.divide(m, denom, out=denom)
        denom *= step_size
        params[name] = p - denom
    return params, state
