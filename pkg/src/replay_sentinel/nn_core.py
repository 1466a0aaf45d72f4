"""Numeric kernels for the TCN autoencoder.

Every layer is a pair of plain functions: a forward pass and a hand-derived
backward pass. Arrays are float64 with time on axis -2 and channels on
axis -1, so a single series is ``(T, d)`` and a mini-batch is ``(B, T, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from replay_sentinel.errors import NumericalError

LOG2 = math.log(2.0)


@dataclass
class ConvFilter:
    """Weight-normalised 1-D convolution parameters.

    ``v`` has shape ``(k, d_in, d_out)``; the effective weights are
    ``g * v / ||v||`` where the norm runs over each output filter's
    ``(k, d_in)`` slice.
    """

    v: np.ndarray
    g: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    causal: bool = True

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.v.ndim != 3:
            raise ValueError(f"v must have shape (k, d_in, d_out), got {self.v.shape}")
        d_out = self.v.shape[2]
        if self.g.shape != (d_out,) or self.bias.shape != (d_out,):
            raise ValueError("g and bias must have one entry per output filter")
        if int(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        self.dilation = int(self.dilation)

    @property
    def kernel_size(self) -> int:
        return self.v.shape[0]

    @property
    def d_in(self) -> int:
        return self.v.shape[1]

    @property
    def d_out(self) -> int:
        return self.v.shape[2]

    @property
    def n_params(self) -> int:
        return self.v.size + self.g.size + self.bias.size

    @classmethod
    def from_weights(cls, w, bias=None, dilation: int = 1, causal: bool = True) -> "ConvFilter":
        """Build a filter whose effective weights equal ``w`` (g = ||w||)."""
        w = np.asarray(w, dtype=np.float64)
        if w.ndim == 1:
            w = w.reshape(-1, 1, 1)
        g = np.sqrt(np.sum(w * w, axis=(0, 1)))
        if bias is None:
            bias = np.zeros(w.shape[2])
        return cls(v=w.copy(), g=g, bias=bias, dilation=dilation, causal=causal)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            **kw,
        )


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")


def weight_norm_effective(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Return ``g * v / ||v||`` with one norm per output filter (last axis)."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if v.ndim == 1:
        norm = np.sqrt(np.sum(v * v))
        if norm == 0.0:
            raise ValueError("direction vector has zero norm")
        return g * v / norm
    norm = np.sqrt(np.sum(v * v, axis=tuple(range(v.ndim - 1))))
    if np.any(norm == 0.0):
        raise ValueError("direction vector has zero norm for at least one filter")
    return v * (g / norm)


def _conv_padding(k: int, q: int, causal: bool) -> tuple[int, int]:
    shift = 0 if causal else q * (k // 2)
    return q * (k - 1) - shift, shift


def _pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    if left == 0 and right == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[-2] = (left, right)
    return np.pad(x, width)


def dilated_conv1d(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    """Dilated 1-D convolution with zero padding; output length equals input length.

    Causal: ``y[n] = sum_j W[j].T @ x[n - q*j]``.
    Acausal: ``y[n] = sum_j W[j].T @ x[n - q*(j - k//2)]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.d_in:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, filter expects {f.d_in}")
    _check_finite(x, "convolution input")
    k, q = f.kernel_size, f.dilation
    T = x.shape[-2]
    w = weight_norm_effective(f.v, f.g)
    left, right = _conv_padding(k, q, f.causal)
    xp = _pad_time(x, left, right)
    y = np.broadcast_to(f.bias, x.shape[:-1] + (f.d_out,)).copy()
    for j in range(k):
        off = q * (k - 1 - j)
        y += xp[..., off:off + T, :] @ w[j]
    return y


def dilated_conv1d_grads(x: np.ndarray, f: ConvFilter, grad_y: np.ndarray):
    """Backward pass of :func:`dilated_conv1d`.

    Returns ``(grad_x, grad_v, grad_g, grad_bias)``.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != x.shape[:-1] + (f.d_out,):
        raise ValueError(f"grad_y shape {grad_y.shape} does not match output shape")
    k, q = f.kernel_size, f.dilation
    T = x.shape[-2]
    norm = np.sqrt(np.sum(f.v * f.v, axis=(0, 1)))
    w = f.v * (f.g / norm)
    left, right = _conv_padding(k, q, f.causal)
    xp = _pad_time(x, left, right)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    gy2 = grad_y.reshape(-1, f.d_out)
    for j in range(k):
        off = q * (k - 1 - j)
        gw[j] = xp[..., off:off + T, :].reshape(-1, f.d_in).T @ gy2
        gxp[..., off:off + T, :] += grad_y @ w[j].T
    grad_x = gxp[..., left:left + T, :]
    grad_bias = gy2.sum(axis=0)
    vhat = f.v / norm
    grad_g = np.sum(gw * vhat, axis=(0, 1))
    grad_v = (f.g / norm) * (gw - vhat * grad_g)
    return grad_x, grad_v, grad_g, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    # subgradient at 0 is taken as 0
    return grad_y * (x > 0.0)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def spatial_dropout(x: np.ndarray, rate: float, training: bool, rng=None):
    """Drop whole channels with probability ``rate`` (inverted scaling).

    Returns ``(y, mask)`` where ``mask`` is a 0/1 array of shape
    ``x.shape[:-2] + (1, d)``. At inference ``y is x`` and the mask is all ones.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask_shape = x.shape[:-2] + (1, x.shape[-1])
    if not training or rate == 0.0:
        return x, np.ones(mask_shape)
    keep = (_as_rng(rng).random(mask_shape) >= rate).astype(np.float64)
    return x * (keep / (1.0 - rate)), keep


def spatial_dropout_grad(grad_y: np.ndarray, mask: np.ndarray, rate: float, training: bool = True) -> np.ndarray:
    if not training or rate == 0.0:
        return grad_y
    return grad_y * (mask / (1.0 - rate))


def temporal_avg_pool(x: np.ndarray, s: int) -> np.ndarray:
    """Average consecutive groups of ``s`` samples; a short last group is averaged as is."""
    if s < 1:
        raise ValueError(f"pool factor must be >= 1, got {s}")
    if s == 1:
        return x
    T = x.shape[-2]
    n_full = T // s
    parts = []
    if n_full:
        head = x[..., : n_full * s, :]
        parts.append(head.reshape(x.shape[:-2] + (n_full, s, x.shape[-1])).mean(axis=-2))
    if T % s:
        parts.append(x[..., n_full * s:, :].mean(axis=-2, keepdims=True))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-2)


def temporal_avg_pool_grad(grad_y: np.ndarray, s: int, T: int) -> np.ndarray:
    if s == 1:
        return grad_y
    sizes = np.full(grad_y.shape[-2], s, dtype=np.float64)
    if T % s:
        sizes[-1] = T % s
    return upsample_hold(grad_y / sizes[:, None], s, T)


def upsample_hold(x: np.ndarray, s: int, length: int | None = None) -> np.ndarray:
    """Repeat each sample ``s`` times along time, optionally truncating to ``length``."""
    if s < 1:
        raise ValueError(f"upsample factor must be >= 1, got {s}")
    y = x if s == 1 else np.repeat(x, s, axis=-2)
    if length is not None:
        y = y[..., :length, :]
    return y


def upsample_hold_grad(grad_y: np.ndarray, s: int, n_in: int) -> np.ndarray:
    if s == 1:
        return grad_y
    T = grad_y.shape[-2]
    pad = n_in * s - T
    g = _pad_time(grad_y, 0, pad)
    return g.reshape(g.shape[:-2] + (n_in, s, g.shape[-1])).sum(axis=-2)


def logcosh(r: np.ndarray) -> np.ndarray:
    a = np.abs(r)
    return a + np.log1p(np.exp(-2.0 * a)) - LOG2


def logcosh_loss(x: np.ndarray, x_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log-cosh reconstruction loss and its gradient with respect to ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    n = x.size
    # overflow here means the network already diverged; callers check finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        r = x_hat - x
        return float(np.sum(logcosh(r)) / n), np.tanh(r) / n


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, gr in enumerate(grads):
        if gr.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {gr.shape}, expected {params[i].shape}")
        if not np.all(np.isfinite(gr)):
            raise NumericalError(f"non-finite entries in gradient {i}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, gr, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * gr
        v = b2 * v + (1.0 - b2) * gr * gr
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(m=new_m, v=new_v, t=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state


def receptive_field(n_layers: int, k: int, mode: str = "causal") -> int:
    """Receptive field of a doubling-dilation stack, using the closed forms
    ``2**(L-1) * k`` (causal) and ``1 + (k/2) * (2**(L+1) - 2)`` (acausal)."""
    if n_layers < 1 or k < 1:
        raise ValueError("n_layers and k must be >= 1")
    if mode == "causal":
        return 2 ** (n_layers - 1) * k
    if mode == "acausal":
        # (k/2)(2^(L+1) - 2) == k (2^L - 1), always an integer
        return 1 + k * (2 ** n_layers - 1)
    raise ValueError(f"unknown mode {mode!r}")
