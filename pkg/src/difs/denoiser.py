"""Conditional noise-prediction network eps(x_k, k, r) in plain numpy.

The network is an MLP over the concatenation
``[x_k, time_embed(k), cond_embed(r)]`` with SiLU hidden activations and a
linear output of width ``dim_x``. Gradients are hand-written reverse mode.

Two pieces of per-model state travel with the weights:

* robustness normalisation bounds ``(r_lo, r_hi)``; a condition ``r`` is mapped
  to ``(r - r_lo) / (r_hi - r_lo)`` before embedding. Values outside the
  training range are not clipped.
* a data standardisation ``(x_shift, x_scale)``; the diffusion runs on
  ``(x - x_shift) / x_scale``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SeededRng

TIME_DIM = 32
COND_DIM = 16
COND_MIN_FREQ = 0.05
COND_MAX_FREQ = 1.0
CHECKPOINT_FORMAT = "difs-denoiser"
CHECKPOINT_VERSION = 1


@dataclass
class DenoiserParams:
    weights: list[np.ndarray]  # layer l maps width[l] -> width[l+1], stored (in, out)
    biases: list[np.ndarray]
    dim_x: int
    hidden: list[int]
    activation: str = "silu"
    time_dim: int = TIME_DIM
    cond_dim: int = COND_DIM
    r_lo: float = 0.0
    r_hi: float = 1.0
    x_shift: np.ndarray = None
    x_scale: np.ndarray = None

    def __post_init__(self):
        if self.x_shift is None:
            self.x_shift = np.zeros(self.dim_x)
        if self.x_scale is None:
            self.x_scale = np.ones(self.dim_x)
        widths = self.widths
        if widths[0] != self.dim_x + self.time_dim + self.cond_dim or widths[-1] != self.dim_x:
            raise ValueError(f"inconsistent layer widths {widths} for dim_x={self.dim_x}")
        for W, b, (i, o) in zip(self.weights, self.biases, zip(widths[:-1], widths[1:])):
            if W.shape != (i, o) or b.shape != (o,):
                raise ValueError(f"layer shape {W.shape}/{b.shape} does not match ({i}, {o})")

    @property
    def widths(self) -> list[int]:
        return [self.dim_x + self.time_dim + self.cond_dim] + list(self.hidden) + [self.dim_x]

    @property
    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dim_x=self.dim_x,
            hidden=list(self.hidden),
            activation=self.activation,
            time_dim=self.time_dim,
            cond_dim=self.cond_dim,
            r_lo=self.r_lo,
            r_hi=self.r_hi,
            x_shift=self.x_shift.copy(),
            x_scale=self.x_scale.copy(),
        )


def init_params(
    dim_x: int,
    hidden: list[int],
    rng: SeededRng,
    time_dim: int = TIME_DIM,
    cond_dim: int = COND_DIM,
) -> DenoiserParams:
    """He-style init: W ~ N(0, 1/fan_in) for hidden layers, the output layer scaled by 0.1; zero biases."""
    if dim_x < 1:
        raise ValueError("dim_x must be at least 1")
    if not hidden:
        raise ValueError("hidden layer list must be non-empty")
    if time_dim % 2 or cond_dim % 2:
        raise ValueError("embedding dimensions must be even")
    widths = [dim_x + time_dim + cond_dim] + list(hidden) + [dim_x]
    weights, biases = [], []
    for li, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        scale = 1.0 / math.sqrt(fan_in)
        if li == len(widths) - 2:
            scale *= 0.1
        weights.append(scale * rng.child("layer", li).normal((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenoiserParams(weights, biases, dim_x, list(hidden), time_dim=time_dim, cond_dim=cond_dim)


def _frequencies(dim_e: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim_e // 2
    return np.exp(-math.log(max_period) * np.arange(half) / half)


def time_embed(k, K: int, dim_e: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal features ``[sin(k w_j), cos(k w_j)]`` with ``w_j = 10000^(-j/half)``.

    ``k`` may be a scalar or an integer array; the result has a trailing axis of ``dim_e``.
    """
    if dim_e % 2:
        raise ValueError(f"embedding dimension must be even, got {dim_e}")
    k_arr = np.asarray(k)
    if np.any(k_arr < 1) or np.any(k_arr > K):
        raise ValueError(f"diffusion step must lie in [1, {K}]")
    return _sinusoid(k_arr.astype(np.float64), _frequencies(dim_e))


def _sinusoid(v: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    ang = v[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def normalize_condition(params: DenoiserParams, r) -> np.ndarray:
    span = params.r_hi - params.r_lo
    if span <= 0:
        span = 1.0
    return (np.asarray(r, dtype=np.float64) - params.r_lo) / span


def cond_embed(params: DenoiserParams, r) -> np.ndarray:
    """Sinusoidal features of the normalised robustness.

    Frequencies are geometric in [0.05, 1] so every feature is smooth and close
    to monotone on [0, 1]: the network is queried at r_fail, the bottom edge of
    the training range, and high frequencies extrapolate poorly there.
    """
    half = params.cond_dim // 2
    freqs = np.exp(np.linspace(math.log(COND_MIN_FREQ), math.log(COND_MAX_FREQ), half))
    return _sinusoid(normalize_condition(params, r), freqs)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _inputs(params: DenoiserParams, x_k, k, r, K: int | None):
    x_k = np.atleast_2d(np.asarray(x_k, dtype=np.float64))
    if x_k.shape[1] != params.dim_x:
        raise ValueError(f"dimension mismatch: expected {params.dim_x}, got {x_k.shape[1]}")
    if not np.all(np.isfinite(x_k)):
        raise ValueError("non-finite input to denoiser")
    n = x_k.shape[0]
    k = np.broadcast_to(np.asarray(k), (n,))
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
    temb = time_embed(k, K if K is not None else int(np.max(k)), params.time_dim)
    return np.concatenate([x_k, temb, cond_embed(params, r)], axis=1)


def _forward_cached(params: DenoiserParams, h: np.ndarray):
    pre, post = [], [h]
    last = len(params.weights) - 1
    for li, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        if li == last:
            return z, pre, post
        h, s = _silu(z)
        pre.append((z, s))
        post.append(h)


def forward(params: DenoiserParams, x_k, k, r, K: int | None = None) -> np.ndarray:
    """Predicted noise for a single vector or an ``(n, dim_x)`` batch."""
    single = np.ndim(x_k) == 1
    out, _, _ = _forward_cached(params, _inputs(params, x_k, k, r, K))
    return out[0] if single else out


def loss_and_grad_fixed(params: DenoiserParams, x0, r, k, eps, schedule):
    """Loss and exact gradient for given diffusion steps ``k`` and noise ``eps``.

    ``x0`` is in data space and is standardised with the model's shift/scale.
    The loss is ``mean_b ||eps_b - eps_hat_b||^2``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    z0 = (x0 - params.x_shift) / params.x_scale
    ab = schedule.alpha_bar[np.asarray(k) - 1][:, None]
    x_k = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    h0 = _inputs(params, x_k, k, r, schedule.K)
    out, pre, post = _forward_cached(params, h0)
    n = x0.shape[0]
    diff = out - eps
    loss = float(np.sum(diff * diff) / n)

    gW = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    delta = 2.0 * diff / n
    for li in range(len(params.weights) - 1, -1, -1):
        gW[li] = post[li].T @ delta
        gb[li] = delta.sum(axis=0)
        if li == 0:
            break
        delta = delta @ params.weights[li].T
        z, s = pre[li - 1]
        delta = delta * (s * (1.0 + z * (1.0 - s)))
    return loss, gW + gb


def loss_and_grad(params: DenoiserParams, x0, r, schedule, rng: SeededRng):
    """Stochastic noise-prediction loss; draws ``k ~ U{1..K}`` and ``eps ~ N(0, I)`` per row."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    n = x0.shape[0]
    k = rng.integers(1, schedule.K + 1, n)
    eps = rng.normal((n, params.dim_x))
    return loss_and_grad_fixed(params, x0, r, k, eps, schedule)


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
    def zeros_like(cls, params: DenoiserParams, **hyper) -> "AdamState":
        arrs = params.arrays
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], **hyper)


def adam_step(params: DenoiserParams, grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    arrs = params.arrays
    if len(grads) != len(arrs) or any(g.shape != a.shape for g, a in zip(grads, arrs)):
        raise ValueError("gradient shapes do not match parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr * math.sqrt(1.0 - b2**state.t) / (1.0 - b1**state.t)
    eps_hat = state.eps * math.sqrt(1.0 - b2**state.t)
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= step * m / (np.sqrt(v) + eps_hat)
    return params, state


def train(
    params: DenoiserParams,
    state: AdamState,
    x,
    r,
    schedule,
    steps: int,
    rng: SeededRng,
    batch_size: int = 128,
) -> list[float]:
    """Minibatch training with indices drawn with replacement; returns the per-step losses."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, x.shape[0], batch_size)
        loss, grads = loss_and_grad(params, x[idx], r[idx], schedule, rng)
        adam_step(params, grads, state)
        losses.append(loss)
    return losses


def save_checkpoint(path, params: DenoiserParams, schedule=None, provenance: dict | None = None) -> None:
    """JSON checkpoint. Floats are written with ``repr`` precision, so a round trip is exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dim_x": params.dim_x,
        "hidden": list(params.hidden),
        "activation": params.activation,
        "time_dim": params.time_dim,
        "cond_dim": params.cond_dim,
        "r_lo": params.r_lo,
        "r_hi": params.r_hi,
        "x_shift": params.x_shift.tolist(),
        "x_scale": params.x_scale.tolist(),
        "layers": [
            {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in zip(params.weights, params.biases)
        ],
        "schedule": None if schedule is None else schedule.to_dict(),
        "provenance": provenance or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[DenoiserParams, dict | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    weights = [np.asarray(l["weight"], dtype=np.float64).reshape(l["shape"]) for l in doc["layers"]]
    biases = [np.asarray(l["bias"], dtype=np.float64) for l in doc["layers"]]
    params = DenoiserParams(
        weights,
        biases,
        doc["dim_x"],
        doc["hidden"],
        activation=doc["activation"],
        time_dim=doc["time_dim"],
        cond_dim=doc["cond_dim"],
        r_lo=doc["r_lo"],
        r_hi=doc["r_hi"],
        x_shift=np.asarray(doc["x_shift"]),
        x_scale=np.asarray(doc["x_scale"]),
    )
    return params, doc["schedule"], doc["provenance"]
