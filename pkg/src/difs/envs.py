"""Black-box validation problems.

Every environment maps a batch of disturbances ``(n, d)`` to a batch of
state trajectories and robustness values. Rollouts are deterministic in the
disturbance; all randomness lives in ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import gaussian_logpdf, gaussian_sample, SeededRng

# Pendulum constants (Gymnasium Pendulum-v1 dynamics, upright at theta = 0).
GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
DT = 0.05
MAX_SPEED = 8.0
MAX_TORQUE = 2.0
KP = 6.1
KD = 2.0
HORIZON = 100
FAIL_ANGLE = math.pi / 6


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    dim: int
    mean: np.ndarray
    var: np.ndarray
    simulate: Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n, ...) trajectories
    robustness_fn: Callable[[np.ndarray], np.ndarray]  # trajectories -> (n,)
    features_fn: Callable[[np.ndarray], np.ndarray]  # trajectories -> (n, m)
    r_fail: float = 0.0

    def sample_nominal(self, n: int, rng: SeededRng) -> np.ndarray:
        return gaussian_sample(self.mean, self.var, rng, n)

    def robustness(self, x) -> np.ndarray:
        return self.robustness_fn(self.simulate(_batch(self, x)))

    def features(self, x) -> np.ndarray:
        return self.features_fn(self.simulate(_batch(self, x)))


@dataclass
class RolloutRecord:
    x: np.ndarray
    states: np.ndarray
    robustness: float
    is_failure: bool


def _batch(env: EnvironmentSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != env.dim:
        raise ValueError(f"{env.name}: expected disturbance dimension {env.dim}, got {x.shape[1]}")
    return x


def toy_robustness(x) -> np.ndarray:
    x = np.atleast_2d(x)
    return 3.0 - np.minimum(np.abs(x[:, 0]), x[:, 1])


def toy_env() -> EnvironmentSpec:
    """Two-corner problem: x ~ N(0, I_2), failure when min(|x0|, x1) >= 3."""
    return EnvironmentSpec(
        name="toy",
        dim=2,
        mean=np.zeros(2),
        var=np.ones(2),
        simulate=lambda x: np.array(x, dtype=np.float64),
        robustness_fn=toy_robustness,
        features_fn=lambda s: s,
        r_fail=0.0,
    )


def simulate_pendulum(w: np.ndarray, kp: float = KP, kd: float = KD) -> np.ndarray:
    """Angle trajectories ``(n, HORIZON)`` of the PD-stabilised pendulum under torque noise ``w``.

    Semi-implicit Euler; control torque clipped to +-2 before the disturbance
    is added, angular velocity clipped to +-8.
    """
    w = np.atleast_2d(w)
    n, T = w.shape
    th = np.zeros(n)
    om = np.zeros(n)
    out = np.empty((n, T))
    for t in range(T):
        u = np.clip(-kp * th - kd * om, -MAX_TORQUE, MAX_TORQUE)
        acc = 3.0 * GRAVITY / (2.0 * LENGTH) * np.sin(th) + 3.0 / (MASS * LENGTH**2) * (u + w[:, t])
        om = np.clip(om + acc * DT, -MAX_SPEED, MAX_SPEED)
        th = th + om * DT
        out[:, t] = th
    return out


def pendulum_robustness(theta: np.ndarray) -> np.ndarray:
    return FAIL_ANGLE - np.max(np.abs(np.atleast_2d(theta)), axis=1)


def pendulum_env() -> EnvironmentSpec:
    """Inverted pendulum with 100 per-step torque disturbances ~ N(0, 0.5)."""
    return EnvironmentSpec(
        name="pendulum",
        dim=HORIZON,
        mean=np.zeros(HORIZON),
        var=np.full(HORIZON, 0.5),
        simulate=simulate_pendulum,
        robustness_fn=pendulum_robustness,
        features_fn=lambda s: s,
        r_fail=0.0,
    )


ENVIRONMENTS = {"toy": toy_env, "pendulum": pendulum_env}


def make_env(name: str) -> EnvironmentSpec:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def rollout(env: EnvironmentSpec, x) -> RolloutRecord:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != env.dim:
        raise ValueError(f"{env.name}: expected a vector of dimension {env.dim}, got shape {x.shape}")
    s = env.simulate(x[None, :])
    r = float(env.robustness_fn(s)[0])
    return RolloutRecord(x=x, states=s[0], robustness=r, is_failure=r <= env.r_fail)


def rollout_batch(env: EnvironmentSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Trajectories and robustness for every row of ``x``."""
    s = env.simulate(_batch(env, x))
    return s, env.robustness_fn(s)


def nominal_logpdf(env: EnvironmentSpec, x):
    return gaussian_logpdf(x, env.mean, env.var)


def toy_failure_probability() -> float:
    """P(min(|x0|, x1) >= 3) under N(0, I) = 2 Phi(-3)^2."""
    tail = 0.5 * math.erfc(3.0 / math.sqrt(2.0))
    return 2.0 * tail * tail


def toy_failure_is_estimate(n: int, rng: SeededRng, shift: float = 3.5) -> tuple[float, float]:
    """Importance-sampling estimate of the toy failure probability.

    Proposal: equal mixture of N((+-shift, shift), I). Returns ``(estimate, std_error)``.
    """
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    x = rng.normal((n, 2)) + np.stack([sign * shift, np.full(n, shift)], axis=1)
    logp = gaussian_logpdf(x, np.zeros(2), np.ones(2))
    logq = np.logaddexp(
        gaussian_logpdf(x, np.array([-shift, shift]), np.ones(2)),
        gaussian_logpdf(x, np.array([shift, shift]), np.ones(2)),
    ) + math.log(0.5)
    w = np.exp(logp - logq) * (toy_robustness(x) <= 0.0)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(n))
