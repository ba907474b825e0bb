"""Cross-entropy method with a two-component diagonal Gaussian mixture proposal.

Each iteration draws from the proposal, keeps the elite pairs below the
bottom-alpha robustness quantile (floored at the failure threshold), and
refits the mixture by weighted EM with likelihood-ratio weights p(x)/q(x).
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import LOG_2PI, SeededRng, quantile
from .envs import EnvironmentSpec, nominal_logpdf
from .runs import RunArtifacts

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
GMM_FORMAT = "difs-gmm"


@dataclass
class Gmm:
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)
    fit_history: list[float] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.variances <= 0):
            raise ValueError("mixture variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"format": GMM_FORMAT, "weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Gmm":
        return cls(d["weights"], d["means"], d["variances"])


def gmm_sample(g: Gmm, n: int, rng: SeededRng) -> np.ndarray:
    comp = rng.choice(len(g.weights), n, p=g.weights)
    z = rng.normal((n, g.dim))
    return g.means[comp] + np.sqrt(g.variances[comp]) * z


def _component_logpdf(g: Gmm, x: np.ndarray) -> np.ndarray:
    """(n, C) array of log N(x_i; mu_c, diag(var_c))."""
    quad = ((x[:, None, :] - g.means[None]) ** 2 / g.variances[None]).sum(axis=2)
    logdet = np.log(g.variances).sum(axis=1)
    return -0.5 * (g.dim * LOG_2PI + logdet[None] + quad)


def gmm_logpdf(g: Gmm, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != g.dim:
        raise ValueError(f"dimension mismatch: mixture has {g.dim}, x has {x.shape[1]}")
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    out = logsumexp(_component_logpdf(g, x) + logw[None], axis=1)
    return float(out[0]) if single else out


def _kmeanspp(x: np.ndarray, w: np.ndarray, C: int, rng: SeededRng) -> np.ndarray:
    centers = [x[rng.choice(x.shape[0], None, p=w)]]
    for _ in range(1, C):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        p = w * d2
        if p.sum() <= 0:
            p = w
        centers.append(x[rng.choice(x.shape[0], None, p=p / p.sum())])
    return np.array(centers)


def weighted_em_fit(samples, log_weights, n_components: int, rng: SeededRng, max_iter: int = 200,
                    tol: float = 1e-6, var_floor: float = VAR_FLOOR) -> Gmm:
    """Weighted maximum-likelihood diagonal GMM by EM.

    ``fit_history`` on the result holds the weighted mean log-likelihood after
    each M-step; EM guarantees it is non-decreasing.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    lw = np.asarray(log_weights, dtype=np.float64)
    if x.shape[0] < n_components:
        raise ValueError(f"need at least {n_components} samples, got {x.shape[0]}")
    if lw.shape != (x.shape[0],) or not np.all(np.isfinite(lw)):
        raise ValueError("log-weights must be finite, one per sample")
    w = np.exp(lw - lw.max())
    if w.sum() <= 0:
        raise ValueError("all importance weights vanish")
    w /= w.sum()

    means = _kmeanspp(x, w, n_components, rng)
    gvar = np.maximum((w[:, None] * (x - w @ x) ** 2).sum(axis=0), var_floor)
    g = Gmm(np.full(n_components, 1.0 / n_components), means, np.tile(gvar, (n_components, 1)))

    history: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        logp = _component_logpdf(g, x) + np.log(np.maximum(g.weights, 1e-300))[None]
        norm = logsumexp(logp, axis=1, keepdims=True)
        resp = np.exp(logp - norm) * w[:, None]  # (n, C), rows sum to w_i
        nk = resp.sum(axis=0)
        keep = nk > 1e-12
        new_means = g.means.copy()
        new_vars = g.variances.copy()
        new_means[keep] = (resp[:, keep].T @ x) / nk[keep, None]
        for c in np.flatnonzero(keep):
            diff = x - new_means[c]
            new_vars[c] = np.maximum(resp[:, c] @ (diff * diff) / nk[c], var_floor)
        weights = nk / nk.sum()
        g = Gmm(weights, new_means, new_vars)
        ll = float(w @ gmm_logpdf(g, x))
        history.append(ll)
        if ll - prev < tol:
            break
        prev = ll
    g.fit_history = history
    return g


def nominal_gmm(env: EnvironmentSpec, n_components: int = 2) -> Gmm:
    return Gmm(np.full(n_components, 1.0 / n_components), np.tile(env.mean, (n_components, 1)),
               np.tile(env.var, (n_components, 1)))


@dataclass
class CemConfig:
    sample_budget: int = 50000
    samples_per_iter: int = 10000
    alpha: float = 0.5
    n_components: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_iter < 1 or self.samples_per_iter > self.sample_budget:
            raise ValueError("samples_per_iter must lie in [1, sample_budget]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_components < 1:
            raise ValueError("n_components must be positive")

    @property
    def n_iterations(self) -> int:
        return self.sample_budget // self.samples_per_iter


def cem_run(config: CemConfig, env: EnvironmentSpec, rng: SeededRng, on_progress=None) -> RunArtifacts:
    start = time.perf_counter()
    q = nominal_gmm(env, config.n_components)
    xs, rs, thresholds, quantiles, progress = [], [], [], [], []
    for it in range(config.n_iterations):
        x = gmm_sample(q, config.samples_per_iter, rng.child("sample", it))
        r = env.robustness(x)
        xs.append(x)
        rs.append(r)
        qv = quantile(r, config.alpha)
        gamma = max(env.r_fail, qv)
        thresholds.append(gamma)
        quantiles.append(qv)
        elite = r <= gamma
        stalled = int(elite.sum()) < config.n_components
        if stalled:
            log.warning("cem iteration %d: %d elites, keeping previous proposal", it, int(elite.sum()))
        else:
            lw = nominal_logpdf(env, x[elite]) - gmm_logpdf(q, x[elite])
            q = weighted_em_fit(x[elite], lw, config.n_components, rng.child("em", it))
        record = {"iteration": it, "threshold": gamma, "quantile": qv,
                  "batch_failure_fraction": float(np.mean(r <= env.r_fail)),
                  "elites": int(elite.sum()), "stalled": stalled}
        progress.append(record)
        log.info("cem %s", json.dumps(record))
        if on_progress is not None:
            on_progress(record)
    cfg = asdict(config)
    cfg["r_fail"] = env.r_fail
    converged = next((i for i, t in enumerate(thresholds) if t == env.r_fail), None)
    return RunArtifacts(
        method="cem2",
        env_name=env.name,
        config=cfg,
        seed=config.seed,
        model=q,
        dataset_x=np.concatenate(xs),
        dataset_r=np.concatenate(rs),
        thresholds=thresholds,
        quantiles=quantiles,
        progress=progress,
        converged_iteration=converged,
        rollouts=sum(len(r) for r in rs),
        wall_clock=time.perf_counter() - start,
    )
