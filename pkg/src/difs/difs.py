"""Adaptive training loop for the robustness-conditioned diffusion sampler.

Each iteration samples disturbances from the current model, rolls them out,
lowers the robustness threshold to the bottom-alpha quantile of the new batch,
and retrains on every collected pair at or below the threshold.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import SeededRng, blocks, parallel_map, quantile
from .denoiser import AdamState, init_params, train
from .diffusion import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_K,
    make_schedule,
    sample,
)
from .envs import EnvironmentSpec, RolloutRecord
from .runs import RunArtifacts

log = logging.getLogger(__name__)

ROLLOUT_BLOCK = 2000


@dataclass
class DifsConfig:
    sample_budget: int = 50000
    samples_per_iter: int = 10000
    train_steps_per_iter: int = 10000
    alpha: float = 0.5
    K: int = DEFAULT_K
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    batch_size: int = 128
    lr: float = 1e-3
    conditional: bool = True
    clip_condition: bool = True
    ablation_condition: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_iter < 1 or self.sample_budget < 1:
            raise ValueError("sample_budget and samples_per_iter must be positive")
        if self.samples_per_iter > self.sample_budget:
            raise ValueError("sample_budget is smaller than one iteration (samples_per_iter)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.train_steps_per_iter < 0:
            raise ValueError("train_steps_per_iter must be non-negative")

    @property
    def n_iterations(self) -> int:
        return self.sample_budget // self.samples_per_iter


class LabeledDataset:
    """Append-only collection of (disturbance, robustness, iteration) rows."""

    def __init__(self, dim: int):
        self.dim = dim
        self.x = np.empty((0, dim))
        self.r = np.empty(0)
        self.iteration = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.r.shape[0]

    def append(self, x, r, iteration: int) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = np.asarray(r, dtype=np.float64).ravel()
        if x.shape[1] != self.dim or x.shape[0] != r.shape[0]:
            raise ValueError("appended rows do not match the dataset shape")
        self.x = np.concatenate([self.x, x])
        self.r = np.concatenate([self.r, r])
        self.iteration = np.concatenate([self.iteration, np.full(r.shape[0], iteration)])


def update_threshold(robustness, alpha: float, r_fail: float) -> float:
    """Bottom-alpha quantile of the batch, never below ``r_fail``."""
    return max(r_fail, quantile(robustness, alpha))


def sample_conditions(n: int, r_fail: float, r_i: float, rng: SeededRng) -> np.ndarray:
    if r_i < r_fail:
        raise ValueError(f"threshold {r_i} lies below the failure threshold {r_fail}")
    if r_i == r_fail:
        return np.full(n, float(r_fail))
    return rng.uniform(r_fail, r_i, n)


def select_training_set(x: np.ndarray, r: np.ndarray, r_i: float) -> tuple[np.ndarray, np.ndarray]:
    mask = r <= r_i
    return x[mask], r[mask]


def evaluate_robustness(env: EnvironmentSpec, x: np.ndarray, threads: int = 1) -> np.ndarray:
    parts = parallel_map(lambda b: env.robustness(x[b[0]:b[1]]), blocks(x.shape[0], ROLLOUT_BLOCK), threads)
    return np.concatenate(parts)


def _training_set(data: LabeledDataset, r_i: float, fallback: int):
    x, r = select_training_set(data.x, data.r, r_i)
    if x.shape[0] == 0:
        # lowest-robustness rows, stable on ties
        idx = np.sort(np.argsort(data.r, kind="stable")[:fallback])
        log.warning("no pair with r <= %.4g; training on the %d lowest-robustness pairs", r_i, fallback)
        x, r = data.x[idx], data.r[idx]
    return x, r


def difs_run(
    config: DifsConfig,
    env: EnvironmentSpec,
    rng: SeededRng,
    threads: int = 1,
    on_progress: Callable[[dict], None] | None = None,
) -> RunArtifacts:
    """Run the full adaptive campaign within ``config.sample_budget`` rollouts."""
    start = time.perf_counter()
    N, alpha, r_fail = config.samples_per_iter, config.alpha, env.r_fail
    schedule = make_schedule(config.K, config.beta_min, config.beta_max)
    params = init_params(env.dim, config.hidden, rng.child("init"))
    params.x_shift = env.mean.copy()
    params.x_scale = np.sqrt(env.var)
    adam = AdamState.zeros_like(params, lr=config.lr)
    data = LabeledDataset(env.dim)
    fallback = math.ceil(alpha * N)

    thresholds: list[float] = []
    quantiles: list[float] = []
    losses: list[float] = []
    progress: list[dict] = []
    converged = None

    for it in range(config.n_iterations):
        if it == 0:
            x = env.sample_nominal(N, rng.child("nominal"))
        else:
            if config.conditional:
                cond = sample_conditions(N, r_fail, thresholds[-1], rng.child("conditions", it))
            else:
                cond = config.ablation_condition
            x = sample(params, schedule, cond, N, rng.child("sample", it), threads)
        r = evaluate_robustness(env, x, threads)
        data.append(x, r, it)

        q = quantile(r, alpha)
        r_i = max(r_fail, q)
        if thresholds:
            r_i = min(thresholds[-1], r_i)
        thresholds.append(r_i)
        quantiles.append(q)
        if converged is None and r_i == r_fail:
            converged = it

        x_tr, r_tr = _training_set(data, r_i, fallback)
        if config.conditional:
            r_cond = np.maximum(r_tr, r_fail) if config.clip_condition else r_tr
            params.r_lo, params.r_hi = float(r_cond.min()), float(r_cond.max())
        else:
            params.r_lo, params.r_hi = config.ablation_condition, config.ablation_condition + 1.0
            r_cond = np.full(r_tr.shape[0], config.ablation_condition)
        step_losses = train(params, adam, x_tr, r_cond, schedule, config.train_steps_per_iter,
                            rng.child("train", it), config.batch_size)
        tail = step_losses[-200:]
        losses.append(float(np.mean(tail)) if tail else float("nan"))

        record = {
            "iteration": it,
            "threshold": r_i,
            "quantile": q,
            "batch_failure_fraction": float(np.mean(r <= r_fail)),
            "train_size": int(x_tr.shape[0]),
            "dataset_size": len(data),
            "loss": losses[-1],
        }
        progress.append(record)
        log.info("difs %s", json.dumps(record))
        if on_progress is not None:
            on_progress(record)

    cfg = asdict(config)
    cfg["r_fail"] = r_fail
    return RunArtifacts(
        method="difs",
        env_name=env.name,
        config=cfg,
        seed=config.seed,
        model=params,
        schedule=schedule,
        dataset_x=data.x,
        dataset_r=data.r,
        thresholds=thresholds,
        quantiles=quantiles,
        losses=losses,
        progress=progress,
        converged_iteration=converged,
        rollouts=len(data),
        wall_clock=time.perf_counter() - start,
    )


def final_failure_samples(artifacts: RunArtifacts, env: EnvironmentSpec, n: int, rng: SeededRng,
                          threads: int = 1) -> list[RolloutRecord]:
    """Draw ``n`` samples at the failure threshold and label them."""
    x = artifacts.draw(n, rng, threads)
    s = env.simulate(x)
    r = env.robustness_fn(s)
    return [RolloutRecord(x[i], s[i], float(r[i]), bool(r[i] <= env.r_fail)) for i in range(n)]
