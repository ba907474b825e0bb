"""Run artifacts shared by the DiFS loop and the cross-entropy baseline, and the
binary dataset file format.

Dataset file layout (little-endian)::

    magic    4 bytes   b"DFDS"
    version  uint32    1
    d        uint32    disturbance dimension
    count    uint64    number of rows
    data     count x (d + 1) float64, row-major; each row is x_1..x_d, robustness
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import SeededRng

DATASET_MAGIC = b"DFDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


@dataclass
class RunArtifacts:
    method: str
    env_name: str
    config: dict
    seed: int
    model: Any
    schedule: Any = None
    dataset_x: np.ndarray | None = None
    dataset_r: np.ndarray | None = None
    thresholds: list[float] = field(default_factory=list)
    quantiles: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    progress: list[dict] = field(default_factory=list)
    converged_iteration: int | None = None
    rollouts: int = 0
    wall_clock: float = 0.0

    def draw(self, n: int, rng: SeededRng, threads: int = 1) -> np.ndarray:
        """Disturbances from the trained sampler, targeted at the failure threshold."""
        if self.method == "cem2":
            from .baselines import gmm_sample

            return gmm_sample(self.model, n, rng)
        from .diffusion import sample

        r_fail = self.config.get("r_fail", 0.0)
        return sample(self.model, self.schedule, r_fail if self.config.get("conditional", True)
                      else self.config.get("ablation_condition", 0.0), n, rng, threads)


def write_dataset(path, x: np.ndarray, r: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    r = np.asarray(r, dtype="<f8")
    if x.ndim != 2 or r.shape != (x.shape[0],):
        raise ValueError("dataset needs an (n, d) disturbance array and n robustness values")
    rows = np.concatenate([x, r[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, x.shape[1], x.shape[0]))
        fh.write(rows.tobytes(order="C"))


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, version, d, count = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rows = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if rows.size != count * (d + 1):
        raise ValueError(f"{path}: truncated dataset")
    rows = rows.reshape(count, d + 1).astype(np.float64)
    return rows[:, :d].copy(), rows[:, d].copy()
