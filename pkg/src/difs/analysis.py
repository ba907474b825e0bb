"""PCA of sampled disturbance trajectories ("eigendisturbances") and a crude
two-mode check along the first principal direction."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


@dataclass
class PcaResult:
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_variance: np.ndarray  # eigenvalues of the sample covariance
    explained_fraction: np.ndarray
    mean: np.ndarray
    projections: np.ndarray  # (n, n_components)
    degenerate: bool = False

    def reconstruct(self) -> np.ndarray:
        return self.mean + self.projections @ self.components


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def _top_eigenpairs(cov: np.ndarray, n: int):
    """Deflated power iteration with re-orthogonalisation against earlier vectors."""
    d = cov.shape[0]
    tiny = 1e-12 * max(float(np.trace(cov)), 1e-300)
    vecs, vals = [], []
    work = cov.copy()
    for j in range(n):
        v = np.ones(d) / np.sqrt(d) + 0.01 * np.arange(d) / d  # fixed start, not orthogonal to typical axes
        for u in vecs:
            v -= (u @ v) * u
        nv = np.linalg.norm(v)
        v = np.eye(d)[j] if nv == 0 else v / nv
        lam = v @ work @ v
        for _ in range(POWER_MAX_ITER):
            w = work @ v
            for u in vecs:
                w -= (u @ w) * u
            nw = np.linalg.norm(w)
            if nw <= tiny:  # remaining spectrum is numerically zero
                break
            w /= nw
            new_lam = w @ work @ w
            done = abs(new_lam - lam) <= POWER_TOL * max(abs(new_lam), 1e-300) and min(
                np.linalg.norm(w - v), np.linalg.norm(w + v)) <= np.sqrt(POWER_TOL)
            v, lam = w, new_lam
            if done:
                break
        for u in vecs:
            v -= (u @ v) * u
        v = _fix_sign(v / np.linalg.norm(v))
        lam = max(float(v @ cov @ v), 0.0)
        vecs.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    return np.array(vecs), np.array(vals)


def pca(data, n_components: int = 2) -> PcaResult:
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = x.shape
    if n <= n_components:
        raise ValueError(f"need more than {n_components} samples, got {n}")
    if n_components > d:
        raise ValueError(f"cannot extract {n_components} components from {d}-dimensional data")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    if total <= 0:
        comps = np.eye(d)[:n_components]
        vals = np.zeros(n_components)
        return PcaResult(comps, vals, vals.copy(), mean, xc @ comps.T, degenerate=True)
    comps, vals = _top_eigenpairs(cov, n_components)
    return PcaResult(comps, vals, vals / total, mean, xc @ comps.T)


@dataclass
class ModeSplit:
    first: np.ndarray  # indices below the median of PC1
    second: np.ndarray
    separation: float


def mode_split(projections) -> ModeSplit:
    """Split on the sign of median-centred PC1; score |m1 - m2| / pooled within-group std."""
    p = np.asarray(projections, dtype=np.float64)
    pc1 = p[:, 0] if p.ndim == 2 else p
    if pc1.size < 10:
        raise ValueError("mode split needs at least 10 points")
    c = pc1 - np.median(pc1)
    lo, hi = np.flatnonzero(c < 0), np.flatnonzero(c >= 0)
    if lo.size < 2 or hi.size < 2 or np.ptp(pc1) == 0:
        raise ValueError("degenerate projections: all points identical along PC1")
    a, b = pc1[lo], pc1[hi]
    pooled = np.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2))
    sep = np.inf if pooled == 0 else abs(b.mean() - a.mean()) / pooled
    return ModeSplit(lo, hi, float(sep))


def export_projections(path, result: PcaResult, robustness, is_failure) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pc1", "pc2", "robustness", "is_failure"])
        pcs = result.projections
        for i in range(pcs.shape[0]):
            pc2 = pcs[i, 1] if pcs.shape[1] > 1 else 0.0
            w.writerow([repr(float(pcs[i, 0])), repr(float(pc2)), repr(float(robustness[i])), int(bool(is_failure[i]))])


def export_eigendisturbances(path, result: PcaResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "explained_fraction"] + [f"step_{j}" for j in range(result.components.shape[1])])
        for i, comp in enumerate(result.components):
            w.writerow([i, repr(float(result.explained_fraction[i]))] + [repr(float(v)) for v in comp])


def export_all(directory, result: PcaResult, robustness, is_failure) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    export_projections(directory / "projections.csv", result, robustness, is_failure)
    export_eigendisturbances(directory / "eigendisturbances.csv", result)
