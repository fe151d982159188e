"""Displacement metrics over the top-scored forecast modes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

MISS_THRESHOLD = 2.0


@dataclass(frozen=True)
class MetricReport:
    k: int
    min_ade: float
    min_fde: float
    miss_rate: float
    brier_min_fde: float
    n_scenes: int

    def as_dict(self) -> dict:
        return asdict(self)


def _check(trajectories, gt, scores):
    if gt is None:
        raise ValueError("ground truth is required for displacement metrics")
    traj = np.asarray(trajectories, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if traj.ndim != 4 or traj.shape[-1] != 2:
        raise ValueError(f"forecasts must be (S, K, T, 2), got {traj.shape}")
    if gt.shape != (traj.shape[0], traj.shape[2], 2):
        raise ValueError(f"ground truth {gt.shape} does not match forecasts {traj.shape}")
    if not np.isfinite(gt).all():
        raise ValueError("ground truth contains missing values")
    if scores is None:
        scores = np.full(traj.shape[:2], 1.0 / traj.shape[1])
    scores = np.asarray(scores, dtype=float)
    if scores.shape != traj.shape[:2]:
        raise ValueError(f"scores {scores.shape} do not match forecasts {traj.shape}")
    return traj, gt, scores


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores per row; ties keep the lower index first."""
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} outside [1, {scores.shape[1]}]")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def mode_errors(trajectories, gt, scores=None, k: int | None = None):
    """Per-scene ADE and FDE of each of the top-``k`` modes, plus their scores."""
    traj, gt, scores = _check(trajectories, gt, scores)
    k = traj.shape[1] if k is None else k
    idx = top_k(scores, k)
    rows = np.arange(traj.shape[0])[:, None]
    sel = traj[rows, idx]  # (S, k, T, 2)
    dist = np.linalg.norm(sel - gt[:, None], axis=-1)  # (S, k, T)
    return dist.mean(axis=2), dist[:, :, -1], scores[rows, idx]


def min_ade(trajectories, gt, scores=None, k: int | None = None) -> np.ndarray:
    ade, _, _ = mode_errors(trajectories, gt, scores, k)
    return ade.min(axis=1)


def min_fde(trajectories, gt, scores=None, k: int | None = None) -> np.ndarray:
    _, fde, _ = mode_errors(trajectories, gt, scores, k)
    return fde.min(axis=1)


def miss_rate(trajectories, gt, scores=None, k: int | None = None, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of scenes whose best final error is at least ``threshold``."""
    return float(np.mean(min_fde(trajectories, gt, scores, k) >= threshold))


def brier_min_fde(trajectories, gt, scores=None, k: int | None = None) -> np.ndarray:
    """minFDE plus ``(1 - p)^2`` with ``p`` the score of the mode attaining it."""
    _, fde, p = mode_errors(trajectories, gt, scores, k)
    best = np.argmin(fde, axis=1)
    rows = np.arange(fde.shape[0])
    return fde[rows, best] + (1.0 - p[rows, best]) ** 2


def evaluate(trajectories, gt, scores=None, k: int | None = None, threshold: float = MISS_THRESHOLD) -> MetricReport:
    traj, gt, scores = _check(trajectories, gt, scores)
    k = traj.shape[1] if k is None else k
    if traj.shape[0] == 0:
        raise ValueError("no scenes to evaluate")
    ade, fde, p = mode_errors(traj, gt, scores, k)
    best = np.argmin(fde, axis=1)
    rows = np.arange(fde.shape[0])
    mfde = fde[rows, best]
    return MetricReport(
        k=k,
        min_ade=float(ade.min(axis=1).mean()),
        min_fde=float(mfde.mean()),
        miss_rate=float(np.mean(mfde >= threshold)),
        brier_min_fde=float((mfde + (1.0 - p[rows, best]) ** 2).mean()),
        n_scenes=int(traj.shape[0]),
    )
