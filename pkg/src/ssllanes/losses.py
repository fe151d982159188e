"""Supervised forecasting losses, pretext losses, and the joint objective.

Every loss takes optional per-row ``weights``; without them rows are averaged
uniformly. The trainer passes weights that average within each scene first
and then across scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops

CLS_MARGIN = 0.2
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


def _weights(n: int, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / max(n, 1))
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ShapeError(f"weights of shape {w.shape} for {n} rows")
    return w


def _zero() -> Tensor:
    return Tensor(0.0)


def best_modes(trajectories: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Index of the mode with the smallest final displacement error per agent.

    Ties go to the lowest mode index.
    """
    fde = np.hypot(*(trajectories[:, :, -1, :] - gt[:, None, -1, :]).transpose(2, 0, 1))
    return np.argmin(fde, axis=1)


def _check_gt(traj: Tensor, gt: np.ndarray) -> None:
    n, _, t, _ = traj.shape
    if gt.shape != (n, t, 2):
        raise ShapeError(f"ground truth {gt.shape} does not match forecast {traj.shape}")


def loss_reg(trajectories, gt: np.ndarray, best: np.ndarray | None = None, weights=None) -> Tensor:
    """Smooth-L1 error of the best mode, averaged over steps and coordinates."""
    traj = as_tensor(trajectories)
    gt = np.asarray(gt)
    _check_gt(traj, gt)
    n = traj.shape[0]
    if n == 0:
        return _zero()
    best = best_modes(traj.data, gt) if best is None else best
    picked = ops.getitem(traj, (np.arange(n), best))
    per = ops.smooth_l1(picked, gt.astype(traj.data.dtype), beta=1.0, reduction="none")
    per = ops.mean(ops.reshape(per, (n, -1)), axis=1)
    return ops.weighted_sum(per, _weights(n, weights))


def loss_cls(logits, best: np.ndarray, margin: float = CLS_MARGIN, weights=None) -> Tensor:
    """Max-margin mode classification on raw scores.

    Each wrong mode costs ``max(0, s_k + margin - s_best)``, averaged over the
    K-1 wrong modes.
    """
    logits = as_tensor(logits)
    n, k = logits.shape
    best = np.asarray(best, dtype=np.int64)
    if best.shape != (n,):
        raise ShapeError(f"best-mode indices {best.shape} for logits {logits.shape}")
    if n == 0 or k == 1:
        return _zero()
    s_best = ops.reshape(ops.getitem(logits, (np.arange(n), best)), (n, 1))
    hinge = ops.relu(ops.add(ops.sub(logits, s_best), margin))
    others = np.ones((n, k))
    others[np.arange(n), best] = 0.0
    per = ops.sum(ops.mul(hinge, others), axis=1)
    return ops.weighted_sum(ops.mul_scalar(per, 1.0 / (k - 1)), _weights(n, weights))


def loss_terminal(trajectories, gt: np.ndarray, best: np.ndarray | None = None, weights=None) -> Tensor:
    """Euclidean endpoint error of the best mode."""
    traj = as_tensor(trajectories)
    gt = np.asarray(gt)
    _check_gt(traj, gt)
    n = traj.shape[0]
    if n == 0:
        return _zero()
    best = best_modes(traj.data, gt) if best is None else best
    end = ops.getitem(traj, (np.arange(n), best, -1))
    err = ops.norm(ops.sub(end, gt[:, -1].astype(traj.data.dtype)), axis=1)
    return ops.weighted_sum(err, _weights(n, weights))


def supervised_losses(trajectories, logits, gt: np.ndarray, weights=None) -> dict[str, Tensor]:
    traj = as_tensor(trajectories)
    best = best_modes(traj.data, np.asarray(gt))
    return {
        "cls": loss_cls(logits, best, weights=weights),
        "reg": loss_reg(traj, gt, best, weights=weights),
        "terminal": loss_terminal(traj, gt, best, weights=weights),
    }


# ------------------------------------------------------------ pretext losses


def loss_mask(reconstructions, targets: np.ndarray, weights=None) -> Tensor:
    """Squared reconstruction error per masked node (mean over features)."""
    rec = as_tensor(reconstructions)
    targets = np.asarray(targets)
    if rec.shape != targets.shape:
        raise ShapeError(f"loss_mask: {rec.shape} reconstructions for {targets.shape} targets")
    n = rec.shape[0]
    if n == 0:
        return _zero()
    per = ops.mean(ops.mse(rec, targets.astype(rec.data.dtype), reduction="none"), axis=1)
    return ops.weighted_sum(per, _weights(n, weights))


def loss_d2i(predictions, distances: np.ndarray, reachable: np.ndarray, weights=None) -> Tensor:
    """Squared error of hop-distance regression over reachable nodes."""
    pred = as_tensor(predictions)
    d = np.asarray(distances, dtype=float)
    reach = np.asarray(reachable, dtype=bool)
    if pred.shape != d.shape or d.shape != reach.shape:
        raise ShapeError(f"loss_d2i: {pred.shape} predictions for {d.shape} labels")
    n = int(reach.sum())
    if n == 0:
        return _zero()
    sq = ops.mse(pred, d.astype(pred.data.dtype), reduction="none")
    if weights is None:
        w = reach / n
    else:
        w = np.where(reach, _weights(d.size, weights), 0.0)
    return ops.weighted_sum(sq, w)


def loss_maneuver(logits, labels: np.ndarray, weights=None) -> Tensor:
    """Cross-entropy over the six maneuver classes."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"loss_maneuver: {logits.shape} logits for {labels.shape} labels")
    n = labels.size
    if n == 0:
        return _zero()
    ce = ops.cross_entropy(logits, labels, reduction="none")
    return ops.weighted_sum(ce, _weights(n, weights))


def loss_goal(logits, labels: np.ndarray, weights=None,
              gamma: float = FOCAL_GAMMA, alpha: float | None = FOCAL_ALPHA) -> Tensor:
    """Binary focal loss over goal candidates."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"loss_goal: {logits.shape} logits for {labels.shape} labels")
    n = labels.size
    if n == 0:
        return _zero()
    fl = ops.focal_loss(logits, labels, gamma=gamma, alpha=alpha, reduction="none")
    return ops.weighted_sum(fl, _weights(n, weights))


# ------------------------------------------------------------ joint objective


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    alpha1: float = 1.0
    alpha2: float = 1.0

    @property
    def supervised(self) -> float:
        c = self.components
        return c["cls"] + c["reg"] + c["terminal"]

    def row(self) -> dict[str, float]:
        return {"total": float(self.total.data), **self.components}


def total_loss(
    supervised: dict[str, Tensor], ss: Tensor | None = None, alpha1: float = 1.0, alpha2: float = 1.0,
) -> LossReport:
    """``alpha1 * (cls + reg + terminal) + alpha2 * ss``; ``ss=None`` is the plain baseline."""
    sup = ops.add(ops.add(supervised["cls"], supervised["reg"]), supervised["terminal"])
    total = ops.mul_scalar(sup, alpha1)
    if ss is not None and alpha2 != 0:
        total = ops.add(total, ops.mul_scalar(ss, alpha2))
    comps = {k: float(supervised[k].data) for k in ("cls", "reg", "terminal")}
    comps["ss"] = float(ss.data) if ss is not None else 0.0
    return LossReport(total, comps, alpha1, alpha2)
