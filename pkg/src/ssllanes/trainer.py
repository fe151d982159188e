"""Joint supervised + pretext training loop."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Tensor, backward, load_checkpoint, ops, read_checkpoint, save_checkpoint
from .losses import (
    LossReport,
    loss_d2i,
    loss_goal,
    loss_maneuver,
    loss_mask,
    supervised_losses,
    total_loss,
)
from .model import Batch, ForecastModel, ModelConfig, SceneTensors, collate, prepare_scene
from .pseudolabels import (
    PretextUnavailable,
    bfs_distance_to_intersection,
    label_goal_candidates,
    label_maneuvers,
    mask_lanes,
)
from .scenegraph import Scene

DEFAULT_GAMMAS_DEG = tuple(range(0, 360, 30))
LOG_COLUMNS = ("step", "total", "cls", "reg", "terminal", "ss", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr_initial: float = 1e-3
    lr_after: float = 1e-4
    lr_decay_step: int = 1600
    seed: int = 0
    augment: bool = False
    augmentation_gammas_deg: tuple[float, ...] = DEFAULT_GAMMAS_DEG
    pretext: str = "none"
    warm_start_path: str | None = None
    mask_ratio: float = 0.4
    alpha1: float = 1.0
    alpha2: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.lr_decay_step <= self.steps:
            raise ValueError(f"lr_decay_step {self.lr_decay_step} must lie in [0, steps={self.steps}]")
        if any(not 0 <= g < 360 for g in self.augmentation_gammas_deg):
            raise ValueError("augmentation angles must lie in [0, 360)")

    @classmethod
    def scaled(cls, steps: int, **kw) -> "TrainConfig":
        """Config whose learning-rate drop sits at 80% of ``steps``."""
        return cls(steps=steps, lr_decay_step=int(round(0.8 * steps)), **kw)


def learning_rate(step: int, config: TrainConfig) -> float:
    return config.lr_initial if step < config.lr_decay_step else config.lr_after


# --------------------------------------------------------------- pretext data


@dataclass
class PretextData:
    """Per-scene pseudo-labels that do not change between steps."""

    pretext: str
    graphs: list = field(default_factory=list)  # mask: scene graphs for fresh draws
    d2i: list = field(default_factory=list)  # DistanceLabels | None
    maneuver: np.ndarray | None = None  # (S,) class id, -1 when unlabeled
    goal: list = field(default_factory=list)  # label arrays | None when flagged

    def usable(self) -> np.ndarray:
        if self.pretext == "d2i":
            return np.asarray([d is not None for d in self.d2i], dtype=bool)
        if self.pretext == "maneuver":
            return self.maneuver >= 0
        if self.pretext == "goal":
            return np.asarray([g is not None for g in self.goal], dtype=bool)
        return np.ones(len(self.graphs), dtype=bool)


def prepare_pretext(scenes: Sequence[Scene], pretext: str, seed: int = 0) -> PretextData:
    data = PretextData(pretext)
    if pretext == "mask":
        data.graphs = [s.graph for s in scenes]
    elif pretext == "d2i":
        for s in scenes:
            try:
                data.d2i.append(bfs_distance_to_intersection(s.graph))
            except PretextUnavailable:
                data.d2i.append(None)
    elif pretext == "maneuver":
        data.maneuver = label_maneuvers(scenes, seed).ids
    elif pretext == "goal":
        for s in scenes:
            lab = label_goal_candidates(s) if s.focus.has_future else None
            data.goal.append(None if lab is None or lab.flagged else lab.labels)
    elif pretext != "none":
        raise ValueError(f"unknown pretext {pretext!r}")
    if pretext != "none" and not data.usable().any():
        raise PretextUnavailable(f"no scene in the dataset supports the {pretext!r} pretext")
    return data


def pretext_from_records(
    scenes: Sequence[Scene], pretext: str, records: dict[str, dict], mask_ratio: float = 0.4,
) -> PretextData:
    """Pseudo-labels read from an exported sidecar instead of recomputed.

    Mask records only pin the ratio, since masks are redrawn every step.
    """
    data = PretextData(pretext)
    ids = [s.tags.get("id", str(i)) for i, s in enumerate(scenes)]
    missing = [i for i in ids if i not in records]
    if missing:
        raise ValueError(f"label file lacks {len(missing)} scene ids, e.g. {missing[:3]}")
    recs = [records[i] for i in ids]
    wrong = {r.get("pretext") for r in recs} - {pretext}
    if wrong:
        raise ValueError(f"label file holds {sorted(map(str, wrong))} labels, not {pretext!r}")
    if pretext == "mask":
        ratios = {float(r["ratio"]) for r in recs}
        if ratios != {float(mask_ratio)}:
            raise ValueError(f"label file mask ratio {sorted(ratios)} differs from {mask_ratio}")
        data.graphs = [s.graph for s in scenes]
    elif pretext == "d2i":
        from .pseudolabels import DistanceLabels

        for s, r in zip(scenes, recs):
            if r.get("unavailable"):
                data.d2i.append(None)
                continue
            if len(r["d"]) != s.graph.num_nodes:
                raise ValueError(f"scene {s.tags.get('id')}: {len(r['d'])} distance labels for {s.graph.num_nodes} nodes")
            data.d2i.append(DistanceLabels(np.asarray(r["d"], float), np.asarray(r["reachable"], bool)))
    elif pretext == "maneuver":
        data.maneuver = np.asarray([int(r["maneuver"]) for r in recs], dtype=np.int64)
    elif pretext == "goal":
        for s, r in zip(scenes, recs):
            lab = np.asarray(r["labels"], dtype=np.int64)
            if lab.size != s.graph.num_nodes:
                raise ValueError(f"scene {s.tags.get('id')}: {lab.size} goal labels for {s.graph.num_nodes} nodes")
            data.goal.append(lab if lab.any() else None)
    else:
        raise ValueError(f"unknown pretext {pretext!r}")
    if not data.usable().any():
        raise PretextUnavailable(f"no scene in the label file supports the {pretext!r} pretext")
    return data


# ------------------------------------------------------------ loss assembly


def _scene_mean_weights(owner: np.ndarray, valid: np.ndarray, n_scenes: int) -> np.ndarray:
    """Weights that average valid rows within a scene, then across scenes."""
    counts = np.bincount(owner[valid], minlength=n_scenes)
    n_used = int((counts > 0).sum())
    if n_used == 0:
        return np.zeros(owner.shape)
    return np.where(valid, 1.0 / (n_used * np.maximum(counts[owner], 1)), 0.0)


def batch_supervised(forecast, batch: Batch) -> dict[str, Tensor]:
    """Supervised losses over every agent with a full future."""
    valid = np.nonzero(batch.has_future)[0]
    w = _scene_mean_weights(batch.agent_scene, batch.has_future, batch.num_scenes)[valid]
    traj = ops.gather_rows(forecast.trajectories, valid)
    logits = ops.gather_rows(forecast.logits, valid)
    return supervised_losses(traj, logits, batch.future[valid], weights=w)


def batch_pretext(
    model: ForecastModel, enc, batch: Batch, data: PretextData, scene_ids: Sequence[int],
    mask_seed=None, mask_ratio: float = 0.4,
) -> Tensor | None:
    """The pretext loss for one batch; ``scene_ids`` index into ``data``."""
    p = data.pretext
    if p == "none":
        return None
    b = batch.num_scenes
    if p == "mask":
        feats = batch.node_feat.copy()
        idx = []
        owner = []
        for j, sid in enumerate(scene_ids):
            _, spec = mask_lanes(data.graphs[sid], mask_ratio, [*mask_seed, j])
            local = spec.all_indices + batch.node_offsets[j]
            idx.append(local)
            owner.append(np.full(local.size, j))
        idx = np.concatenate(idx)
        owner = np.concatenate(owner)
        targets = feats[idx].copy()
        feats[idx] = 0.0
        y_masked = model.map_encode(feats, batch.node_pos, batch.edges)
        w = _scene_mean_weights(owner, np.ones(idx.size, dtype=bool), b)
        return loss_mask(model.head_mask(y_masked, idx), targets, weights=w)
    if p == "d2i":
        m = batch.node_pos.shape[0]
        d = np.zeros(m)
        reach = np.zeros(m, dtype=bool)
        for j, sid in enumerate(scene_ids):
            lab = data.d2i[sid]
            if lab is not None:
                sl = slice(batch.node_offsets[j], batch.node_offsets[j + 1])
                d[sl], reach[sl] = lab.d, lab.reachable
        w = _scene_mean_weights(batch.node_scene, reach, b)
        return loss_d2i(model.head_d2i(enc.map_feats), d, reach, weights=w)
    if p == "maneuver":
        labels = data.maneuver[list(scene_ids)]
        valid = labels >= 0
        w = _scene_mean_weights(np.arange(b), valid, b)
        logits = model.head_maneuver(enc.fused_a2a, batch.focus)
        return loss_maneuver(logits, np.where(valid, labels, 0), weights=w)
    if p == "goal":
        m = batch.node_pos.shape[0]
        lab = np.zeros(m)
        valid = np.zeros(m, dtype=bool)
        for j, sid in enumerate(scene_ids):
            g = data.goal[sid]
            if g is not None:
                sl = slice(batch.node_offsets[j], batch.node_offsets[j + 1])
                lab[sl], valid[sl] = g, True
        w = _scene_mean_weights(batch.node_scene, valid, b)
        return loss_goal(model.head_goal(enc.fused_a2a, enc.map_feats, batch), lab, weights=w)
    raise ValueError(f"unknown pretext {p!r}")


# ------------------------------------------------------------------ training


def warm_start_map_encoder(store, checkpoint_path: str | Path) -> list[str]:
    """Replace only the map-encoder parameters with those from a checkpoint."""
    return load_checkpoint(store, checkpoint_path, groups=["map_encoder"])


def _config_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def model_config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    for key in ("dilations", "agent_strides"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return ModelConfig(**kw)


def load_model(path: str | Path) -> ForecastModel:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    _, _, extra = read_checkpoint(path)
    if "model_config" not in extra:
        raise ValueError(f"{path}: checkpoint carries no model config")
    model = ForecastModel(model_config_from_dict(extra["model_config"]))
    load_checkpoint(model.store, path)
    return model


@dataclass
class TrainResult:
    model: ForecastModel
    log: list[dict]
    checkpoint: Path | None


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train(
    scenes: Sequence[Scene],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = print,
    items: Sequence[SceneTensors] | None = None,
    pretext_data: PretextData | None = None,
) -> TrainResult:
    """Run joint training and optionally write ``model.ckpt`` and ``train_log.csv``.

    ``items`` may pass scenes already run through :func:`prepare_scene` to
    share that work between runs; ``pretext_data`` replaces the computed
    pseudo-labels (see :func:`pretext_from_records`).
    """
    if not scenes:
        raise ValueError("training set is empty")
    # the run seed drives initialization as well as sampling
    model_config = dataclasses.replace(model_config, pretext=config.pretext, seed=config.seed)
    if pretext_data is not None and pretext_data.pretext != config.pretext:
        raise ValueError(f"pseudo-labels are for {pretext_data.pretext!r}, run uses {config.pretext!r}")
    data = pretext_data or prepare_pretext(scenes, config.pretext, config.seed)
    items = list(items) if items is not None else [prepare_scene(s, model_config) for s in scenes]
    model = ForecastModel(model_config)
    if config.warm_start_path:
        warm_start_map_encoder(model.store, config.warm_start_path)
    opt = Adam(model.store)
    gammas = np.deg2rad(np.asarray(config.augmentation_gammas_deg, dtype=float))

    n = len(items)
    bs = min(config.batch_size, n)
    order = np.zeros(0, dtype=np.int64)
    epoch = 0
    cursor = 0
    log: list[dict] = []
    for step in range(config.steps):
        if cursor + bs > order.size:
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            epoch += 1
            cursor = 0
        ids = order[cursor : cursor + bs]
        cursor += bs
        chosen = [items[i] for i in ids]
        if config.augment:
            rng = np.random.default_rng([config.seed, step, 1])
            chosen = [it.rotated(float(g)) for it, g in zip(chosen, rng.choice(gammas, size=len(chosen)))]
        batch = collate(chosen)

        lr = learning_rate(step, config)
        model.store.zero_grad()
        enc, fc = model.forward(batch)
        sup = batch_supervised(fc, batch)
        ss = batch_pretext(model, enc, batch, data, ids, mask_seed=(config.seed, step), mask_ratio=config.mask_ratio)
        report: LossReport = total_loss(sup, ss, config.alpha1, config.alpha2)
        row = {"step": step, **report.row(), "lr": lr}
        if not all(math.isfinite(row[k]) for k in ("total", "cls", "reg", "terminal", "ss")):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: "
                + ", ".join(f"{k}={row[k]}" for k in ("total", "cls", "reg", "terminal", "ss"))
            )
        backward(report.total)
        opt.step(lr)
        log.append(row)
        if progress and (step % config.log_every == 0 or step == config.steps - 1):
            progress(
                f"step {step:5d}  total {row['total']:.4f}  cls {row['cls']:.4f}  reg {row['reg']:.4f}  "
                f"terminal {row['terminal']:.4f}  ss {row['ss']:.4f}  lr {lr:g}"
            )

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.ckpt"
        save_checkpoint(model.store, ckpt, extra={
            "model_config": _config_dict(model_config),
            "train_config": _config_dict(config),
        })
        write_log(out / "train_log.csv", log)
    return TrainResult(model, log, ckpt)


def write_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else r[k]) for k in LOG_COLUMNS})
