"""Lane-graph forecasting network and its pretext heads.

Scenes are flattened into one batch graph: agents and lane nodes of all
scenes are stacked, and every relation (lane adjacency, map-to-agent and
agent-to-agent neighborhoods) is an edge list with batch-global indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, ops
from .scenegraph import DEFAULT_DILATIONS, FEAT_DIR, Scene, adjacency_powers, rotation_matrix

PRETEXTS = ("none", "mask", "d2i", "maneuver", "goal")
NUM_MANEUVERS = 6
POS_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    n_laneconv_blocks: int = 2
    m2a_radius: float = 12.0
    a2a_radius: float = 100.0
    num_modes: int = 6
    future_steps: int = 30
    past_steps: int = 20
    num_node_features: int = 4
    pretext: str = "none"
    agent_strides: tuple[int, ...] = (2, 2, 2)
    seed: int = 0

    def __post_init__(self):
        if self.num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        if list(self.dilations) != sorted(self.dilations):
            raise ValueError("dilations must be ascending")
        if self.pretext not in PRETEXTS:
            raise ValueError(f"pretext must be one of {PRETEXTS}, got {self.pretext!r}")


# ------------------------------------------------------------------ batching


@dataclass
class SceneTensors:
    """Per-scene arrays, precomputed once and reused across steps."""

    disp: np.ndarray  # (N, L, 2)
    mask: np.ndarray  # (N, L)
    pos0: np.ndarray  # (N, 2)
    future: np.ndarray  # (N, T, 2), zeros where absent
    has_future: np.ndarray  # (N,)
    node_pos: np.ndarray  # (M, 2)
    node_feat: np.ndarray  # (M, F)
    edges: dict[str, tuple[np.ndarray, np.ndarray]]  # relation -> (dst, src)
    m2a: tuple[np.ndarray, np.ndarray]  # (agent, node)
    a2a: tuple[np.ndarray, np.ndarray]  # (receiver, sender)
    focus: int

    @property
    def num_agents(self) -> int:
        return self.disp.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.node_pos.shape[0]

    def rotated(self, gamma: float) -> "SceneTensors":
        r = rotation_matrix(gamma).T
        feat = self.node_feat.copy()
        feat[:, FEAT_DIR] = feat[:, FEAT_DIR] @ r
        return SceneTensors(
            self.disp @ r, self.mask, self.pos0 @ r, self.future @ r, self.has_future,
            self.node_pos @ r, feat, self.edges, self.m2a, self.a2a, self.focus,
        )


def relation_names(dilations: Sequence[int]) -> list[str]:
    return ["left", "right"] + [f"pre{k}" for k in dilations] + [f"suc{k}" for k in dilations]


def _pairs_within(a: np.ndarray, b: np.ndarray, radius: float, exclude_self: bool = False):
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    close = d <= radius
    if exclude_self:
        np.fill_diagonal(close, False)
    i, j = np.nonzero(close)
    return i.astype(np.int64), j.astype(np.int64)


def prepare_scene(scene: Scene, config: ModelConfig) -> SceneTensors:
    g = scene.graph
    powers = adjacency_powers(g, config.dilations)
    edges = {}
    for rel in ("left", "right"):
        r, c = np.nonzero(g.adjacency[rel])
        edges[rel] = (r.astype(np.int64), c.astype(np.int64))
    for rel in ("pre", "suc"):
        for k, a in powers[rel].items():
            r, c = np.nonzero(a)
            edges[f"{rel}{k}"] = (r.astype(np.int64), c.astype(np.int64))
    n_fut = config.future_steps
    fut = np.zeros((len(scene.agents), n_fut, 2))
    has = np.zeros(len(scene.agents), dtype=bool)
    for i, a in enumerate(scene.agents):
        if a.future_positions.shape[0] == n_fut:
            fut[i] = a.future_positions
            has[i] = True
    pos0 = np.stack([a.current_position for a in scene.agents])
    return SceneTensors(
        disp=np.stack([a.past_displacements for a in scene.agents]),
        mask=np.stack([a.observed_mask for a in scene.agents]).astype(float),
        pos0=pos0,
        future=fut,
        has_future=has,
        node_pos=g.node_positions.copy(),
        node_feat=g.node_features.copy(),
        edges=edges,
        m2a=_pairs_within(pos0, g.node_positions, config.m2a_radius),
        a2a=_pairs_within(pos0, pos0, config.a2a_radius, exclude_self=True),
        focus=scene.focus_agent,
    )


@dataclass
class Batch:
    disp: np.ndarray
    mask: np.ndarray
    pos0: np.ndarray
    future: np.ndarray
    has_future: np.ndarray
    node_pos: np.ndarray
    node_feat: np.ndarray
    edges: dict[str, tuple[np.ndarray, np.ndarray]]
    m2a: tuple[np.ndarray, np.ndarray]
    a2a: tuple[np.ndarray, np.ndarray]
    focus: np.ndarray  # (B,) global agent index
    agent_scene: np.ndarray  # (N,)
    node_scene: np.ndarray  # (M,)
    node_offsets: np.ndarray  # (B+1,)
    agent_offsets: np.ndarray  # (B+1,)

    @property
    def num_scenes(self) -> int:
        return len(self.focus)


def collate(items: Sequence[SceneTensors]) -> Batch:
    a_off = np.concatenate([[0], np.cumsum([it.num_agents for it in items])])
    n_off = np.concatenate([[0], np.cumsum([it.num_nodes for it in items])])
    rels = items[0].edges.keys()
    edges = {
        rel: (
            np.concatenate([it.edges[rel][0] + n_off[b] for b, it in enumerate(items)]),
            np.concatenate([it.edges[rel][1] + n_off[b] for b, it in enumerate(items)]),
        )
        for rel in rels
    }
    return Batch(
        disp=np.concatenate([it.disp for it in items]),
        mask=np.concatenate([it.mask for it in items]),
        pos0=np.concatenate([it.pos0 for it in items]),
        future=np.concatenate([it.future for it in items]),
        has_future=np.concatenate([it.has_future for it in items]),
        node_pos=np.concatenate([it.node_pos for it in items]),
        node_feat=np.concatenate([it.node_feat for it in items]),
        edges=edges,
        m2a=(
            np.concatenate([it.m2a[0] + a_off[b] for b, it in enumerate(items)]),
            np.concatenate([it.m2a[1] + n_off[b] for b, it in enumerate(items)]),
        ),
        a2a=(
            np.concatenate([it.a2a[0] + a_off[b] for b, it in enumerate(items)]),
            np.concatenate([it.a2a[1] + a_off[b] for b, it in enumerate(items)]),
        ),
        focus=np.asarray([it.focus + a_off[b] for b, it in enumerate(items)], dtype=np.int64),
        agent_scene=np.repeat(np.arange(len(items)), np.diff(a_off)),
        node_scene=np.repeat(np.arange(len(items)), np.diff(n_off)),
        node_offsets=n_off,
        agent_offsets=a_off,
    )


# -------------------------------------------------------------------- layers


def lane_conv(
    x: Tensor,
    weights: dict[str, Tensor],
    edges: dict[str, tuple[np.ndarray, np.ndarray]],
) -> Tensor:
    """``X W_0 + sum_rel A_rel X W_rel`` with each A_rel given as an edge list."""
    m = x.shape[0]
    out = ops.matmul(x, weights["self"])
    for rel, (dst, src) in edges.items():
        if dst.size == 0:
            continue
        msg = ops.gather_rows(ops.matmul(x, weights[rel]), src)
        out = ops.add(out, ops.scatter_add_rows(msg, dst, m))
    return out


def _uniform(store: ParameterStore, name: str, fan_in: int, shape, group: str) -> Tensor:
    return store.uniform(name, shape, fan_in, group)


class _Builder:
    """Parameter declaration helpers bound to one group."""

    def __init__(self, store: ParameterStore, group: str):
        self.store, self.group = store, group

    def linear(self, name: str, n_in: int, n_out: int, bias: bool = True):
        w = self.store.uniform(f"{name}.w", (n_in, n_out), n_in, self.group)
        b = self.store.uniform(f"{name}.b", (n_out,), n_in, self.group) if bias else None
        return w, b

    def norm(self, name: str, dim: int):
        g = self.store.constant(f"{name}.gamma", (dim,), 1.0, self.group)
        b = self.store.constant(f"{name}.beta", (dim,), 0.0, self.group)
        return g, b

    def conv(self, name: str, k: int, n_in: int, n_out: int):
        return self.store.uniform(f"{name}.w", (k, n_in, n_out), k * n_in, self.group)


def _phi(x: Tensor, norm) -> Tensor:
    """Layer normalization followed by ReLU."""
    return ops.relu(ops.layer_norm(x, *norm))


@dataclass
class EncoderOutputs:
    agent_feats: Tensor  # p-hat (N, H)
    map_feats: Tensor  # Y (M, H)
    fused_m2a: Tensor  # p-tilde (N, H)
    fused_a2a: Tensor  # p-acute (N, H)


@dataclass
class Forecast:
    trajectories: Tensor  # (N, K, T, 2)
    logits: Tensor  # (N, K)

    @property
    def scores(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class PretextConfigError(ValueError):
    pass


class ForecastModel:
    def __init__(self, config: ModelConfig, store: ParameterStore | None = None):
        self.config = config
        self.store = store or ParameterStore(seed=config.seed)
        self.relations = relation_names(config.dilations)
        h = config.hidden_dim
        self._build_agent_encoder(h)
        self._build_map_encoder(h)
        self._build_interaction(h)
        self._build_decoder(h)
        self._build_pretext_heads(h)

    # ---- parameters

    def _build_agent_encoder(self, h: int) -> None:
        b = _Builder(self.store, "agent_encoder")
        self.agent = {}
        n_in = 3
        for gi, stride in enumerate(self.config.agent_strides):
            for bi in range(2):
                name = f"agent.g{gi}.b{bi}"
                c_in = n_in if bi == 0 else h
                blk = {
                    "conv1": b.conv(f"{name}.conv1", 3, c_in, h),
                    "norm1": b.norm(f"{name}.norm1", h),
                    "conv2": b.conv(f"{name}.conv2", 3, h, h),
                    "norm2": b.norm(f"{name}.norm2", h),
                    "stride": stride if bi == 0 else 1,
                }
                if bi == 0 and (stride != 1 or c_in != h):
                    blk["down"] = b.conv(f"{name}.down", 1, c_in, h)
                    blk["down_norm"] = b.norm(f"{name}.down_norm", h)
                self.agent[name] = blk
            n_in = h
        for gi in range(len(self.config.agent_strides)):
            self.agent[f"agent.lateral{gi}"] = {
                "conv": b.conv(f"agent.lateral{gi}.conv", 1, h, h),
                "norm": b.norm(f"agent.lateral{gi}.norm", h),
            }
        self.agent["agent.out"] = {
            "conv1": b.conv("agent.out.conv1", 3, h, h),
            "norm1": b.norm("agent.out.norm1", h),
            "conv2": b.conv("agent.out.conv2", 3, h, h),
            "norm2": b.norm("agent.out.norm2", h),
            "stride": 1,
        }

    def _build_map_encoder(self, h: int) -> None:
        b = _Builder(self.store, "map_encoder")
        f = self.config.num_node_features
        self.map_in = {
            "feat": b.linear("map.in_feat", f, h),
            "feat_norm": b.norm("map.in_feat_norm", h),
            "pos": b.linear("map.in_pos", 2, h),
            "pos_norm": b.norm("map.in_pos_norm", h),
        }
        self.map_blocks = []
        for bi in range(self.config.n_laneconv_blocks):
            name = f"map.block{bi}"
            weights = {"self": b.linear(f"{name}.w_self", h, h, bias=False)[0]}
            for rel in self.relations:
                weights[rel] = b.linear(f"{name}.w_{rel}", h, h, bias=False)[0]
            self.map_blocks.append({
                "weights": weights,
                "norm1": b.norm(f"{name}.norm1", h),
                "linear": b.linear(f"{name}.linear", h, h, bias=False)[0],
                "norm2": b.norm(f"{name}.norm2", h),
            })

    def _build_interaction(self, h: int) -> None:
        b = _Builder(self.store, "interaction")
        self.m2a = {
            "w_self": b.linear("m2a.w_self", h, h, bias=False)[0],
            "delta": b.linear("m2a.delta", 2, h),
            "delta_norm": b.norm("m2a.delta_norm", h),
            "w1": b.linear("m2a.w1", 3 * h, h, bias=False)[0],
            "norm": b.norm("m2a.norm", h),
            "w2": b.linear("m2a.w2", h, h, bias=False)[0],
        }
        self.a2a = {
            "w_self": b.linear("a2a.w_self", h, h, bias=False)[0],
            "delta": b.linear("a2a.delta", 2, h),
            "delta_norm": b.norm("a2a.delta_norm", h),
            "w1": b.linear("a2a.w3", 3 * h, h, bias=False)[0],
            "norm": b.norm("a2a.norm", h),
            "w2": b.linear("a2a.w4", h, h, bias=False)[0],
        }

    def _build_decoder(self, h: int) -> None:
        b = _Builder(self.store, "decoder")
        t = self.config.future_steps
        self.modes = []
        for k in range(self.config.num_modes):
            self.modes.append({
                "hidden": b.linear(f"dec.mode{k}.hidden", h, h),
                "norm": b.norm(f"dec.mode{k}.norm", h),
                "out": b.linear(f"dec.mode{k}.out", h, 2 * t),
            })
        self.cls = {
            "hidden": b.linear("dec.cls.hidden", h, h),
            "norm": b.norm("dec.cls.norm", h),
            "out": b.linear("dec.cls.out", h, self.config.num_modes),
        }

    def _build_pretext_heads(self, h: int) -> None:
        self.head = None
        pretext = self.config.pretext
        if pretext == "none":
            return
        b = _Builder(self.store, "pretext_head")
        n_out = {"mask": self.config.num_node_features, "d2i": 1, "maneuver": NUM_MANEUVERS, "goal": 1}[pretext]
        n_in = 3 * h if pretext == "goal" else h
        self.head = {
            "hidden": b.linear(f"head.{pretext}.hidden", n_in, h),
            "out": b.linear(f"head.{pretext}.out", h, n_out),
        }
        if pretext == "goal":
            self.head["delta"] = b.linear("head.goal.delta", 2, h)
            self.head["delta_norm"] = b.norm("head.goal.delta_norm", h)

    # ---- forward pieces

    def _res1d(self, x: Tensor, blk: dict) -> Tensor:
        out = ops.conv1d(x, blk["conv1"], stride=blk["stride"])
        out = _phi(out, blk["norm1"])
        out = ops.layer_norm(ops.conv1d(out, blk["conv2"]), *blk["norm2"])
        if "down" in blk:
            short = ops.layer_norm(ops.conv1d(x, blk["down"], stride=blk["stride"]), *blk["down_norm"])
        else:
            short = x
        return ops.relu(ops.add(out, short))

    def agent_encode(self, disp: np.ndarray, mask: np.ndarray) -> Tensor:
        """1-D conv pyramid over displacement histories; returns the t=0 feature."""
        x = np.concatenate([disp * mask[..., None], mask[..., None]], axis=-1)
        out = Tensor(x)
        levels = []
        for gi in range(len(self.config.agent_strides)):
            out = self._res1d(out, self.agent[f"agent.g{gi}.b0"])
            out = self._res1d(out, self.agent[f"agent.g{gi}.b1"])
            levels.append(out)
        fused = None
        for gi in reversed(range(len(levels))):
            lat = self.agent[f"agent.lateral{gi}"]
            proj = ops.layer_norm(ops.conv1d(levels[gi], lat["conv"]), *lat["norm"])
            if fused is None:
                fused = proj
            else:
                n_src, n_dst = fused.shape[1], proj.shape[1]
                idx = (np.arange(n_dst) * n_src) // n_dst
                fused = ops.add(ops.getitem(fused, (slice(None), idx)), proj)
        fused = self._res1d(fused, self.agent["agent.out"])
        return ops.getitem(fused, (slice(None), -1))

    def map_encode(self, node_feat: np.ndarray, node_pos: np.ndarray, edges) -> Tensor:
        mi = self.map_in
        feat = ops.layer_norm(ops.linear(Tensor(node_feat), *mi["feat"]), *mi["feat_norm"])
        pos = ops.layer_norm(ops.linear(Tensor(node_pos * POS_SCALE), *mi["pos"]), *mi["pos_norm"])
        h = ops.relu(ops.add(feat, pos))
        for blk in self.map_blocks:
            h = self.lane_block(h, blk, edges)
        return h

    def lane_block(self, h: Tensor, blk: dict, edges) -> Tensor:
        """LaneConv -> norm/ReLU -> linear -> norm, plus shortcut, then ReLU."""
        z = lane_conv(h, blk["weights"], {r: edges[r] for r in self.relations})
        z = _phi(z, blk["norm1"])
        z = ops.layer_norm(ops.matmul(z, blk["linear"]), *blk["norm2"])
        return ops.relu(ops.add(z, h))

    def _fuse(self, p: Tensor, ctx: Tensor, pairs, p_pos: np.ndarray, ctx_pos: np.ndarray, prm: dict) -> Tensor:
        recv, send = pairs
        out = ops.matmul(p, prm["w_self"])
        if recv.size == 0:
            return out
        delta = _phi(ops.linear(Tensor((ctx_pos[send] - p_pos[recv]) * POS_SCALE), *prm["delta"]), prm["delta_norm"])
        cat = ops.concat([ops.gather_rows(p, recv), delta, ops.gather_rows(ctx, send)], axis=1)
        msg = ops.matmul(_phi(ops.matmul(cat, prm["w1"]), prm["norm"]), prm["w2"])
        return ops.add(out, ops.scatter_add_rows(msg, recv, p.shape[0]))

    def fuse_m2a(self, p_hat: Tensor, y: Tensor, pairs, agent_pos, node_pos) -> Tensor:
        return self._fuse(p_hat, y, pairs, agent_pos, node_pos, self.m2a)

    def fuse_a2a(self, p_tilde: Tensor, pairs, agent_pos) -> Tensor:
        return self._fuse(p_tilde, p_tilde, pairs, agent_pos, agent_pos, self.a2a)

    def encode(self, batch: Batch, node_feat: np.ndarray | None = None) -> EncoderOutputs:
        p_hat = self.agent_encode(batch.disp, batch.mask)
        feats = batch.node_feat if node_feat is None else node_feat
        y = self.map_encode(feats, batch.node_pos, batch.edges)
        p_tilde = self.fuse_m2a(p_hat, y, batch.m2a, batch.pos0, batch.node_pos)
        p_acute = self.fuse_a2a(p_tilde, batch.a2a, batch.pos0)
        return EncoderOutputs(p_hat, y, p_tilde, p_acute)

    def decode(self, p: Tensor, pos0: np.ndarray) -> Forecast:
        n, t = p.shape[0], self.config.future_steps
        modes = []
        for mode in self.modes:
            hdn = _phi(ops.linear(p, *mode["hidden"]), mode["norm"])
            disp = ops.reshape(ops.linear(hdn, *mode["out"]), (n, 1, t, 2))
            modes.append(disp)
        disp = modes[0] if len(modes) == 1 else ops.concat(modes, axis=1)
        traj = ops.add(ops.cumsum(disp, axis=2), Tensor(pos0[:, None, None, :]))
        c = self.cls
        logits = ops.linear(_phi(ops.linear(p, *c["hidden"]), c["norm"]), *c["out"])
        return Forecast(traj, logits)

    def forward(self, batch: Batch) -> tuple[EncoderOutputs, Forecast]:
        enc = self.encode(batch)
        return enc, self.decode(enc.fused_a2a, batch.pos0)

    # ---- pretext heads

    def _require(self, pretext: str) -> None:
        if self.config.pretext != pretext:
            raise PretextConfigError(
                f"head_{pretext} called but model was built for pretext {self.config.pretext!r}"
            )

    def _mlp_head(self, x: Tensor) -> Tensor:
        return ops.linear(ops.relu(ops.linear(x, *self.head["hidden"])), *self.head["out"])

    def head_mask(self, y_masked: Tensor, indices: np.ndarray) -> Tensor:
        self._require("mask")
        return self._mlp_head(ops.gather_rows(y_masked, indices))

    def head_d2i(self, y: Tensor) -> Tensor:
        self._require("d2i")
        return ops.reshape(self._mlp_head(y), (y.shape[0],))

    def head_maneuver(self, p_acute: Tensor, focus: np.ndarray) -> Tensor:
        self._require("maneuver")
        return self._mlp_head(ops.gather_rows(p_acute, focus))

    def head_goal(self, p_acute: Tensor, y: Tensor, batch: Batch) -> Tensor:
        """One logit per lane node, conditioned on its scene's focus agent."""
        self._require("goal")
        owner = batch.focus[batch.node_scene]
        delta = _phi(
            ops.linear(Tensor((batch.node_pos - batch.pos0[owner]) * POS_SCALE), *self.head["delta"]),
            self.head["delta_norm"],
        )
        cat = ops.concat([ops.gather_rows(p_acute, owner), y, delta], axis=1)
        return ops.reshape(self._mlp_head(cat), (y.shape[0],))

    # ---- inference

    def predict(self, items: Sequence[SceneTensors], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Focus-agent forecasts: (S, K, T, 2) trajectories and (S, K) scores."""
        trajs, scores = [], []
        for start in range(0, len(items), batch_size):
            batch = collate(items[start : start + batch_size])
            _, fc = self.forward(batch)
            trajs.append(fc.trajectories.data[batch.focus].astype(float))
            scores.append(fc.scores[batch.focus].astype(float))
        return np.concatenate(trajs), np.concatenate(scores)

    def features(self, items: Sequence[SceneTensors], batch_size: int = 64) -> dict[str, np.ndarray]:
        """Focus-agent features after each fusion stage (for similarity analysis)."""
        out = {"m2a": [], "a2a": []}
        for start in range(0, len(items), batch_size):
            batch = collate(items[start : start + batch_size])
            enc = self.encode(batch)
            out["m2a"].append(enc.fused_m2a.data[batch.focus].astype(float))
            out["a2a"].append(enc.fused_a2a.data[batch.focus].astype(float))
        return {k: np.concatenate(v) for k, v in out.items()}
