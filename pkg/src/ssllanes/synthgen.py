"""Procedural lane graphs and scripted agent motion.

Lane geometry is built in a canonical frame (intersections centered on the
origin, straight roads along x), agents are driven along lane polylines with
closed-form speed profiles, and the finished scene is placed at a random
world pose and then normalized to the focus agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenegraph import (
    FEAT_DIR,
    FEAT_INTERSECTION,
    FEAT_TURN,
    NUM_NODE_FEATURES,
    AgentTrack,
    LaneGraph,
    NormalizationFrame,
    Scene,
    crop_radius,
    make_lane_graph,
    normalize_scene,
    rotation_matrix,
)

MANEUVERS = ("maintain-speed", "accelerate", "decelerate", "turn-left", "turn-right", "lane-change")
TEMPLATES = ("straight", "T-intersection", "cross-intersection", "curve")
LANE_WIDTH = 3.5
DT = 0.1
LONGITUDINAL_ACCEL = 1.5


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_scenes: int = 1000
    maneuver_mix: dict[str, float] = field(default_factory=lambda: {m: 1.0 for m in MANEUVERS})
    region_mix: dict[str, float] = field(default_factory=lambda: {"A": 1.0})
    agents_per_scene: tuple[int, int] = (3, 6)
    node_spacing: float = 3.0
    noise_sigma: float = 0.05
    past_steps: int = 20
    future_steps: int = 30
    crop: float = 100.0
    train_fraction: float = 0.8
    partial_history_prob: float = 0.2

    def __post_init__(self):
        for name, mix in (("maneuver_mix", self.maneuver_mix), ("region_mix", self.region_mix)):
            vals = list(mix.values())
            if not vals or any(v < 0 for v in vals) or not any(v > 0 for v in vals):
                raise ValueError(f"{name} needs nonnegative weights with at least one positive")
        unknown = set(self.maneuver_mix) - set(MANEUVERS)
        if unknown:
            raise ValueError(f"unknown maneuvers {sorted(unknown)}")
        if self.node_spacing <= 0:
            raise ValueError("node_spacing must be positive")
        lo, hi = self.agents_per_scene
        if not 1 <= lo <= hi:
            raise ValueError(f"bad agents_per_scene range {self.agents_per_scene}")


# ------------------------------------------------------------------ geometry


class Polyline:
    """Densely sampled curve with arc-length lookup."""

    def __init__(self, pts: np.ndarray):
        pts = np.asarray(pts, dtype=float)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        keep = np.concatenate([[True], seg > 1e-9])
        self.pts = pts[keep]
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(self.pts, axis=0).T))])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.stack([np.interp(s, self.s, self.pts[:, 0]), np.interp(s, self.s, self.pts[:, 1])], axis=-1)

    def tangent(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        d = self.pts[i + 1] - self.pts[i]
        return d / np.hypot(d[..., 0], d[..., 1])[..., None]

    def concat(self, other: "Polyline") -> "Polyline":
        return Polyline(np.concatenate([self.pts, other.pts]))


def _segment(p0, p1, step=0.25) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.hypot(*(p1 - p0)) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return p0 + t * (p1 - p0)


def _bezier(p0, d0, p1, d1, step=0.25) -> np.ndarray:
    p0, p1, d0, d1 = (np.asarray(v, float) for v in (p0, p1, d0, d1))
    c = 0.5 * np.hypot(*(p1 - p0))
    ctrl = [p0, p0 + c * d0, p1 - c * d1, p1]
    n = max(8, int(math.ceil(2 * c / step)) * 2)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1]
            + 3 * (1 - t) * t**2 * ctrl[2] + t**3 * ctrl[3])


def _arc(center, radius, a0, a1, step=0.25) -> np.ndarray:
    n = max(2, int(math.ceil(abs(a1 - a0) * radius / step)) + 1)
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


@dataclass
class _Lane:
    name: str
    path: Polyline
    nodes: list[int]
    kind: str = "road"  # road | through | left | right
    arm_in: int = -1
    arm_out: int = -1


class _GraphBuilder:
    def __init__(self, spacing: float):
        self.spacing = spacing
        self.pos: list[np.ndarray] = []
        self.dirs: list[np.ndarray] = []
        self.inter: list[bool] = []
        self.turn: list[bool] = []
        self.lanes: dict[str, _Lane] = {}
        self.suc: list[tuple[int, int]] = []
        self.left: list[tuple[int, int]] = []
        self.right: list[tuple[int, int]] = []

    def add_lane(self, name, dense, *, interior_only=False, intersection=False, turn=False, **kw) -> _Lane:
        path = Polyline(dense)
        if interior_only:
            n = max(1, int(round(path.length / self.spacing)) - 1)
            s = path.length * np.arange(1, n + 1) / (n + 1)
        else:
            n = max(2, int(round(path.length / self.spacing)) + 1)
            s = np.linspace(0.0, path.length, n)
        pts, tans = path.point(s), path.tangent(s)
        ids = []
        for p, d in zip(pts, tans):
            ids.append(len(self.pos))
            self.pos.append(p)
            self.dirs.append(d)
            self.inter.append(intersection)
            self.turn.append(turn)
        for a, b in zip(ids[:-1], ids[1:]):
            self.suc.append((a, b))
        lane = _Lane(name, path, ids, **kw)
        self.lanes[name] = lane
        return lane

    def link(self, a: _Lane, b: _Lane) -> None:
        self.suc.append((a.nodes[-1], b.nodes[0]))

    def neighbors(self, lane: _Lane, left_lane: _Lane) -> None:
        """Mark ``left_lane`` as lying to the left of ``lane`` (same direction)."""
        lp = np.asarray([self.pos[i] for i in left_lane.nodes])
        for i in lane.nodes:
            j = left_lane.nodes[int(np.argmin(np.hypot(*(lp - self.pos[i]).T)))]
            self.left.append((i, j))
        rp = np.asarray([self.pos[i] for i in lane.nodes])
        for j in left_lane.nodes:
            i = lane.nodes[int(np.argmin(np.hypot(*(rp - self.pos[j]).T)))]
            self.right.append((j, i))

    def build(self) -> LaneGraph:
        m = len(self.pos)
        feats = np.zeros((m, NUM_NODE_FEATURES))
        feats[:, FEAT_DIR] = np.asarray(self.dirs)
        feats[:, FEAT_INTERSECTION] = np.asarray(self.inter, dtype=float)
        feats[:, FEAT_TURN] = np.asarray(self.turn, dtype=float)
        return make_lane_graph(
            np.asarray(self.pos), feats, {k: v.nodes for k, v in self.lanes.items()},
            self.suc, self.left, self.right,
        )


@dataclass
class _World:
    """A lane graph plus the dense lane geometry agents drive on."""

    graph: LaneGraph
    lanes: dict[str, _Lane]
    template: str

    def successors(self, lane: _Lane) -> list[_Lane]:
        last = lane.nodes[-1]
        out = []
        for other in self.lanes.values():
            if self.graph.adjacency["suc"][last, other.nodes[0]]:
                out.append(other)
        return out


def _road_lanes(b: _GraphBuilder, centerline: Polyline, per_dir: int, bidirectional: bool, prefix: str = "") -> None:
    """Parallel lanes offset from a reference centerline (right-hand traffic)."""
    s = np.linspace(0.0, centerline.length, max(2, int(math.ceil(centerline.length / 0.25)) + 1))
    base, tan = centerline.point(s), centerline.tangent(s)
    normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    fwd, bwd = [], []
    for j in range(per_dir):
        off = LANE_WIDTH / 2 + LANE_WIDTH * j if bidirectional else LANE_WIDTH * j
        fwd.append(b.add_lane(f"{prefix}fwd{j}", base - off * normal))
        if bidirectional:
            bwd.append(b.add_lane(f"{prefix}bwd{j}", (base + off * normal)[::-1]))
    for lanes in (fwd, bwd):
        # lane j-1 lies to the left of lane j
        for j in range(1, len(lanes)):
            b.neighbors(lanes[j], lanes[j - 1])


def _intersection(b: _GraphBuilder, arm_angles: Sequence[float], arm_length: float, box: float) -> None:
    ins, outs = [], []
    for k, psi in enumerate(arm_angles):
        u = np.array([math.cos(psi), math.sin(psi)])
        n = np.array([-u[1], u[0]])
        outs.append(b.add_lane(f"arm{k}_out", _segment(box * u - LANE_WIDTH / 2 * n, (box + arm_length) * u - LANE_WIDTH / 2 * n), arm_out=k))
        ins.append(b.add_lane(f"arm{k}_in", _segment((box + arm_length) * u + LANE_WIDTH / 2 * n, box * u + LANE_WIDTH / 2 * n), arm_in=k))
    for a, lin in enumerate(ins):
        for c, lout in enumerate(outs):
            if a == c:
                continue
            d0 = -np.array([math.cos(arm_angles[a]), math.sin(arm_angles[a])])
            d1 = np.array([math.cos(arm_angles[c]), math.sin(arm_angles[c])])
            turn = math.atan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1)
            kind = "through" if abs(turn) < math.radians(45) else ("left" if turn > 0 else "right")
            p0 = lin.path.pts[-1]
            p1 = lout.path.pts[0]
            conn = b.add_lane(
                f"conn{a}_{c}", _bezier(p0, d0, p1, d1), interior_only=True,
                intersection=True, turn=kind != "through", kind=kind, arm_in=a, arm_out=c,
            )
            b.link(lin, conn)
            b.link(conn, lout)


def _build_world(
    rng: np.random.Generator,
    template: str,
    spacing: float,
    *,
    length: float = 100.0,
    lanes_per_direction: int = 2,
    bidirectional: bool = True,
    skew: float = 0.0,
    arm_length: float = 40.0,
    box: float = 8.0,
) -> _World:
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    b = _GraphBuilder(spacing)
    if template == "straight":
        _road_lanes(b, Polyline(_segment((0.0, 0.0), (length, 0.0))), lanes_per_direction, bidirectional)
    elif template == "curve":
        radius = rng.uniform(150.0, 300.0)
        sweep = length / radius
        sign = rng.choice([-1.0, 1.0])
        center = (0.0, sign * radius)
        a0 = -sign * math.pi / 2
        pts = _arc(center, radius, a0, a0 + sign * sweep)
        _road_lanes(b, Polyline(pts), lanes_per_direction, bidirectional)
    elif template in ("T-intersection", "cross-intersection"):
        base = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
        if template == "T-intersection":
            base = [0.0, math.pi, 3 * math.pi / 2]
        angles = [a + (rng.uniform(-skew, skew) if skew and i else 0.0) for i, a in enumerate(base)]
        _intersection(b, angles, arm_length, box)
    else:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    return _World(b.build(), b.lanes, template)


def gen_lane_graph(seed, template: str, spacing: float = 3.0, **options) -> LaneGraph:
    """Build one lane graph from a template.

    Options: ``length`` (straight/curve road length), ``lanes_per_direction``,
    ``bidirectional``, ``skew`` (max random arm rotation in radians for
    intersections), ``arm_length`` and ``box`` (junction half-size).
    """
    return _build_world(np.random.default_rng(seed), template, spacing, **options).graph


# ------------------------------------------------------------------- motion


def _speed_profile(v0: float, accel: float, n_past: int, n_future: int) -> np.ndarray:
    """Arc length relative to t=0 for steps -n_past..n_future."""
    t = np.arange(-n_past, n_future + 1) * DT
    return np.where(t <= 0, v0 * t, v0 * t + 0.5 * accel * t * t)


def _lateral_profile(n_past: int, n_future: int, tau: float, width: float) -> np.ndarray:
    t = np.arange(-n_past, n_future + 1) * DT
    frac = np.clip(t / tau, 0.0, 1.0)
    return width * (1 - np.cos(math.pi * frac)) / 2


def _drive(path: Polyline, s: np.ndarray, lateral: np.ndarray | None = None) -> np.ndarray:
    pts = path.point(s)
    if lateral is not None:
        tan = path.tangent(s)
        pts = pts + lateral[:, None] * np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    return pts


def _route(world: _World, rng: np.random.Generator, start: _Lane, min_length: float) -> Polyline:
    """Follow random successors from ``start`` until the route is long enough."""
    path = start.path
    lane = start
    while path.length < min_length:
        nxt = world.successors(lane)
        if not nxt:
            break
        lane = nxt[int(rng.integers(len(nxt)))]
        path = path.concat(lane.path)
    return path


def _focus_path(world: _World, rng: np.random.Generator, maneuver: str):
    """Pick the lane route for the scripted maneuver.

    Returns (path, arc length at t=0, lateral direction or 0).
    """
    lanes = world.lanes
    if world.template in ("straight", "curve"):
        fwd = [l for n, l in lanes.items() if "fwd" in n]
        if maneuver == "lane-change":
            j = int(rng.integers(len(fwd) - 1))
            pair = [(fwd[j + 1], +1.0), (fwd[j], -1.0)][int(rng.integers(2))]
            lane, side = pair
        else:
            lane, side = fwd[int(rng.integers(len(fwd)))], 0.0
        s0 = rng.uniform(25.0, lane.path.length - 45.0)
        return lane.path, s0, side
    kind = {"turn-left": "left", "turn-right": "right"}.get(maneuver, "through")
    conns = [l for l in lanes.values() if l.kind == kind]
    conn = conns[int(rng.integers(len(conns)))]
    lin = lanes[f"arm{conn.arm_in}_in"]
    lout = lanes[f"arm{conn.arm_out}_out"]
    path = lin.path.concat(conn.path).concat(lout.path)
    s0 = lin.path.length - rng.uniform(0.0, 6.0)
    return path, s0, 0.0


def feasible_templates(maneuver: str, region: str) -> list[tuple[str, float]]:
    """(template, skew) pairs on which a maneuver can be scripted in a region."""
    skew = math.radians(25.0)
    if region == "B":
        table = {
            "turn-left": [("cross-intersection", skew), ("T-intersection", skew)],
            "turn-right": [("cross-intersection", skew), ("T-intersection", skew)],
            "lane-change": [("curve", 0.0)],
        }
        return table.get(maneuver, [("curve", 0.0), ("cross-intersection", skew)])
    table = {
        "turn-left": [("cross-intersection", 0.0), ("T-intersection", 0.0)],
        "turn-right": [("cross-intersection", 0.0), ("T-intersection", 0.0)],
        "lane-change": [("straight", 0.0)],
    }
    return table.get(maneuver, [("straight", 0.0), ("cross-intersection", 0.0), ("T-intersection", 0.0)])


def _sample_key(rng: np.random.Generator, mix: dict[str, float]) -> str:
    keys = sorted(mix)
    w = np.asarray([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=w / w.sum()))]


def _history_mask(rng: np.random.Generator, n_past: int, partial: bool) -> np.ndarray:
    mask = np.ones(n_past, dtype=bool)
    if partial:
        mask[: int(rng.integers(1, n_past - 4))] = False
    return mask


def _track(positions: np.ndarray, n_past: int, mask: np.ndarray, rng, sigma: float) -> AgentTrack:
    past = positions[: n_past + 1].copy()
    if sigma > 0:
        past = past + rng.normal(0.0, sigma, size=past.shape)
    first = int(np.argmax(mask)) if mask.any() else n_past
    past[:first] = past[first]
    return AgentTrack(past, positions[n_past + 1 :].copy(), mask)


def gen_scene(seed, config: WorldConfig, maneuver: str | None = None, region: str | None = None) -> Scene:
    """Generate one normalized scene; the focus agent executes a scripted maneuver."""
    rng = np.random.default_rng(seed)
    region = region or _sample_key(rng, config.region_mix)
    maneuver = maneuver or _sample_key(rng, config.maneuver_mix)
    options = feasible_templates(maneuver, region)
    template, skew = options[int(rng.integers(len(options)))]
    world = _build_world(rng, template, config.node_spacing, skew=skew)
    n_past, n_fut = config.past_steps, config.future_steps

    path, s0, side = _focus_path(world, rng, maneuver)
    if maneuver in ("turn-left", "turn-right"):
        v0 = rng.uniform(7.0, 9.0)
    else:
        v0 = rng.uniform(9.5, 10.5)
    accel = {"accelerate": LONGITUDINAL_ACCEL, "decelerate": -LONGITUDINAL_ACCEL}.get(maneuver, 0.0)
    s = s0 + _speed_profile(v0, accel, n_past, n_fut)
    lateral = None
    if maneuver == "lane-change":
        tau = rng.uniform(2.0, 3.0)
        lateral = side * _lateral_profile(n_past, n_fut, tau, LANE_WIDTH)
    focus_pos = _drive(path, s, lateral)
    tracks = [_track(focus_pos, n_past, np.ones(n_past, dtype=bool), rng, config.noise_sigma)]

    n_agents = int(rng.integers(config.agents_per_scene[0], config.agents_per_scene[1] + 1))
    lane_list = list(world.lanes.values())
    for _ in range(n_agents - 1):
        lane = lane_list[int(rng.integers(len(lane_list)))]
        v = rng.uniform(5.0, 12.0)
        span = v * (n_past + n_fut) * DT
        route = _route(world, rng, lane, span + 1.0)
        if route.length < span:
            # park slowly on short dead-end routes
            v = route.length / ((n_past + n_fut) * DT) * 0.9
            span = v * (n_past + n_fut) * DT
        start = rng.uniform(0.0, max(route.length - span, 0.0))
        s_other = start + v * n_past * DT + _speed_profile(v, 0.0, n_past, n_fut)
        pos = _drive(route, s_other)
        partial = rng.random() < config.partial_history_prob
        tracks.append(_track(pos, n_past, _history_mask(rng, n_past, partial), rng, config.noise_sigma))

    focus_index = int(rng.integers(len(tracks)))
    tracks.insert(focus_index, tracks.pop(0))

    # place the canonical construction at a random world pose
    theta = rng.uniform(-math.pi, math.pi)
    shift = rng.uniform(-500.0, 500.0, size=2)
    r = rotation_matrix(theta)

    def place(p):
        return p @ r.T + shift if p.size else p.copy()

    g = world.graph
    feats = g.node_features.copy()
    feats[:, FEAT_DIR] = feats[:, FEAT_DIR] @ r.T
    graph = LaneGraph(place(g.node_positions), feats, g.adjacency, g.lane_membership, g.intersection_flags)
    agents = tuple(AgentTrack(place(t.past_positions), place(t.future_positions), t.observed_mask) for t in tracks)
    scene = Scene(graph, agents, focus_index, NormalizationFrame(), {
        "region": region, "maneuver": maneuver, "template": template,
    })
    scene = normalize_scene(scene)
    return crop_radius(scene, config.crop)


def scene_seed(config: WorldConfig, index: int) -> list[int]:
    return [config.seed, index]


def gen_dataset(config: WorldConfig) -> tuple[list[Scene], list[Scene]]:
    """Generate ``config.n_scenes`` scenes and split them into train/val."""
    scenes = []
    for i in range(config.n_scenes):
        s = gen_scene(scene_seed(config, i), config)
        s.tags["id"] = f"{config.seed}-{i}"
        scenes.append(s)
    n_train = int(round(config.train_fraction * config.n_scenes))
    return scenes[:n_train], scenes[n_train:]
