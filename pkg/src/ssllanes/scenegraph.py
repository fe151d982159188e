"""Scene and lane-graph data model, coordinate frames, and the scene file format.

All geometry is 2-D bird's-eye view in meters. Scenes are treated as
immutable values: every transform returns a new object.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RELATIONS = ("pre", "suc", "left", "right")
DEFAULT_DILATIONS = (1, 2, 4, 8, 16, 32)

# column layout of node_features
FEAT_DIR = slice(0, 2)
FEAT_INTERSECTION = 2
FEAT_TURN = 3
NUM_NODE_FEATURES = 4


class SceneFormatError(ValueError):
    """A scene file record could not be parsed."""


class UnusableSceneError(ValueError):
    """A scene lost everything needed for forecasting (e.g. its whole map)."""


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class NormalizationFrame:
    """Maps world coordinates p to scene coordinates R(-rotation) (p - origin)."""

    origin: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts - np.asarray(self.origin)) @ rotation_matrix(-self.rotation).T

    def invert(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ rotation_matrix(self.rotation).T + np.asarray(self.origin)

    def compose(self, local: "NormalizationFrame") -> "NormalizationFrame":
        """Frame equal to applying ``self`` first and then ``local``."""
        origin = self.invert(np.asarray(local.origin)[None])[0]
        return NormalizationFrame((float(origin[0]), float(origin[1])), self.rotation + local.rotation)


@dataclass(frozen=True, eq=False)
class LaneGraph:
    node_positions: np.ndarray  # (M, 2)
    node_features: np.ndarray  # (M, F)
    adjacency: dict[str, np.ndarray]  # relation -> (M, M) bool
    lane_membership: dict[str, list[int]]
    intersection_flags: np.ndarray  # (M,) bool

    @property
    def num_nodes(self) -> int:
        return int(self.node_positions.shape[0])

    def node_lane(self) -> np.ndarray:
        """Index of the owning lane (in ``lane_membership`` order) per node."""
        out = np.full(self.num_nodes, -1, dtype=np.int64)
        for li, nodes in enumerate(self.lane_membership.values()):
            out[np.asarray(nodes, dtype=np.int64)] = li
        return out

    def edges(self, relation: str) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) index arrays of a relation's set entries."""
        r, c = np.nonzero(self.adjacency[relation])
        return r, c

    def validate(self) -> None:
        m = self.num_nodes
        if self.node_features.shape[0] != m or self.node_features.shape[1] < NUM_NODE_FEATURES:
            raise ValueError(f"node_features shape {self.node_features.shape} for {m} nodes")
        seen = np.zeros(m, dtype=int)
        for nodes in self.lane_membership.values():
            np.add.at(seen, np.asarray(nodes, dtype=np.int64), 1)
        if not np.all(seen == 1):
            raise ValueError("every node must belong to exactly one lane")
        for rel in RELATIONS:
            a = self.adjacency[rel]
            if a.shape != (m, m) or a.dtype != bool:
                raise ValueError(f"adjacency[{rel}] must be a boolean {m}x{m} matrix")
            if np.any(np.diag(a)):
                raise ValueError(f"adjacency[{rel}] has self-loops")
        if not np.array_equal(self.adjacency["pre"], self.adjacency["suc"].T):
            raise ValueError("adjacency[pre] must be the transpose of adjacency[suc]")
        if not np.array_equal(
            self.intersection_flags, self.node_features[:, FEAT_INTERSECTION] > 0.5
        ):
            raise ValueError("intersection_flags disagree with node_features")

    def equals(self, other: "LaneGraph") -> bool:
        return (
            np.array_equal(self.node_positions, other.node_positions)
            and np.array_equal(self.node_features, other.node_features)
            and all(np.array_equal(self.adjacency[r], other.adjacency[r]) for r in RELATIONS)
            and self.lane_membership == other.lane_membership
            and np.array_equal(self.intersection_flags, other.intersection_flags)
        )


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One agent's observed past and (optional) ground-truth future.

    ``past_positions`` holds L+1 points ending at t=0; displacements are the
    per-step differences, zeroed where a step is not observed. Front padding
    repeats the earliest observed position.
    """

    past_positions: np.ndarray  # (L+1, 2)
    future_positions: np.ndarray  # (T, 2) or (0, 2)
    observed_mask: np.ndarray  # (L,) bool

    @property
    def past_displacements(self) -> np.ndarray:
        d = np.diff(self.past_positions, axis=0)
        return np.where(self.observed_mask[:, None], d, 0.0)

    @property
    def current_position(self) -> np.ndarray:
        return self.past_positions[-1]

    @property
    def has_future(self) -> bool:
        return self.future_positions.shape[0] > 0

    def equals(self, other: "AgentTrack") -> bool:
        return (
            np.array_equal(self.past_positions, other.past_positions)
            and np.array_equal(self.future_positions, other.future_positions)
            and np.array_equal(self.observed_mask, other.observed_mask)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    graph: LaneGraph
    agents: tuple[AgentTrack, ...]
    focus_agent: int
    frame: NormalizationFrame = NormalizationFrame()
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.focus_agent < len(self.agents):
            raise ValueError(f"focus_agent {self.focus_agent} out of range for {len(self.agents)} agents")

    @property
    def focus(self) -> AgentTrack:
        return self.agents[self.focus_agent]

    def equals(self, other: "Scene") -> bool:
        return (
            self.graph.equals(other.graph)
            and len(self.agents) == len(other.agents)
            and all(a.equals(b) for a, b in zip(self.agents, other.agents))
            and self.focus_agent == other.focus_agent
            and self.frame == other.frame
            and self.tags == other.tags
        )


def make_lane_graph(
    positions: np.ndarray,
    features: np.ndarray,
    lanes: dict[str, list[int]],
    suc_edges: Iterable[tuple[int, int]] = (),
    left_edges: Iterable[tuple[int, int]] = (),
    right_edges: Iterable[tuple[int, int]] = (),
) -> LaneGraph:
    """Build a LaneGraph from edge lists; pre is derived as the transpose of suc."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    m = positions.shape[0]

    def dense(pairs):
        a = np.zeros((m, m), dtype=bool)
        pairs = list(pairs)
        if pairs:
            r, c = np.asarray(pairs, dtype=np.int64).T
            a[r, c] = True
        return a

    suc = dense(suc_edges)
    features = np.asarray(features, dtype=float).reshape(m, -1)
    return LaneGraph(
        node_positions=positions,
        node_features=features,
        adjacency={"pre": suc.T.copy(), "suc": suc, "left": dense(left_edges), "right": dense(right_edges)},
        lane_membership={k: list(map(int, v)) for k, v in lanes.items()},
        intersection_flags=features[:, FEAT_INTERSECTION] > 0.5,
    )


def make_track(past_positions: np.ndarray, future_positions=None, observed_mask=None) -> AgentTrack:
    past = np.asarray(past_positions, dtype=float).reshape(-1, 2)
    fut = np.zeros((0, 2)) if future_positions is None else np.asarray(future_positions, dtype=float).reshape(-1, 2)
    mask = np.ones(past.shape[0] - 1, dtype=bool) if observed_mask is None else np.asarray(observed_mask, dtype=bool)
    return AgentTrack(past, fut, mask)


# ---------------------------------------------------------------- transforms


def _transform_scene(scene: Scene, offset: np.ndarray, rot: float, frame: NormalizationFrame, flags=None) -> Scene:
    """Apply q = R(rot) (p - offset) to every coordinate in the scene."""
    r = rotation_matrix(rot)

    def pts(p):
        return (np.asarray(p) - offset) @ r.T if p.size else p.copy()

    g = scene.graph
    feats = g.node_features.copy()
    feats[:, FEAT_DIR] = g.node_features[:, FEAT_DIR] @ r.T
    graph = replace(g, node_positions=pts(g.node_positions), node_features=feats)
    agents = tuple(
        AgentTrack(pts(a.past_positions), pts(a.future_positions), a.observed_mask.copy())
        for a in scene.agents
    )
    tags = dict(scene.tags)
    if flags:
        tags.update(flags)
    return Scene(graph, agents, scene.focus_agent, frame, tags)


def heading_of(track: AgentTrack) -> float | None:
    """Heading of the last nonzero observed displacement, or None."""
    disp = track.past_displacements
    for i in range(disp.shape[0] - 1, -1, -1):
        if track.observed_mask[i] and np.hypot(*disp[i]) > 0:
            return math.atan2(disp[i, 1], disp[i, 0])
    return None


def normalize_scene(scene: Scene) -> Scene:
    """Move the focus agent to the origin with its current heading along +x."""
    focus = scene.focus
    if int(focus.observed_mask.sum()) < 1:
        raise ValueError("focus agent needs at least 2 observed past positions")
    origin = focus.current_position.copy()
    theta = heading_of(focus)
    flags = None
    if theta is None:
        theta = 0.0
        flags = {"degenerate_heading": "1"}
    local = NormalizationFrame((float(origin[0]), float(origin[1])), theta)
    return _transform_scene(scene, origin, -theta, scene.frame.compose(local), flags)


def rotate_scene(scene: Scene, gamma: float) -> Scene:
    """Rotate every coordinate about the scene origin by ``gamma`` radians."""
    frame = NormalizationFrame(scene.frame.origin, scene.frame.rotation - gamma)
    return _transform_scene(scene, np.zeros(2), gamma, frame)


def denormalize_scene(scene: Scene) -> Scene:
    """Express the scene back in world coordinates (identity frame)."""
    f = scene.frame
    back = _transform_scene(scene, np.zeros(2), f.rotation, NormalizationFrame())
    shift = np.asarray(f.origin)
    return _transform_scene(back, -shift, 0.0, NormalizationFrame())


def subgraph(graph: LaneGraph, keep: np.ndarray) -> LaneGraph:
    """Restrict a lane graph to the nodes where ``keep`` is true."""
    keep = np.asarray(keep, dtype=bool)
    new_index = np.cumsum(keep) - 1
    lanes = {}
    for lane, nodes in graph.lane_membership.items():
        kept = [int(new_index[n]) for n in nodes if keep[n]]
        if kept:
            lanes[lane] = kept
    return LaneGraph(
        node_positions=graph.node_positions[keep],
        node_features=graph.node_features[keep],
        adjacency={r: graph.adjacency[r][np.ix_(keep, keep)] for r in RELATIONS},
        lane_membership=lanes,
        intersection_flags=graph.intersection_flags[keep],
    )


def crop_radius(scene: Scene, radius: float) -> Scene:
    """Drop agents and lane nodes farther than ``radius`` from the origin."""
    g = scene.graph
    keep_nodes = np.hypot(g.node_positions[:, 0], g.node_positions[:, 1]) <= radius
    if not keep_nodes.any():
        raise UnusableSceneError(f"no lane nodes within {radius} m of the origin")
    keep_agents = [
        i for i, a in enumerate(scene.agents)
        if i == scene.focus_agent or np.hypot(*a.current_position) <= radius
    ]
    return Scene(
        graph=subgraph(g, keep_nodes),
        agents=tuple(scene.agents[i] for i in keep_agents),
        focus_agent=keep_agents.index(scene.focus_agent),
        frame=scene.frame,
        tags=dict(scene.tags),
    )


def boolean_power(a: np.ndarray, k: int) -> np.ndarray:
    """Walks of exactly ``k`` steps, by binary exponentiation of a boolean matrix."""
    m = a.shape[0]
    result = None
    # float products go through BLAS; 0/1 entries keep the sums exact
    base = a.astype(np.float64)
    while k:
        if k & 1:
            result = base if result is None else ((result @ base) > 0).astype(np.float64)
        k >>= 1
        if k:
            base = ((base @ base) > 0).astype(np.float64)
    if result is None:
        return np.eye(m, dtype=bool)
    return result.astype(bool)


def adjacency_powers(graph: LaneGraph, dilations: Sequence[int] = DEFAULT_DILATIONS) -> dict[str, dict[int, np.ndarray]]:
    """k-hop pre/suc relations for each dilation k.

    Returns ``{"pre": {k: A_pre^k}, "suc": {k: A_suc^k}}``.
    """
    if list(dilations) != sorted(dilations):
        raise ValueError(f"dilations must be ascending, got {list(dilations)}")
    out: dict[str, dict[int, np.ndarray]] = {}
    for rel in ("pre", "suc"):
        a = graph.adjacency[rel]
        out[rel] = {int(k): boolean_power(a, int(k)) for k in dilations}
    return out


# ------------------------------------------------------------- serialization


def _edge_list(a: np.ndarray) -> list[list[int]]:
    r, c = np.nonzero(a)
    return [[int(i), int(j)] for i, j in zip(r, c)]


def scene_to_record(scene: Scene) -> dict:
    g = scene.graph
    return {
        "graph": {
            "positions": g.node_positions.tolist(),
            "features": g.node_features.tolist(),
            "pre": _edge_list(g.adjacency["pre"]),
            "suc": _edge_list(g.adjacency["suc"]),
            "left": _edge_list(g.adjacency["left"]),
            "right": _edge_list(g.adjacency["right"]),
            "lanes": [[k, v] for k, v in g.lane_membership.items()],
            "intersection": [bool(x) for x in g.intersection_flags],
        },
        "agents": [
            {
                "past": a.past_positions.tolist(),
                "future": a.future_positions.tolist(),
                "mask": [bool(x) for x in a.observed_mask],
            }
            for a in scene.agents
        ],
        "focus": scene.focus_agent,
        "frame": {"origin": list(scene.frame.origin), "rotation": scene.frame.rotation},
        "tags": dict(scene.tags),
    }


class _Reader:
    """Field accessor that reports the JSON path of whatever goes wrong."""

    def __init__(self, line_no: int):
        self.line_no = line_no

    def fail(self, path: str, msg: str):
        raise SceneFormatError(f"line {self.line_no}: field {path}: {msg}")

    def get(self, obj, key, path):
        if not isinstance(obj, dict) or key not in obj:
            self.fail(f"{path}.{key}" if path else key, "missing")
        return obj[key]

    def array(self, value, path, shape_tail=(2,), dtype=float):
        try:
            arr = np.asarray(value, dtype=dtype)
        except (TypeError, ValueError):
            self.fail(path, "not a numeric array")
        if arr.size == 0:
            arr = arr.reshape((0,) + shape_tail)
        if arr.shape[1:] != shape_tail and shape_tail:
            self.fail(path, f"expected trailing shape {shape_tail}, got {arr.shape}")
        return arr


def scene_from_record(rec: dict, line_no: int = 1) -> Scene:
    rd = _Reader(line_no)
    g = rd.get(rec, "graph", "")
    pos = rd.array(rd.get(g, "positions", "graph"), "graph.positions")
    m = pos.shape[0]
    feats_raw = rd.get(g, "features", "graph")
    feats = rd.array(feats_raw, "graph.features", shape_tail=())
    if feats.ndim != 2 or feats.shape[0] != m:
        rd.fail("graph.features", f"expected {m} rows")
    adj = {}
    for rel in RELATIONS:
        edges = rd.array(rd.get(g, rel, "graph"), f"graph.{rel}", dtype=np.int64)
        if edges.size and (edges.min() < 0 or edges.max() >= m):
            rd.fail(f"graph.{rel}", "node index out of range")
        a = np.zeros((m, m), dtype=bool)
        if edges.size:
            a[edges[:, 0], edges[:, 1]] = True
        adj[rel] = a
    lanes_raw = rd.get(g, "lanes", "graph")
    try:
        lanes = {str(k): [int(i) for i in v] for k, v in lanes_raw}
    except (TypeError, ValueError):
        rd.fail("graph.lanes", "expected [[lane_id, [node, ...]], ...]")
    inter = np.asarray(rd.get(g, "intersection", "graph"), dtype=bool)
    if inter.shape != (m,):
        rd.fail("graph.intersection", f"expected {m} flags")
    graph = LaneGraph(pos, feats, adj, lanes, inter)
    agents_raw = rd.get(rec, "agents", "")
    if not isinstance(agents_raw, list) or not agents_raw:
        rd.fail("agents", "expected a nonempty list")
    agents = []
    for i, a in enumerate(agents_raw):
        p = f"agents[{i}]"
        past = rd.array(rd.get(a, "past", p), f"{p}.past")
        fut = rd.array(rd.get(a, "future", p), f"{p}.future")
        mask = np.asarray(rd.get(a, "mask", p), dtype=bool)
        if mask.shape != (past.shape[0] - 1,):
            rd.fail(f"{p}.mask", f"expected {past.shape[0] - 1} entries")
        agents.append(AgentTrack(past, fut, mask))
    focus = rd.get(rec, "focus", "")
    if not isinstance(focus, int) or not 0 <= focus < len(agents):
        rd.fail("focus", "invalid agent index")
    fr = rd.get(rec, "frame", "")
    origin = rd.get(fr, "origin", "frame")
    rotation = rd.get(fr, "rotation", "frame")
    tags = rd.get(rec, "tags", "")
    if not isinstance(tags, dict):
        rd.fail("tags", "expected an object")
    return Scene(
        graph,
        tuple(agents),
        focus,
        NormalizationFrame((float(origin[0]), float(origin[1])), float(rotation)),
        {str(k): str(v) for k, v in tags.items()},
    )


def save_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s), separators=(",", ":")) + "\n")


def load_scenes(path: str | Path) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            scenes.append(scene_from_record(rec, line_no))
    return scenes
