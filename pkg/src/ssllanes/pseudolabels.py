"""Self-supervision targets generated from unannotated scenes."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenegraph import FEAT_DIR, RELATIONS, LaneGraph, Scene

MANEUVER_CLASSES = ("maintain-speed", "accelerate", "decelerate", "turn-left", "turn-right", "lane-change")
LATERAL_ANGLE = math.radians(20.0)
LANE_CHANGE_OFFSET = 1.75
GOAL_EPSILON = 2.0


class PretextUnavailable(ValueError):
    """The scene cannot host the requested pretext task."""


# --------------------------------------------------------------- lane masks


@dataclass(frozen=True, eq=False)
class MaskSpec:
    masked_node_indices: dict[str, np.ndarray]
    target_features: np.ndarray  # rows of X at ``all_indices`` order
    ratio: float

    @property
    def all_indices(self) -> np.ndarray:
        parts = [v for v in self.masked_node_indices.values() if v.size]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def mask_count(n: int, ratio: float) -> int:
    if ratio <= 0 or n == 0:
        return 0
    return min(n, max(1, int(round(ratio * n))))


def mask_lanes(graph: LaneGraph, ratio: float, seed) -> tuple[np.ndarray, MaskSpec]:
    """Zero the features of ``round(ratio * n)`` random nodes in every lane."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    picked = {}
    for lane, nodes in graph.lane_membership.items():
        k = mask_count(len(nodes), ratio)
        nodes = np.asarray(nodes, dtype=np.int64)
        picked[lane] = np.sort(rng.choice(nodes, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    x = graph.node_features.copy()
    spec_idx = [v for v in picked.values() if v.size]
    idx = np.concatenate(spec_idx) if spec_idx else np.zeros(0, dtype=np.int64)
    targets = graph.node_features[idx].copy()
    x[idx] = 0.0
    return x, MaskSpec(picked, targets, ratio)


# --------------------------------------------------- distance to intersection


@dataclass(frozen=True, eq=False)
class DistanceLabels:
    d: np.ndarray  # (M,) float hop counts, 0 where unreachable
    reachable: np.ndarray  # (M,) bool


def undirected_neighbors(graph: LaneGraph) -> list[np.ndarray]:
    union = np.zeros_like(graph.adjacency["suc"])
    for rel in RELATIONS:
        union |= graph.adjacency[rel]
    union |= union.T
    return [np.nonzero(row)[0] for row in union]


def bfs_distance_to_intersection(graph: LaneGraph) -> DistanceLabels:
    """Multi-source BFS hop distance from every node to the nearest intersection node."""
    sources = np.nonzero(graph.intersection_flags)[0]
    if sources.size == 0:
        raise PretextUnavailable("scene has no intersection nodes")
    nbrs = undirected_neighbors(graph)
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[sources] = 0
    queue = deque(int(s) for s in sources)
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(int(v))
    reachable = dist >= 0
    return DistanceLabels(np.where(reachable, dist, 0).astype(float), reachable)


# ------------------------------------------------------ constrained k-means


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def _balanced_assign(cost: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Greedy capacity-limited assignment by regret, then repair of undersized clusters."""
    n, k = cost.shape
    srt = np.sort(cost, axis=1)
    regret = srt[:, 1] - srt[:, 0] if k > 1 else np.zeros(n)
    # stable: higher regret first, ties by index
    order = np.lexsort((np.arange(n), -regret))
    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    for i in order:
        for c in np.argsort(cost[i], kind="stable"):
            if sizes[c] < hi:
                assign[i] = c
                sizes[c] += 1
                break
    while (sizes < lo).any():
        c = int(np.argmin(sizes))
        donors = np.nonzero(sizes[assign] > lo)[0]
        delta = cost[donors, c] - cost[donors, assign[donors]]
        i = int(donors[np.argmin(delta)])
        sizes[assign[i]] -= 1
        assign[i] = c
        sizes[c] += 1
    return assign


def _objective(points, assign, centers) -> float:
    return float(((points - centers[assign]) ** 2).sum())


def _init_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding."""
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d = _sq_dists(points, np.asarray(centers)).min(axis=1)
        total = d.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
        else:
            centers.append(points[int(rng.choice(n, p=d / total))])
    return np.asarray(centers, dtype=float)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective_trace: list[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def constrained_kmeans(
    points: np.ndarray,
    k: int,
    min_size: int | None = None,
    seed=0,
    max_size: int | None = None,
    max_iter: int = 100,
    n_init: int = 4,
) -> KMeansResult:
    """Size-constrained k-means.

    Every cluster ends with between ``min_size`` and ``max_size`` members
    (defaults ``floor(n/k)`` and ``ceil(n/k)``, i.e. balanced). A new
    assignment is kept only if it does not raise the objective, so the trace
    is non-increasing. Points are processed in a canonical (sorted) order so
    that the result does not depend on input order.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    lo = n // k if min_size is None else int(min_size)
    hi = -(-n // k) if max_size is None else int(max_size)
    if max_size is None and min_size is not None:
        hi = n - (k - 1) * lo
    if lo * k > n or hi * k < n or lo > hi:
        raise ValueError(f"infeasible size constraints: n={n}, k={k}, min={lo}, max={hi}")

    canon = np.lexsort(pts.T[::-1])
    p = pts[canon]
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        centers = _init_centers(p, k, rng)
        assign = _balanced_assign(_sq_dists(p, centers), lo, hi)
        trace = []
        for _ in range(max_iter):
            centers = np.stack([p[assign == c].mean(axis=0) for c in range(k)])
            obj = _objective(p, assign, centers)
            trace.append(obj)
            new = _balanced_assign(_sq_dists(p, centers), lo, hi)
            if np.array_equal(new, assign) or _objective(p, new, centers) >= obj:
                break
            assign = new
        if best is None or trace[-1] < best.objective - 1e-12:
            best = KMeansResult(assign, centers, trace)
    out = np.empty(n, dtype=np.int64)
    out[canon] = best.assignments
    return KMeansResult(out, best.centroids, best.objective_trace)


# --------------------------------------------------------------- maneuvers


@dataclass
class ManeuverLabels:
    """Cluster id per labeled item (index into MANEUVER_CLASSES); -1 = skipped."""

    ids: np.ndarray
    centroids: dict[str, np.ndarray]  # "longitudinal" (3,1) sorted, "lateral" (2,2)

    def names(self) -> list[str]:
        return [MANEUVER_CLASSES[i] if i >= 0 else "" for i in self.ids]


def _lane_segments(graph: LaneGraph, lanes: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    a, b = [], []
    for lane in lanes:
        nodes = graph.lane_membership[lane]
        pos = graph.node_positions[nodes]
        if len(nodes) == 1:
            a.append(pos)
            b.append(pos)
        else:
            a.append(pos[:-1])
            b.append(pos[1:])
    return np.concatenate(a), np.concatenate(b)


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.maximum((ab**2).sum(1), 1e-12)
    t = np.clip(((p - a) * ab).sum(1) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


def _nearest_node(graph: LaneGraph, p: np.ndarray) -> int:
    return int(np.argmin(np.hypot(*(graph.node_positions - p).T)))


def _continuation_lanes(graph: LaneGraph, start_lane: str) -> list[str]:
    """The start lane plus every lane reachable from it along successor links."""
    lane_of = {}
    names = list(graph.lane_membership)
    for name, nodes in graph.lane_membership.items():
        for n in nodes:
            lane_of[n] = name
    suc = graph.adjacency["suc"]
    seen = {start_lane}
    queue = deque([start_lane])
    while queue:
        lane = queue.popleft()
        last = graph.lane_membership[lane][-1]
        for nxt in np.nonzero(suc[last])[0]:
            name = lane_of[int(nxt)]
            if name not in seen:
                seen.add(name)
                queue.append(name)
    return [n for n in names if n in seen]


def _angle_between(u: np.ndarray, v: np.ndarray) -> float:
    return abs(math.atan2(u[0] * v[1] - u[1] * v[0], u @ v))


def is_lane_change(scene: Scene, agent: int) -> bool:
    """Lane-change test from centerline offsets and orientations.

    The endpoint must sit at least half a lane width away from the start
    lane and every lane continuing it, while the nearest centerline at the
    endpoint points within 20 degrees of the start centerline.
    """
    g = scene.graph
    track = scene.agents[agent]
    start, end = track.current_position, track.future_positions[-1]
    n0 = _nearest_node(g, start)
    n1 = _nearest_node(g, end)
    d0 = g.node_features[n0, FEAT_DIR]
    d1 = g.node_features[n1, FEAT_DIR]
    if _angle_between(d0, d1) > LATERAL_ANGLE:
        return False
    lane_of = {n: name for name, nodes in g.lane_membership.items() for n in nodes}
    lanes = _continuation_lanes(g, lane_of[n0])
    a, b = _lane_segments(g, lanes)
    off_end = _point_segment_distance(np.broadcast_to(end, a.shape), a, b).min()
    off_start = _point_segment_distance(np.broadcast_to(start, a.shape), a, b).min()
    return off_end - off_start >= LANE_CHANGE_OFFSET


def endpoint_bearing(track) -> float:
    """Angle between (endpoint - current position) and +x."""
    v = track.future_positions[-1] - track.current_position
    return abs(math.atan2(v[1], v[0]))


def label_maneuvers(
    scenes: Sequence[Scene],
    seed=0,
    agents: Sequence[int] | None = None,
    fitted: ManeuverLabels | None = None,
) -> ManeuverLabels:
    """Maneuver pseudo-labels for one agent per scene (the focus agent by default).

    Lane changes are ruled out first; the rest split on a 20 degree endpoint
    bearing into lateral (turns, k=2) and longitudinal (speed change, k=3)
    groups that are clustered by balanced k-means on endpoints. With
    ``fitted`` the stored centroids are reused (nearest-centroid assignment).
    """
    n = len(scenes)
    agents = [s.focus_agent for s in scenes] if agents is None else list(agents)
    ids = np.full(n, -1, dtype=np.int64)
    rel_end = np.zeros((n, 2))
    lateral, longitudinal = [], []
    for i, (scene, a) in enumerate(zip(scenes, agents)):
        track = scene.agents[a]
        if not track.has_future:
            continue
        rel_end[i] = track.future_positions[-1] - track.current_position
        if is_lane_change(scene, a):
            ids[i] = MANEUVER_CLASSES.index("lane-change")
        elif endpoint_bearing(track) > LATERAL_ANGLE:
            lateral.append(i)
        else:
            longitudinal.append(i)

    centroids = {} if fitted is None else dict(fitted.centroids)
    left, right = MANEUVER_CLASSES.index("turn-left"), MANEUVER_CLASSES.index("turn-right")
    if lateral:
        pts = rel_end[lateral]
        if fitted is None:
            if len(lateral) >= 2:
                res = constrained_kmeans(pts, 2, seed=seed)
                cents, assign = res.centroids, res.assignments
                order = np.argsort(-cents[:, 1], kind="stable")  # larger y first -> left
                remap = np.empty(2, dtype=np.int64)
                remap[order] = np.arange(2)
                cents, assign = cents[order], remap[assign]
            else:
                y = abs(pts[0, 1])
                cents = np.array([[pts[0, 0], y], [pts[0, 0], -y]])
                assign = np.array([0 if pts[0, 1] >= 0 else 1])
            centroids["lateral"] = cents
        else:
            assign = np.argmin(_sq_dists(pts, centroids["lateral"]), axis=1)
        ids[lateral] = np.where(assign == 0, left, right)
    long_names = ("decelerate", "maintain-speed", "accelerate")
    if longitudinal:
        x = rel_end[longitudinal, :1]
        if fitted is None:
            k = min(3, len(longitudinal))
            res = constrained_kmeans(x, k, seed=seed)
            cents = res.centroids
            order = np.argsort(cents[:, 0], kind="stable")
            remap = np.empty(k, dtype=np.int64)
            remap[order] = np.arange(k)
            assign = remap[res.assignments]
            cents = cents[order]
            if k < 3:
                # too few samples: treat clusters as the lowest ranks
                cents = np.vstack([cents, np.full((3 - k, 1), np.inf)])
            centroids["longitudinal"] = cents
        else:
            assign = np.argmin(_sq_dists(x, centroids["longitudinal"]), axis=1)
        names = np.asarray([MANEUVER_CLASSES.index(nm) for nm in long_names])
        ids[longitudinal] = names[assign]
    return ManeuverLabels(ids, centroids)


# ------------------------------------------------------------- goal labels


@dataclass(frozen=True, eq=False)
class GoalLabels:
    candidates: np.ndarray  # (M, 2) lane-node positions
    labels: np.ndarray  # (M,) {0, 1}
    epsilon: float
    flagged: bool = False  # no candidate within epsilon


def label_goal_candidates(scene: Scene, epsilon: float = GOAL_EPSILON, agent: int | None = None) -> GoalLabels:
    """Label every lane node 1 if it lies within ``epsilon`` of the true endpoint."""
    track = scene.agents[scene.focus_agent if agent is None else agent]
    if not track.has_future:
        raise PretextUnavailable("focus agent has no future")
    end = track.future_positions[-1]
    cands = scene.graph.node_positions
    dist = np.hypot(*(cands - end).T)
    labels = (dist < epsilon).astype(np.int64)
    return GoalLabels(cands.copy(), labels, float(epsilon), flagged=not labels.any())


# ---------------------------------------------------------------- sidecar


def export_labels(
    path: str | Path, scenes: Sequence[Scene], pretext: str, seed: int = 0, mask_ratio: float = 0.4,
    fit_scenes: Sequence[Scene] | None = None,
) -> int:
    """Write one JSON line of pseudo-labels per scene, keyed by scene id.

    Maneuver centroids are fit on ``fit_scenes`` when given (normally the
    training split) and reused for ``scenes``.
    """
    maneuvers = None
    if pretext == "maneuver":
        fitted = label_maneuvers(fit_scenes, seed) if fit_scenes is not None else None
        maneuvers = label_maneuvers(scenes, seed, fitted=fitted)
    written = 0
    with open(path, "w") as fh:
        for i, scene in enumerate(scenes):
            rec: dict = {"id": scene.tags.get("id", str(i)), "pretext": pretext}
            if pretext == "mask":
                _, spec = mask_lanes(scene.graph, mask_ratio, [seed, i])
                rec["masked"] = [int(v) for v in spec.all_indices]
                rec["ratio"] = mask_ratio
            elif pretext == "d2i":
                try:
                    lab = bfs_distance_to_intersection(scene.graph)
                except PretextUnavailable:
                    rec["unavailable"] = True
                else:
                    rec["d"] = lab.d.tolist()
                    rec["reachable"] = [bool(x) for x in lab.reachable]
            elif pretext == "maneuver":
                rec["maneuver"] = int(maneuvers.ids[i])
            elif pretext == "goal":
                lab = label_goal_candidates(scene)
                rec["labels"] = [int(x) for x in lab.labels]
                rec["epsilon"] = lab.epsilon
            else:
                raise ValueError(f"unknown pretext {pretext!r}")
            fh.write(json.dumps(rec) + "\n")
            written += 1
    return written


def load_labels(path: str | Path) -> dict[str, dict]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = rec
    return out
