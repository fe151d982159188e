"""Small hand-built graphs and scenes shared by the tests."""

import numpy as np

from ssllanes.scenegraph import NUM_NODE_FEATURES, Scene, make_lane_graph, make_track


def chain_graph(n, flagged=(), spacing=1.0):
    pos = np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)
    feats = np.zeros((n, NUM_NODE_FEATURES))
    feats[:, 0] = 1.0
    for i in flagged:
        feats[i, 2] = 1.0
    return make_lane_graph(pos, feats, {"l0": list(range(n))}, [(i, i + 1) for i in range(n - 1)])


def random_graph(rng, n_nodes, p_edge=0.08, p_flag=0.1, n_lanes=None):
    """Random lane graph with arbitrary typed edges (no self-loops)."""
    n_lanes = n_lanes or max(1, n_nodes // 5)
    perm = rng.permutation(n_nodes)
    cuts = np.sort(rng.choice(np.arange(1, n_nodes), size=min(n_lanes - 1, n_nodes - 1), replace=False))
    lanes = {f"l{i}": [int(x) for x in part] for i, part in enumerate(np.split(perm, cuts))}
    pos = rng.uniform(-60, 60, size=(n_nodes, 2))
    ang = rng.uniform(-np.pi, np.pi, size=n_nodes)
    feats = np.zeros((n_nodes, NUM_NODE_FEATURES))
    feats[:, 0], feats[:, 1] = np.cos(ang), np.sin(ang)
    feats[:, 2] = rng.random(n_nodes) < p_flag
    feats[:, 3] = rng.random(n_nodes) < 0.2

    def edges(p):
        a = rng.random((n_nodes, n_nodes)) < p
        np.fill_diagonal(a, False)
        return list(zip(*np.nonzero(a)))

    return make_lane_graph(pos, feats, lanes, edges(p_edge), edges(p_edge / 2), edges(p_edge / 2))


def random_dag(rng, n_nodes, p_edge=0.1):
    order = rng.permutation(n_nodes)
    rank = np.empty(n_nodes, dtype=int)
    rank[order] = np.arange(n_nodes)
    a = (rng.random((n_nodes, n_nodes)) < p_edge) & (rank[:, None] < rank[None, :])
    pos = rng.normal(size=(n_nodes, 2))
    feats = np.zeros((n_nodes, NUM_NODE_FEATURES))
    return make_lane_graph(pos, feats, {"l": list(range(n_nodes))}, list(zip(*np.nonzero(a))))


def random_scene(rng, n_nodes=30, n_agents=4, past=20, future=30):
    g = random_graph(rng, n_nodes)
    agents = []
    for _ in range(n_agents):
        start = rng.uniform(-40, 40, size=2)
        vel = rng.normal(size=2) * 3
        t = np.arange(past + 1 + future)[:, None] * 0.1
        pts = start + vel * t + rng.normal(scale=0.05, size=(past + 1 + future, 2))
        agents.append(make_track(pts[: past + 1], pts[past + 1 :]))
    return Scene(g, tuple(agents), int(rng.integers(n_agents)), tags={"region": "A"})
