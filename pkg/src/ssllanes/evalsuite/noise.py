"""Gaussian perturbation of agent histories and lane-node features."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..scenegraph import FEAT_DIR, AgentTrack, LaneGraph, Scene

TARGETS = ("agents", "map", "both")


def _noisy_track(track: AgentTrack, noise: np.ndarray) -> AgentTrack:
    """Perturb observed displacements and rebuild positions backward from t=0."""
    disp = track.past_displacements + np.where(track.observed_mask[:, None], noise, 0.0)
    past = np.empty_like(track.past_positions)
    past[-1] = track.past_positions[-1]
    past[:-1] = past[-1] - np.cumsum(disp[::-1], axis=0)[::-1]
    return AgentTrack(past, track.future_positions.copy(), track.observed_mask.copy())


def inject_noise(
    scenes: Sequence[Scene], p: float, sigma2: float = 0.2, seed=0, target: str = "both",
) -> list[Scene]:
    """Select each agent track / lane node with probability ``p`` and add N(0, sigma2) noise.

    Agents get noise on every observed past displacement component; lane
    nodes on their direction components. Ground-truth futures and the t=0
    position are never moved.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"selection probability must be in [0, 1], got {p}")
    std = math.sqrt(sigma2)
    out = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), i])
        agents = scene.agents
        graph = scene.graph
        if target in ("agents", "both"):
            picked = rng.random(len(agents)) < p
            agents = tuple(
                _noisy_track(a, rng.normal(0.0, std, size=a.past_displacements.shape)) if sel else a
                for a, sel in zip(agents, picked)
            )
        if target in ("map", "both"):
            picked = rng.random(graph.num_nodes) < p
            feats = graph.node_features.copy()
            n_dir = FEAT_DIR.stop - FEAT_DIR.start
            feats[picked, FEAT_DIR] += rng.normal(0.0, std, size=(int(picked.sum()), n_dir))
            graph = LaneGraph(graph.node_positions, feats, graph.adjacency, graph.lane_membership,
                              graph.intersection_flags)
        out.append(Scene(graph, agents, scene.focus_agent, scene.frame, dict(scene.tags)))
    return out
