"""Static SVG rendering of a scene with its forecast."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .scenegraph import Scene

MODE_COLORS = ("#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#a6761d", "#1f78b4", "#b2df8a", "#fb9a99")
MODE_DASHES = ("", "4 2", "1 2", "6 2 1 2", "8 3", "2 4", "3 1", "5 5")


def _path(points: np.ndarray) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in points)


def scene_svg(
    scene: Scene,
    trajectories: np.ndarray | None = None,
    scores: np.ndarray | None = None,
    radius: float = 2.0,
    margin: float = 5.0,
    title: str | None = None,
) -> str:
    """SVG with lanes (grey), observed past (gold), ground truth (red) and predicted modes.

    Coordinates are meters in the scene frame with +y drawn upward; a circle
    of ``radius`` meters marks the ground-truth endpoint.
    """
    focus = scene.focus
    pts = [scene.graph.node_positions, focus.past_positions]
    if focus.has_future:
        pts.append(focus.future_positions)
    if trajectories is not None:
        pts.append(np.asarray(trajectories).reshape(-1, 2))
    allp = np.concatenate([p for p in pts if p.size])
    lo = allp.min(axis=0) - margin
    hi = allp.max(axis=0) + margin
    w, h = hi - lo
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]:.2f} {-hi[1]:.2f} {w:.2f} {h:.2f}" '
        f'width="{max(200, int(4 * w))}" height="{max(200, int(4 * h))}">',
        f'<rect x="{lo[0]:.2f}" y="{-hi[1]:.2f}" width="{w:.2f}" height="{h:.2f}" fill="white"/>',
    ]
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.append('<g transform="scale(1,-1)" fill="none" stroke-linecap="round" stroke-linejoin="round">')
    g = scene.graph
    for lane, nodes in g.lane_membership.items():
        p = g.node_positions[nodes]
        if len(nodes) == 1:
            parts.append(f'<circle cx="{p[0, 0]:.2f}" cy="{p[0, 1]:.2f}" r="0.3" fill="#bbbbbb"/>')
        else:
            parts.append(f'<polyline class="lane" points="{_path(p)}" stroke="#bbbbbb" stroke-width="0.4"/>')
    for i, a in enumerate(scene.agents):
        if i == scene.focus_agent:
            continue
        obs = a.past_positions[np.concatenate([a.observed_mask, [True]])]
        parts.append(f'<polyline class="other" points="{_path(obs)}" stroke="#888888" stroke-width="0.5"/>')
    if trajectories is not None:
        trajs = np.asarray(trajectories)
        order = np.argsort(-scores) if scores is not None else np.arange(len(trajs))
        for rank, k in enumerate(order):
            line = np.vstack([focus.current_position, trajs[k]])
            dash = MODE_DASHES[rank % len(MODE_DASHES)]
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            label = f"mode {k}" + (f" p={scores[k]:.3f}" if scores is not None else "")
            parts.append(
                f'<polyline class="mode" points="{_path(line)}" stroke="{MODE_COLORS[rank % len(MODE_COLORS)]}" '
                f'stroke-width="0.6"{dash_attr}><title>{escape(label)}</title></polyline>'
            )
    obs = focus.past_positions[np.concatenate([focus.observed_mask, [True]])]
    parts.append(f'<polyline class="past" points="{_path(obs)}" stroke="#e6ab02" stroke-width="0.9"/>')
    if focus.has_future:
        fut = np.vstack([focus.current_position, focus.future_positions])
        end = focus.future_positions[-1]
        parts.append(f'<polyline class="truth" points="{_path(fut)}" stroke="#d62728" stroke-width="0.9"/>')
        parts.append(
            f'<circle class="goal" cx="{end[0]:.2f}" cy="{end[1]:.2f}" r="{radius:.2f}" '
            f'stroke="#d62728" stroke-width="0.3"/>'
        )
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"
