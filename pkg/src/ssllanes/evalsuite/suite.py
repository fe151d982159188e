"""Six-setting generalization and robustness comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..model import ForecastModel, prepare_scene
from ..scenegraph import Scene
from .metrics import evaluate
from .noise import inject_noise

TURNS = ("turn-left", "turn-right")


@dataclass(frozen=True)
class Setting:
    name: str
    recipe: str  # which training set the evaluated model was fit on
    description: str


SETTINGS = (
    Setting("data-25", "data-25", "train on 25% of the training scenes, eval on all validation scenes"),
    Setting("cross-region", "cross-region", "train on region A plus 20% of region B, eval on region B"),
    Setting("lane-change-turn", "full", "eval on lane-change and turn scenes only"),
    Setting("straight-biased", "straight-biased", "train with maintain-speed scenes doubled, eval on turns"),
    Setting("noise-0.25", "full", "eval with 25% of agents and lane nodes perturbed"),
    Setting("noise-0.5", "full", "eval with 50% of agents and lane nodes perturbed"),
)
RECIPES = ("full", "data-25", "cross-region", "straight-biased")


class MissingTagsError(ValueError):
    pass


def require_tags(scenes: Sequence[Scene], tags: Sequence[str], purpose: str) -> None:
    missing = sorted({t for s in scenes for t in tags if t not in s.tags})
    if missing:
        raise MissingTagsError(f"{purpose} requires scene tags {list(tags)}; missing {missing}")


def _subset(scenes: Sequence[Scene], fraction: float, seed) -> list[Scene]:
    n = int(round(fraction * len(scenes)))
    keep = np.sort(np.random.default_rng(seed).permutation(len(scenes))[:n])
    return [scenes[i] for i in keep]


def training_set(train: Sequence[Scene], recipe: str, seed=0, fraction: float = 0.25,
                 region_b_fraction: float = 0.2) -> list[Scene]:
    if recipe == "full":
        return list(train)
    if recipe == "data-25":
        return _subset(train, fraction, [seed, 1])
    if recipe == "cross-region":
        require_tags(train, ["region"], "cross-region setting")
        a = [s for s in train if s.tags["region"] == "A"]
        b = [s for s in train if s.tags["region"] == "B"]
        if not a or not b:
            raise MissingTagsError("cross-region setting needs training scenes from both region A and region B")
        return a + _subset(b, region_b_fraction, [seed, 2])
    if recipe == "straight-biased":
        require_tags(train, ["maneuver"], "straight-biased setting")
        return list(train) + [s for s in train if s.tags["maneuver"] == "maintain-speed"]
    raise ValueError(f"unknown training recipe {recipe!r}")


def eval_set(val: Sequence[Scene], setting: str, seed=0, noise_levels=(0.25, 0.5)) -> list[Scene]:
    if setting in ("data-25", "full"):
        return list(val)
    if setting == "cross-region":
        require_tags(val, ["region"], "cross-region setting")
        out = [s for s in val if s.tags["region"] == "B"]
    elif setting == "lane-change-turn":
        require_tags(val, ["maneuver"], "lane-change/turn setting")
        out = [s for s in val if s.tags["maneuver"] in ("lane-change", *TURNS)]
    elif setting == "straight-biased":
        require_tags(val, ["maneuver"], "straight-biased setting")
        out = [s for s in val if s.tags["maneuver"] in TURNS]
    elif setting == "noise-0.25":
        out = inject_noise(val, noise_levels[0], seed=[seed, 5], target="both")
    elif setting == "noise-0.5":
        out = inject_noise(val, noise_levels[1], seed=[seed, 6], target="both")
    else:
        raise ValueError(f"unknown setting {setting!r}")
    if not out:
        raise ValueError(f"setting {setting!r} selects no validation scenes")
    return out


def evaluate_model(model: ForecastModel, scenes: Sequence[Scene], k: int | None = None):
    items = [prepare_scene(s, model.config) for s in scenes]
    trajs, scores = model.predict(items)
    gt = np.stack([s.focus.future_positions for s in scenes])
    return evaluate(trajs, gt, scores, k)


def train_suite_models(
    train: Sequence[Scene],
    variants: Mapping[str, Callable[[list[Scene], str], ForecastModel]],
    recipes: Sequence[str] = RECIPES,
    seed=0,
) -> dict[str, dict[str, ForecastModel]]:
    """Fit every variant on every training recipe.

    ``variants`` maps a model name to ``fit(scenes, recipe) -> model``.
    """
    return {
        recipe: {name: fit(training_set(train, recipe, seed), recipe) for name, fit in variants.items()}
        for recipe in recipes
    }


def generalization_suite(
    models: Mapping[str, Mapping[str, ForecastModel]],
    val: Sequence[Scene],
    seed=0,
    settings: Sequence[Setting] = SETTINGS,
    noise_levels=(0.25, 0.5),
) -> list[dict]:
    """One row per (setting, model) with K=6 and K=1 metrics.

    ``models`` maps training recipe -> model name -> model, as returned by
    :func:`train_suite_models`.
    """
    rows = []
    for st in settings:
        if st.recipe not in models:
            raise KeyError(f"setting {st.name!r} needs models trained on recipe {st.recipe!r}")
        scenes = eval_set(val, st.name, seed, noise_levels)
        for name, model in models[st.recipe].items():
            r6 = evaluate_model(model, scenes)
            r1 = evaluate_model(model, scenes, k=1)
            rows.append({
                "setting": st.name, "model": name, "n_scenes": r6.n_scenes,
                "minADE6": r6.min_ade, "minFDE6": r6.min_fde, "MR6": r6.miss_rate,
                "brier_minFDE6": r6.brier_min_fde, "minADE1": r1.min_ade, "minFDE1": r1.min_fde,
            })
    return rows


def write_rows_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def format_table(rows: Sequence[dict]) -> str:
    """Aligned plain-text rendering of metric rows."""
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) if i > 1 else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
              for row in cells]
    return "\n".join(lines)
