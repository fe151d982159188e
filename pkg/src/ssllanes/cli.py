"""Command-line entry point: ``ssllanes gen|labels|train|eval|analyze|plot``.

Every flag can also be set through an environment variable named
``SSLLANES_<SUBCOMMAND>_<FLAG>`` (for example ``SSLLANES_TRAIN_STEPS``).
"""

from __future__ import annotations

import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .autodiff import CheckpointError
from .pseudolabels import PretextUnavailable, export_labels
from .scenegraph import SceneFormatError, load_scenes, save_scenes

PRETEXT_CHOICE = click.Choice(["none", "mask", "d2i", "maneuver", "goal"])


# ----------------------------------------------------------------- manifest


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def write_manifest(path: Path, subcommand: str, params: dict, inputs: list, outputs: list, started: float) -> None:
    """Record everything needed to rerun a subcommand next to its outputs."""
    manifest = {
        "subcommand": subcommand,
        "config": _jsonable(params),
        "seed": params.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_beside(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _fail(msg: str) -> None:
    raise click.ClickException(msg)


def _read_scenes(path: Path, split: str | None = None):
    try:
        scenes = load_scenes(path)
    except (SceneFormatError, OSError) as e:
        _fail(str(e))
    if split and split != "all":
        scenes = [s for s in scenes if s.tags.get("split", "train") == split]
    if not scenes:
        _fail(f"{path}: no scenes" + (f" in split {split!r}" if split and split != "all" else ""))
    return scenes


def _parse_mix(text: str | None, option: str) -> dict[str, float] | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        if not sep:
            _fail(f"{option}: expected key=weight pairs, got {part!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            _fail(f"{option}: weight {val!r} is not a number")
    return out


@click.group(context_settings={"help_option_names": ["-h", "--help"], "show_default": True})
@click.version_option(__version__)
def cli():
    """Lane-graph motion forecasting with self-supervised pretext tasks."""


# ---------------------------------------------------------------------- gen


@cli.command()
@click.option("--seed", type=int, default=0, help="World seed.")
@click.option("--n", type=int, default=1000, help="Number of scenes.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Scene file to write.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="YAML or JSON file with world settings; flags given explicitly win.")
@click.option("--train-fraction", type=float, default=0.8, help="Share of scenes tagged split=train.")
@click.option("--maneuver-mix", default=None, help="Weights like maintain-speed=2,turn-left=1.")
@click.option("--region-mix", default=None, help="Weights like A=1,B=1.")
@click.option("--noise-sigma", type=float, default=0.05, help="Position noise in meters.")
@click.option("--spacing", type=float, default=3.0, help="Lane node spacing in meters.")
@click.pass_context
def gen(ctx, seed, n, out, config, train_fraction, maneuver_mix, region_mix, noise_sigma, spacing):
    """Generate synthetic scenes (each tagged split=train or split=val)."""
    from .synthgen import WorldConfig, gen_dataset

    started = time.time()
    kw: dict = {}
    if config is not None:
        import yaml

        loaded = yaml.safe_load(config.read_text()) or {}
        if not isinstance(loaded, dict):
            _fail(f"{config}: expected a mapping of world settings")
        kw.update(loaded)
    explicit = {
        "seed": seed, "n_scenes": n, "train_fraction": train_fraction,
        "noise_sigma": noise_sigma, "node_spacing": spacing,
        "maneuver_mix": _parse_mix(maneuver_mix, "--maneuver-mix"),
        "region_mix": _parse_mix(region_mix, "--region-mix"),
    }
    for key, value in explicit.items():
        source = ctx.get_parameter_source(
            {"n_scenes": "n", "node_spacing": "spacing"}.get(key, key)
        )
        if value is not None and (key not in kw or source != click.core.ParameterSource.DEFAULT):
            kw[key] = value
    if "agents_per_scene" in kw:
        kw["agents_per_scene"] = tuple(kw["agents_per_scene"])
    try:
        world = WorldConfig(**kw)
    except (TypeError, ValueError) as e:
        _fail(f"invalid world config: {e}")
    train, val = gen_dataset(world)
    for s in train:
        s.tags["split"] = "train"
    for s in val:
        s.tags["split"] = "val"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenes(out, train + val)
    params = {k: getattr(world, k) for k in world.__dataclass_fields__}
    write_manifest(_manifest_beside(out), "gen", params, [config] if config else [], [out], started)
    click.echo(f"wrote {len(train)} train + {len(val)} val scenes to {out}")


# ------------------------------------------------------------------- labels


@cli.command()
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--pretext", type=click.Choice(["mask", "d2i", "maneuver", "goal"]), required=True)
@click.option("--split", type=click.Choice(["train", "val", "all"]), default="train")
@click.option("--mask-ratio", type=float, default=0.4, help="Fraction of nodes masked per lane.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def labels(scenes, pretext, split, mask_ratio, seed, out):
    """Export pseudo-labels for one pretext task as a sidecar file keyed by scene id."""
    started = time.time()
    data = _read_scenes(scenes, split)
    # maneuver clusters are always fit on the training split
    fit = _read_scenes(scenes, "train") if pretext == "maneuver" and split != "train" else None
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        n = export_labels(out, data, pretext, seed=seed, mask_ratio=mask_ratio, fit_scenes=fit)
    except (PretextUnavailable, ValueError) as e:
        _fail(str(e))
    params = {"pretext": pretext, "split": split, "mask_ratio": mask_ratio, "seed": seed}
    write_manifest(_manifest_beside(out), "labels", params, [scenes], [out], started)
    click.echo(f"wrote {n} label records to {out}")


# -------------------------------------------------------------------- train


@cli.command("train")
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--pretext", type=PRETEXT_CHOICE, default="none")
@click.option("--hidden", type=int, default=32, help="Hidden width H.")
@click.option("--modes", type=int, default=6, help="Number of forecast modes K.")
@click.option("--steps", type=int, default=2000)
@click.option("--batch-size", type=int, default=32)
@click.option("--lr-decay-step", type=int, default=None, help="Step where lr drops 1e-3 -> 1e-4 [default: 80% of steps].")
@click.option("--augment/--no-augment", default=False, help="Random rotation by multiples of 30 degrees.")
@click.option("--mask-ratio", type=float, default=0.4)
@click.option("--warm-start", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Checkpoint whose map encoder initializes this run.")
@click.option("--labels", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Pseudo-label file from the labels command (otherwise computed here).")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory.")
def train_cmd(scenes, pretext, hidden, modes, steps, batch_size, lr_decay_step, augment, mask_ratio, warm_start,
              labels, seed, out):
    """Train a forecaster jointly with one pretext task; writes model.ckpt and train_log.csv."""
    from .model import ModelConfig
    from .pseudolabels import load_labels
    from .trainer import TrainConfig, TrainingDiverged, pretext_from_records, train

    started = time.time()
    data = _read_scenes(scenes, "train")
    try:
        mc = ModelConfig(hidden_dim=hidden, num_modes=modes, pretext=pretext, seed=seed)
        tc = TrainConfig(
            steps=steps, batch_size=batch_size, seed=seed, pretext=pretext, augment=augment,
            lr_decay_step=int(round(0.8 * steps)) if lr_decay_step is None else lr_decay_step,
            mask_ratio=mask_ratio, warm_start_path=str(warm_start) if warm_start else None,
        )
        pretext_data = None
        if labels is not None:
            if pretext == "none":
                _fail("--labels needs a pretext task")
            pretext_data = pretext_from_records(data, pretext, load_labels(labels), mask_ratio)
        result = train(data, mc, tc, out_dir=out, progress=click.echo, pretext_data=pretext_data)
    except (PretextUnavailable, TrainingDiverged, CheckpointError, ValueError, KeyError) as e:
        _fail(str(e))
    params = {"pretext": pretext, "hidden": hidden, "modes": modes, "steps": steps, "batch_size": batch_size,
              "lr_decay_step": tc.lr_decay_step, "augment": augment, "mask_ratio": mask_ratio,
              "warm_start": warm_start, "labels": labels, "seed": seed}
    inputs = [scenes] + [p for p in (warm_start, labels) if p]
    write_manifest(out / "manifest.json", "train", params, inputs,
                   [result.checkpoint, out / "train_log.csv"], started)
    click.echo(f"checkpoint written to {result.checkpoint}")


# --------------------------------------------------------------------- eval


def read_forecasts(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Forecast file: one JSON object per line with id, trajectories (K,T,2), scores (K)."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = (np.asarray(rec["trajectories"], float), np.asarray(rec["scores"], float))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                _fail(f"{path}:{n}: malformed forecast record ({e})")
    return out


def write_forecasts(path: Path, ids, trajs: np.ndarray, scores: np.ndarray) -> None:
    with open(path, "w") as fh:
        for i, t, s in zip(ids, trajs, scores):
            fh.write(json.dumps({"id": i, "trajectories": t.tolist(), "scores": s.tolist()}) + "\n")


@cli.command("eval")
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--forecasts", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Evaluate a forecast file instead of a checkpoint.")
@click.option("--split", type=click.Choice(["train", "val", "all"]), default="val")
@click.option("--k", type=int, multiple=True, default=(1, 6), help="Top-K values to report.")
@click.option("--seed", type=int, default=0, help="Unused by evaluation; recorded for provenance.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory for metrics.csv, forecasts.jsonl and the manifest.")
def eval_cmd(scenes, checkpoint, forecasts, split, k, seed, out):
    """Report minADE, minFDE, miss rate and brier-minFDE for the focus agents."""
    from .evalsuite import evaluate, format_table, write_rows_csv
    from .model import prepare_scene
    from .trainer import load_model

    started = time.time()
    if (checkpoint is None) == (forecasts is None):
        _fail("give exactly one of --checkpoint or --forecasts")
    data = [s for s in _read_scenes(scenes, split) if s.focus.has_future]
    if not data:
        _fail("no scenes with ground-truth futures")
    ids = [s.tags.get("id", str(i)) for i, s in enumerate(data)]
    if checkpoint is not None:
        try:
            model = load_model(checkpoint)
        except (CheckpointError, ValueError) as e:
            _fail(str(e))
        trajs, scores = model.predict([prepare_scene(s, model.config) for s in data])
    else:
        table = read_forecasts(forecasts)
        missing = [i for i in ids if i not in table]
        if missing:
            _fail(f"forecast file lacks {len(missing)} scene ids, e.g. {missing[:3]}")
        trajs = np.stack([table[i][0] for i in ids])
        scores = np.stack([table[i][1] for i in ids])
    gt = np.stack([s.focus.future_positions for s in data])
    rows = []
    for kk in k:
        if kk > trajs.shape[1]:
            _fail(f"--k {kk} exceeds the {trajs.shape[1]} available modes")
        rep = evaluate(trajs, gt, scores, kk)
        rows.append({"K": kk, "minADE": rep.min_ade, "minFDE": rep.min_fde, "MR": rep.miss_rate,
                     "brier_minFDE": rep.brier_min_fde, "n_scenes": rep.n_scenes})
    click.echo(format_table(rows))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(out / "metrics.csv", rows)
        write_forecasts(out / "forecasts.jsonl", ids, trajs, scores)
        write_manifest(out / "manifest.json", "eval",
                       {"split": split, "k": list(k), "seed": seed, "checkpoint": checkpoint, "forecasts": forecasts},
                       [p for p in (scenes, checkpoint, forecasts) if p], [out / "metrics.csv", out / "forecasts.jsonl"],
                       started)


# ------------------------------------------------------------------ analyze


def _parse_named(values, option: str) -> dict[str, Path]:
    out = {}
    for v in values:
        name, sep, path = v.partition("=")
        if not sep:
            _fail(f"{option}: expected NAME=PATH, got {v!r}")
        p = Path(path)
        if not p.exists():
            _fail(f"{option}: {p} does not exist")
        out[name] = p
    return out


@cli.command()
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--pretexts", default="none,mask,d2i,maneuver,goal",
              help="Comma-separated variants to train for the generalization suite.")
@click.option("--checkpoint", multiple=True,
              help="NAME=PATH; repeatable. When given, only the CKA analysis runs on these checkpoints.")
@click.option("--hidden", type=int, default=32)
@click.option("--modes", type=int, default=6)
@click.option("--steps", type=int, default=2000, help="Training steps per suite model.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def analyze(scenes, pretexts, checkpoint, hidden, modes, steps, seed, out):
    """Generalization suite (six settings) and cross-model CKA of focus-agent features."""
    from .evalsuite import (
        SETTINGS,
        MissingTagsError,
        cka_matrix,
        format_table,
        generalization_suite,
        train_suite_models,
        write_matrix_csv,
        write_rows_csv,
    )
    from .model import ModelConfig, prepare_scene
    from .trainer import TrainConfig, load_model, train

    started = time.time()
    train_scenes = _read_scenes(scenes, "train")
    val = _read_scenes(scenes, "val")
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if checkpoint:
        models = {}
        for name, path in _parse_named(checkpoint, "--checkpoint").items():
            try:
                models[name] = load_model(path)
            except (CheckpointError, ValueError) as e:
                _fail(str(e))
        full = {"full": models}
    else:
        names = [p.strip() for p in pretexts.split(",") if p.strip()]
        bad = [p for p in names if p not in PRETEXT_CHOICE.choices]
        if bad:
            _fail(f"--pretexts: unknown variants {bad}")

        def fitter(pretext):
            def fit(data, recipe):
                click.echo(f"training {pretext} on {recipe} ({len(data)} scenes)")
                mc = ModelConfig(hidden_dim=hidden, num_modes=modes, pretext=pretext, seed=seed)
                tc = TrainConfig.scaled(steps, seed=seed, pretext=pretext)
                return train(data, mc, tc, out_dir=out / "models" / recipe / pretext, progress=None).model
            return fit

        try:
            full = train_suite_models(train_scenes, {p: fitter(p) for p in names}, seed=seed)
            rows = generalization_suite(full, val, seed=seed, settings=SETTINGS)
        except (PretextUnavailable, MissingTagsError, ValueError) as e:
            _fail(str(e))
        write_rows_csv(out / "suite.csv", rows)
        (out / "suite.txt").write_text(format_table(rows) + "\n")
        click.echo(format_table(rows))
        outputs += [out / "suite.csv", out / "suite.txt"]
    val_f = [s for s in val if s.focus.has_future]
    feats = {}
    for name, model in full["full"].items():
        f = model.features([prepare_scene(s, model.config) for s in val_f])
        feats[f"{name}/m2a"] = f["m2a"]
        feats[f"{name}/a2a"] = f["a2a"]
    try:
        labels, mat = cka_matrix(feats)
    except ValueError as e:
        _fail(str(e))
    write_matrix_csv(out / "cka.csv", labels, mat)
    outputs.append(out / "cka.csv")
    click.echo(f"CKA matrix over {len(labels)} feature sets written to {out / 'cka.csv'}")
    write_manifest(out / "manifest.json", "analyze",
                   {"pretexts": pretexts, "checkpoints": list(checkpoint), "hidden": hidden, "modes": modes,
                    "steps": steps, "seed": seed}, [scenes], outputs, started)


# --------------------------------------------------------------------- plot


@cli.command()
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(["train", "val", "all"]), default="val")
@click.option("--limit", type=int, default=10, help="Maximum number of scenes to draw.")
@click.option("--seed", type=int, default=0, help="Chooses which scenes are drawn.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def plot(scenes, checkpoint, split, limit, seed, out):
    """Write one SVG per scene: lanes, observed past, ground truth, predicted modes."""
    from .model import prepare_scene
    from .plotting import scene_svg
    from .trainer import load_model

    started = time.time()
    data = _read_scenes(scenes, split)
    try:
        model = load_model(checkpoint)
    except (CheckpointError, ValueError) as e:
        _fail(str(e))
    pick = np.sort(np.random.default_rng(seed).permutation(len(data))[: max(limit, 0)])
    chosen = [data[i] for i in pick]
    trajs, scores = model.predict([prepare_scene(s, model.config) for s in chosen])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s, t, p in zip(chosen, trajs, scores):
        sid = s.tags.get("id", "scene")
        path = out / f"{sid}.svg"
        path.write_text(scene_svg(s, t, p, title=f"{sid} {s.tags.get('maneuver', '')}".strip()))
        written.append(path)
    write_manifest(out / "manifest.json", "plot", {"split": split, "limit": limit, "seed": seed},
                   [scenes, checkpoint], written, started)
    click.echo(f"wrote {len(written)} SVG files to {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ssllanes", auto_envvar_prefix="SSLLANES", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
