import json
import re

import click
import numpy as np
import pytest

from ssllanes.cli import cli, main
from ssllanes.scenegraph import load_scenes

SUBCOMMANDS = ("gen", "labels", "train", "eval", "analyze", "plot")
SMOKE_TRAIN = ["--hidden", "8", "--modes", "3", "--steps", "6", "--batch-size", "4"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def scenes_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "scenes.jsonl"
    assert main(["gen", "--seed", "3", "--n", "60", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(scenes_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "--scenes", str(scenes_file), "--out", str(out), *SMOKE_TRAIN]) == 0
    return out / "model.ckpt"


def test_gen_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        code, _, _ = run(["gen", "--seed", 7, "--n", 100, "--out", p], capsys)
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    scenes = load_scenes(a)
    assert len(scenes) == 100
    assert {s.tags["split"] for s in scenes} == {"train", "val"}


def test_help_lists_every_flag_with_defaults():
    for name in SUBCOMMANDS:
        cmd = cli.commands[name]
        ctx = click.Context(cmd, info_name=name, show_default=True)
        text = cmd.get_help(ctx)
        for param in cmd.params:
            if not isinstance(param, click.Option) or param.hidden:
                continue
            assert param.opts[0] in text, (name, param.opts[0])
            default = param.get_default(ctx)
            if not param.required and (isinstance(default, (bool, int, float, str)) or isinstance(default, tuple) and default):
                # the entry runs until the next option line
                entry = re.split(r"\n\s+-", text[text.index(param.opts[0]):], maxsplit=1)[0]
                assert "default:" in entry, (name, param.opts[0], entry)


def test_perfect_forecasts_score_zero(scenes_file, tmp_path, capsys):
    scenes = [s for s in load_scenes(scenes_file) if s.tags["split"] == "val"]
    path = tmp_path / "oracle.jsonl"
    with open(path, "w") as fh:
        for s in scenes:
            fut = s.focus.future_positions
            fh.write(json.dumps({"id": s.tags["id"], "trajectories": np.stack([fut] * 6).tolist(),
                                 "scores": [1, 0, 0, 0, 0, 0]}) + "\n")
    code, out, _ = run(["eval", "--scenes", scenes_file, "--forecasts", path, "--out", tmp_path / "ev"], capsys)
    assert code == 0
    rows = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    header = rows[0].split(",")
    for row in rows[1:]:
        rec = dict(zip(header, row.split(",")))
        assert float(rec["minADE"]) == 0.0 and float(rec["minFDE"]) == 0.0 and float(rec["MR"]) == 0.0
    assert "minFDE" in out


@pytest.mark.parametrize("argv, pattern", [
    (["train", "--scenes", "/nonexistent/scenes.jsonl", "--out", "x"], "does not exist"),
    (["gen", "--n", "5", "--out", "x.jsonl", "--bogus"], "No such option"),
    (["eval", "--scenes", "{scenes}"], "exactly one of --checkpoint or --forecasts"),
    (["gen", "--n", "5", "--out", "x.jsonl", "--maneuver-mix", "fly=1"], "invalid world config"),
])
def test_bad_invocations_exit_nonzero(argv, pattern, scenes_file, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code, _, err = run([a.format(scenes=scenes_file) for a in argv], capsys)
    assert code != 0
    assert re.search(pattern, err), err


def test_d2i_without_intersections_is_rejected(tmp_path, capsys):
    path = tmp_path / "lc.jsonl"
    assert run(["gen", "--n", 30, "--maneuver-mix", "lane-change=1", "--region-mix", "A=1", "--out", path], capsys)[0] == 0
    code, _, err = run(["train", "--scenes", path, "--pretext", "d2i", "--out", tmp_path / "run", *SMOKE_TRAIN], capsys)
    assert code != 0
    assert "d2i" in err
    assert not (tmp_path / "run" / "model.ckpt").exists()


def test_env_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SSLLANES_GEN_N", "12")
    monkeypatch.setenv("SSLLANES_GEN_SEED", "5")
    assert run(["gen", "--out", tmp_path / "a.jsonl"], capsys)[0] == 0
    monkeypatch.delenv("SSLLANES_GEN_N")
    monkeypatch.delenv("SSLLANES_GEN_SEED")
    assert run(["gen", "--n", 12, "--seed", 5, "--out", tmp_path / "b.jsonl"], capsys)[0] == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["config"]["n_scenes"] == 12 and manifest["seed"] == 5


def test_config_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "world.yaml"
    cfg.write_text("n_scenes: 20\nseed: 9\n")
    assert run(["gen", "--config", cfg, "--out", tmp_path / "a.jsonl"], capsys)[0] == 0
    assert len(load_scenes(tmp_path / "a.jsonl")) == 20
    assert run(["gen", "--config", cfg, "--n", 10, "--out", tmp_path / "b.jsonl"], capsys)[0] == 0
    assert len(load_scenes(tmp_path / "b.jsonl")) == 10


def test_train_manifest_reproduces_run(scenes_file, checkpoint, tmp_path, capsys):
    manifest = json.loads((checkpoint.parent / "manifest.json").read_text())
    cfg = manifest["config"]
    assert manifest["subcommand"] == "train" and manifest["inputs"] == [str(scenes_file)]
    argv = ["train", "--scenes", manifest["inputs"][0], "--out", tmp_path / "again", "--seed", manifest["seed"]]
    for key in ("pretext", "hidden", "modes", "steps", "batch_size", "lr_decay_step", "mask_ratio"):
        if cfg[key] is not None:
            argv += [f"--{key.replace('_', '-')}", cfg[key]]
    argv.append("--augment" if cfg["augment"] else "--no-augment")
    assert run(argv, capsys)[0] == 0
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == checkpoint.read_bytes()


@pytest.mark.parametrize("pretext", ["mask", "d2i", "maneuver", "goal"])
def test_train_from_label_file_matches_computed_labels(pretext, scenes_file, tmp_path, capsys):
    lab = tmp_path / "labels.jsonl"
    assert run(["labels", "--scenes", scenes_file, "--pretext", pretext, "--out", lab], capsys)[0] == 0
    assert (tmp_path / "labels.jsonl.manifest.json").exists()
    common = ["train", "--scenes", scenes_file, "--pretext", pretext, *SMOKE_TRAIN]
    assert run([*common, "--out", tmp_path / "a"], capsys)[0] == 0
    assert run([*common, "--labels", lab, "--out", tmp_path / "b"], capsys)[0] == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_label_file_mismatch_is_rejected(scenes_file, tmp_path, capsys):
    lab = tmp_path / "goal.jsonl"
    assert run(["labels", "--scenes", scenes_file, "--pretext", "goal", "--out", lab], capsys)[0] == 0
    code, _, err = run(["train", "--scenes", scenes_file, "--pretext", "maneuver", "--labels", lab,
                        "--out", tmp_path / "x", *SMOKE_TRAIN], capsys)
    assert code != 0 and "goal" in err
    mask = tmp_path / "mask.jsonl"
    assert run(["labels", "--scenes", scenes_file, "--pretext", "mask", "--mask-ratio", 0.2, "--out", mask], capsys)[0] == 0
    code, _, err = run(["train", "--scenes", scenes_file, "--pretext", "mask", "--labels", mask,
                        "--out", tmp_path / "y", *SMOKE_TRAIN], capsys)
    assert code != 0 and "ratio" in err


def test_recipe_end_to_end(scenes_file, checkpoint, tmp_path, capsys):
    code, out, _ = run(["eval", "--scenes", scenes_file, "--checkpoint", checkpoint, "--k", 1, "--k", 3,
                        "--out", tmp_path / "ev"], capsys)
    assert code == 0 and "minADE" in out
    assert (tmp_path / "ev" / "manifest.json").exists()
    # a checkpoint's own forecast file reproduces its metrics
    code, out2, _ = run(["eval", "--scenes", scenes_file, "--forecasts", tmp_path / "ev" / "forecasts.jsonl",
                         "--k", 1, "--k", 3], capsys)
    assert code == 0 and out2 == out

    code, _, err = run(["eval", "--scenes", scenes_file, "--checkpoint", checkpoint, "--k", 6], capsys)
    assert code != 0 and "exceeds" in err

    code, _, _ = run(["plot", "--scenes", scenes_file, "--checkpoint", checkpoint, "--limit", 3,
                      "--out", tmp_path / "svg"], capsys)
    assert code == 0
    svgs = sorted((tmp_path / "svg").glob("*.svg"))
    assert len(svgs) == 3
    text = svgs[0].read_text()
    assert text.startswith("<svg") and 'class="goal"' in text and "polyline" in text
    assert json.loads((tmp_path / "svg" / "manifest.json").read_text())["subcommand"] == "plot"


def test_analyze_with_checkpoints(scenes_file, checkpoint, tmp_path, capsys):
    code, _, _ = run(["analyze", "--scenes", scenes_file, "--checkpoint", f"base={checkpoint}",
                      "--checkpoint", f"copy={checkpoint}", "--out", tmp_path / "an"], capsys)
    assert code == 0
    rows = (tmp_path / "an" / "cka.csv").read_text().splitlines()
    assert rows[0].split(",")[1:] == ["base/m2a", "base/a2a", "copy/m2a", "copy/a2a"]
    mat = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    assert np.all((mat >= 0) & (mat <= 1))
    assert mat[0, 2] == pytest.approx(1.0) and mat[1, 3] == pytest.approx(1.0)
    code, _, err = run(["analyze", "--scenes", scenes_file, "--checkpoint", "nope", "--out", tmp_path / "x"], capsys)
    assert code != 0 and "NAME=PATH" in err


def test_val_maneuver_labels_reuse_train_centroids(scenes_file, tmp_path, capsys):
    from ssllanes.pseudolabels import label_maneuvers

    out = tmp_path / "val.jsonl"
    assert run(["labels", "--scenes", scenes_file, "--pretext", "maneuver", "--split", "val", "--out", out], capsys)[0] == 0
    scenes = load_scenes(scenes_file)
    train_s = [s for s in scenes if s.tags["split"] == "train"]
    val_s = [s for s in scenes if s.tags["split"] == "val"]
    expected = label_maneuvers(val_s, 0, fitted=label_maneuvers(train_s, 0)).ids
    got = [json.loads(line)["maneuver"] for line in out.read_text().splitlines()]
    assert got == expected.tolist()
