import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binomtest, chi2

from ssllanes.evalsuite import (
    RECIPES,
    SETTINGS,
    MissingTagsError,
    brier_min_fde,
    cka,
    cka_matrix,
    eval_set,
    evaluate,
    evaluate_model,
    format_table,
    generalization_suite,
    inject_noise,
    min_ade,
    min_fde,
    miss_rate,
    top_k,
    train_suite_models,
    training_set,
    write_matrix_csv,
    write_rows_csv,
)
from ssllanes.model import ForecastModel, ModelConfig
from ssllanes.scenegraph import FEAT_DIR, Scene
from ssllanes.synthgen import WorldConfig, gen_dataset


def random_forecasts(rng, s=5, k=6, t=30):
    gt = np.cumsum(rng.normal(size=(s, t, 2)), axis=1)
    traj = gt[:, None] + rng.normal(scale=rng.uniform(0.3, 3.0), size=(s, k, t, 2))
    logits = rng.normal(size=(s, k))
    scores = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    return traj, gt, scores


def naive_metrics(traj, gt, scores, k):
    ades, fdes, briers, misses = [], [], [], []
    for i in range(traj.shape[0]):
        order = sorted(range(traj.shape[1]), key=lambda m: (-scores[i, m], m))[:k]
        best_ade, best_fde, best_mode = math.inf, math.inf, None
        for m in order:
            errs = [math.dist(traj[i, m, t], gt[i, t]) for t in range(traj.shape[2])]
            best_ade = min(best_ade, sum(errs) / len(errs))
            if errs[-1] < best_fde:
                best_fde, best_mode = errs[-1], m
        ades.append(best_ade)
        fdes.append(best_fde)
        briers.append(best_fde + (1 - scores[i, best_mode]) ** 2)
        misses.append(best_fde >= 2.0)
    n = len(ades)
    return sum(ades) / n, sum(fdes) / n, sum(misses) / n, sum(briers) / n


# ------------------------------------------------------------------ metrics


def test_exact_mode_gives_zero_errors():
    rng = np.random.default_rng(0)
    traj, gt, scores = random_forecasts(rng, s=3)
    traj[:, 4] = gt
    assert min_ade(traj, gt).tolist() == [0.0] * 3
    assert min_fde(traj, gt).tolist() == [0.0] * 3


def test_two_modes_equal_scores():
    gt = np.zeros((1, 30, 2))
    traj = np.zeros((1, 2, 30, 2))
    traj[0, 0, -1] = [1.0, 0.0]
    traj[0, 1, -1] = [0.0, 5.0]
    assert min_fde(traj, gt, np.array([[0.5, 0.5]]), k=2)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("fde,missed", [(1.9, False), (2.1, True), (2.0, True)])
def test_miss_threshold_boundaries(fde, missed):
    gt = np.zeros((1, 30, 2))
    traj = np.zeros((1, 1, 30, 2))
    traj[0, 0, -1] = [fde, 0.0]
    assert miss_rate(traj, gt) == float(missed)


def test_brier_examples():
    gt = np.zeros((1, 30, 2))
    traj = np.zeros((1, 2, 30, 2))
    traj[0, 0, -1] = [1.0, 0.0]
    traj[0, 1, -1] = [4.0, 0.0]
    assert brier_min_fde(traj, gt, np.array([[0.5, 0.5]]))[0] == pytest.approx(1.25)
    assert brier_min_fde(traj, gt, np.array([[1.0, 0.0]]))[0] == pytest.approx(1.0)


def test_top_k_uses_scores_with_stable_ties():
    s = np.array([[0.1, 0.4, 0.4, 0.1]])
    assert top_k(s, 3).tolist() == [[1, 2, 0]]
    with pytest.raises(ValueError):
        top_k(s, 5)


def test_k1_of_six_mode_model_uses_highest_score():
    gt = np.zeros((1, 30, 2))
    traj = np.zeros((1, 3, 30, 2))
    traj[0, :, -1, 0] = [0.0, 5.0, 9.0]
    rep = evaluate(traj, gt, np.array([[0.2, 0.7, 0.1]]), k=1)
    assert rep.min_fde == pytest.approx(5.0)


def test_missing_ground_truth_raises():
    with pytest.raises(ValueError):
        evaluate(np.zeros((1, 1, 30, 2)), None)
    gt = np.full((1, 30, 2), np.nan)
    with pytest.raises(ValueError):
        evaluate(np.zeros((1, 1, 30, 2)), gt)


def test_metrics_match_exhaustive_loops_and_are_monotone():
    for seed in range(500):
        rng = np.random.default_rng(seed)
        traj, gt, scores = random_forecasts(rng, s=int(rng.integers(1, 5)))
        for k in (1, 6):
            rep = evaluate(traj, gt, scores, k=k)
            ade, fde, mr, brier = naive_metrics(traj, gt, scores, k)
            assert rep.min_ade == pytest.approx(ade, abs=1e-12)
            assert rep.min_fde == pytest.approx(fde, abs=1e-12)
            assert rep.miss_rate == mr
            assert rep.brier_min_fde == pytest.approx(brier, abs=1e-12)
        assert (min_fde(traj, gt, scores, 6) <= min_fde(traj, gt, scores, 1)).all()


@given(st.integers(0, 10_000))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    traj, gt, scores = random_forecasts(rng)
    prev_ade = prev_fde = math.inf
    for k in range(1, 7):
        a, f = min_ade(traj, gt, scores, k), min_fde(traj, gt, scores, k)
        assert (a <= prev_ade + 1e-12).all() and (f <= prev_fde + 1e-12).all()
        assert (f <= 30 * a + 1e-9).all()
        prev_ade, prev_fde = a, f
    rep = evaluate(traj, gt, scores)
    assert 0.0 <= rep.miss_rate <= 1.0
    assert rep.brier_min_fde >= rep.min_fde
    assert rep.miss_rate == pytest.approx(np.mean(min_fde(traj, gt, scores) >= 2.0))


@given(st.integers(0, 10_000), st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_metrics_invariant_under_rigid_transform(seed, theta, dx, dy):
    rng = np.random.default_rng(seed)
    traj, gt, scores = random_forecasts(rng)
    r = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shift = np.array([dx, dy])
    a = evaluate(traj, gt, scores)
    b = evaluate(traj @ r.T + shift, gt @ r.T + shift, scores)
    for f in ("min_ade", "min_fde", "brier_min_fde"):
        assert getattr(b, f) == pytest.approx(getattr(a, f), abs=1e-9)
    assert abs(a.miss_rate - b.miss_rate) <= 1.0 / gt.shape[0]  # only exact-threshold ties may flip


# ---------------------------------------------------------------------- CKA


def naive_cka(a, b):
    n = a.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    ka, kb = a @ a.T, b @ b.T

    def hsic(k, l):
        total = 0.0
        kc, lc = h @ k @ h, h @ l @ h
        for i in range(n):
            for j in range(n):
                total += kc[i, j] * lc[i, j]
        return total

    return hsic(ka, kb) / math.sqrt(hsic(ka, ka) * hsic(kb, kb))


def test_cka_identity_orthogonal_and_scale():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 8))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    assert cka(x, x) == pytest.approx(1.0, abs=1e-9)
    assert cka(x, x @ q) == pytest.approx(1.0, abs=1e-8)
    assert cka(x, 3.7 * x) == pytest.approx(1.0, abs=1e-8)


def test_cka_matches_hsic_oracle_and_is_symmetric():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(15, 4)), rng.normal(size=(15, 6))
        b[:, :2] += a[:, :2]
        assert cka(a, b) == pytest.approx(naive_cka(a, b), abs=1e-9)
        assert abs(cka(a, b) - cka(b, a)) < 1e-9
        assert 0.0 <= cka(a, b) <= 1.0


def test_cka_errors():
    with pytest.raises(ValueError):
        cka(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError):
        cka(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        cka(np.zeros((4, 3)), np.zeros((5, 3)))


def test_cka_matrix_and_csv(tmp_path):
    rng = np.random.default_rng(1)
    feats = {n: rng.normal(size=(20, 5)) for n in ("none", "mask", "goal")}
    names, mat = cka_matrix(feats)
    assert names == ["none", "mask", "goal"]
    np.testing.assert_allclose(mat, mat.T)
    np.testing.assert_allclose(np.diag(mat), 1.0)
    write_matrix_csv(tmp_path / "c.csv", names, mat)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == ",none,mask,goal" and len(lines) == 4


# -------------------------------------------------------------------- noise


@pytest.fixture(scope="module")
def noise_scenes():
    train, val = gen_dataset(WorldConfig(seed=40, n_scenes=150))
    return train + val


def scene_arrays(s):
    return np.concatenate([a.past_positions.ravel() for a in s.agents] + [s.graph.node_features.ravel()])


def test_zero_probability_is_identity(noise_scenes):
    out = inject_noise(noise_scenes[:20], 0.0, seed=3)
    for a, b in zip(noise_scenes, out):
        assert a.equals(b)


def test_noise_rejects_bad_arguments(noise_scenes):
    with pytest.raises(ValueError):
        inject_noise(noise_scenes[:1], 1.5)
    with pytest.raises(ValueError):
        inject_noise(noise_scenes[:1], 0.5, target="lidar")


def test_noise_never_moves_futures_or_current_position(noise_scenes):
    out = inject_noise(noise_scenes[:20], 1.0, seed=1)
    for a, b in zip(noise_scenes, out):
        for ta, tb in zip(a.agents, b.agents):
            assert np.array_equal(ta.future_positions, tb.future_positions)
            assert np.array_equal(ta.current_position, tb.current_position)
        assert np.array_equal(a.graph.node_positions, b.graph.node_positions)


@pytest.mark.parametrize("p", [0.25, 0.5])
def test_selection_fraction_within_binomial_ci(noise_scenes, p):
    out = inject_noise(noise_scenes, p, seed=7)
    agents_hit = agents_total = nodes_hit = nodes_total = 0
    for a, b in zip(noise_scenes, out):
        for ta, tb in zip(a.agents, b.agents):
            agents_total += 1
            agents_hit += not np.array_equal(ta.past_positions, tb.past_positions)
        moved = (a.graph.node_features != b.graph.node_features).any(axis=1)
        nodes_hit += int(moved.sum())
        nodes_total += a.graph.num_nodes
    assert binomtest(agents_hit, agents_total, p).pvalue > 1e-3
    assert binomtest(nodes_hit, nodes_total, p).pvalue > 1e-3


def test_component_variance_matches_sigma2(noise_scenes):
    samples = []
    seed = 0
    while sum(x.size for x in samples) < 100_000:
        out = inject_noise(noise_scenes[:40], 1.0, seed=seed)
        seed += 1
        for a, b in zip(noise_scenes, out):
            for ta, tb in zip(a.agents, b.agents):
                d = tb.past_displacements - ta.past_displacements
                samples.append(d[ta.observed_mask].ravel())
            samples.append((b.graph.node_features - a.graph.node_features)[:, FEAT_DIR].ravel())
    x = np.concatenate(samples)
    n = x.size
    var = x.var(ddof=1)
    lo, hi = chi2.ppf([0.0005, 0.9995], n - 1) * 0.2 / (n - 1)
    assert lo <= var <= hi, (var, lo, hi)
    assert abs(x.mean()) < 4 * math.sqrt(0.2 / n)


@pytest.mark.parametrize("target", ["agents", "map"])
def test_noise_target_restricts_entities(noise_scenes, target):
    out = inject_noise(noise_scenes[:10], 1.0, seed=2, target=target)
    for a, b in zip(noise_scenes, out):
        agents_same = all(np.array_equal(x.past_positions, y.past_positions) for x, y in zip(a.agents, b.agents))
        map_same = np.array_equal(a.graph.node_features, b.graph.node_features)
        assert agents_same == (target == "map")
        assert map_same == (target == "agents")


# -------------------------------------------------------------------- suite


@pytest.fixture(scope="module")
def suite_data():
    train, val = gen_dataset(WorldConfig(seed=41, n_scenes=120, region_mix={"A": 1.0, "B": 1.0}))
    return train, val


def tiny_model(seed):
    return ForecastModel(ModelConfig(hidden_dim=8, dilations=(1, 2), seed=seed))


def test_fraction_one_is_plain_training_set(suite_data):
    train, val = suite_data
    assert training_set(train, "data-25", fraction=1.0) == list(train)
    model = tiny_model(0)
    a = evaluate_model(model, eval_set(val, "data-25"))
    b = evaluate_model(model, val)
    assert a == b


def test_zero_noise_settings_equal_clean_metrics(suite_data):
    _, val = suite_data
    model = tiny_model(0)
    clean = evaluate_model(model, val)
    for name in ("noise-0.25", "noise-0.5"):
        assert evaluate_model(model, eval_set(val, name, noise_levels=(0.0, 0.0))) == clean


def test_recipes_and_filters(suite_data):
    train, val = suite_data
    quarter = training_set(train, "data-25", seed=0)
    assert len(quarter) == round(0.25 * len(train))
    cross = training_set(train, "cross-region")
    n_b = sum(s.tags["region"] == "B" for s in train)
    assert sum(s.tags["region"] == "B" for s in cross) == round(0.2 * n_b)
    biased = training_set(train, "straight-biased")
    n_m = sum(s.tags["maneuver"] == "maintain-speed" for s in train)
    assert len(biased) == len(train) + n_m
    assert all(s.tags["region"] == "B" for s in eval_set(val, "cross-region"))
    assert all(s.tags["maneuver"] in ("turn-left", "turn-right") for s in eval_set(val, "straight-biased"))
    assert all(s.tags["maneuver"] in ("turn-left", "turn-right", "lane-change")
               for s in eval_set(val, "lane-change-turn"))


def test_missing_tags_are_listed(suite_data):
    _, val = suite_data
    bare = [Scene(s.graph, s.agents, s.focus_agent, s.frame, {}) for s in val]
    with pytest.raises(MissingTagsError, match="maneuver"):
        eval_set(bare, "straight-biased")
    with pytest.raises(MissingTagsError, match="region"):
        training_set(bare, "cross-region")


def test_suite_emits_six_settings_for_two_models(suite_data, tmp_path):
    train, val = suite_data
    variants = {"baseline": lambda scenes, recipe: tiny_model(1), "mask": lambda scenes, recipe: tiny_model(2)}
    models = train_suite_models(train, variants)
    assert set(models) == set(RECIPES)
    rows = generalization_suite(models, val)
    assert len(rows) == 12
    assert [r["setting"] for r in rows[::2]] == [s.name for s in SETTINGS]
    for r in rows:
        assert r["minFDE6"] <= r["minFDE1"] + 1e-12
        assert 0 <= r["MR6"] <= 1
    write_rows_csv(tmp_path / "suite.csv", rows)
    assert len((tmp_path / "suite.csv").read_text().splitlines()) == 13
    table = format_table(rows)
    assert table.splitlines()[0].startswith("setting")
    assert len(table.splitlines()) == 14
