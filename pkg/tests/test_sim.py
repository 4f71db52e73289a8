import math

import numpy as np
import pytest

from dekf import EntityId, Family, GLMSignal, MFSignal, config, sim
from dekf.errors import ConfigError
from dekf.sim import AdaGrad, MetricSeries


def _small(name, **kw):
    return config.builtin(name).replace(**{"n_sims": 2, "horizon": 200, **kw})


@pytest.mark.parametrize("name", ["regression", "mf", "tf"])
def test_stream_bitwise_reproducible(name):
    cfg = _small(name)
    a, _ = sim.generate_stream(cfg, 0)
    b, _ = sim.generate_stream(cfg, 0)
    c, _ = sim.generate_stream(cfg, 1)
    assert [(i.t, i.y, i.p_true) for i in a] == [(i.t, i.y, i.p_true) for i in b]
    assert [i.p_true for i in a] != [i.p_true for i in c]


def test_stream_matches_truth():
    cfg = _small("mf")
    items, world = sim.generate_stream(cfg, 0)
    assert [i.t for i in items] == list(range(1, 201))
    assert all(i.y in (0.0, 1.0) for i in items)
    assert items[-1].p_true == pytest.approx(world.mean(items[-1].ctx), abs=0)


def test_bernoulli_observation_frequency():
    cfg = _small("mf")
    world = sim.SimulatedWorld(cfg, sim.replica_streams(0, 0))
    eta = 0.7
    p = 1.0 / (1.0 + math.exp(-eta))
    n = 100_000
    ys = np.array([world.observe(p) for _ in range(n)])
    assert abs(ys.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_static_world_does_not_move():
    cfg = _small("tf", dynamic=False)
    world = sim.SimulatedWorld(cfg, sim.replica_streams(0, 0))
    before = {k: v.copy() for k, v in world.current.items()}
    for _ in range(50):
        world.advance()
    for k in before:
        assert np.array_equal(before[k], world.current[k])


def test_dynamic_world_keeps_steady_state_variance():
    cfg = _small("regression")
    world = sim.SimulatedWorld(cfg, sim.replica_streams(3, 0))
    p = world.priors[0]
    dev = []
    for _ in range(20000):
        world.advance()
        dev.append(world.current["weights"][0] - world.reference["weights"][0])
    dev = np.array(dev)
    # successive draws are correlated; half-life 500 leaves ~14 independent blocks per coordinate
    assert np.var(dev) == pytest.approx(p.steady_scale, rel=0.3)


def test_priors_use_configured_constants():
    cfg = config.builtin("mf")
    priors = sim.draw_priors(cfg, np.random.default_rng(0))
    for p, ns in zip(priors, cfg.namespaces):
        assert np.trace(p.Pi) == pytest.approx(ns.Pi_trace)
        assert np.all(p.Pi > 0)
        assert p.alpha == math.exp(math.log(0.5) / ns.half_life_steps)
        np.testing.assert_allclose(p.omega, (1 - p.alpha ** 2) * ns.omega_scale * np.eye(5))
        assert np.abs(p.pi - ns.pi).max() < 10 * cfg.prior_perturbation * abs(ns.pi)


def test_model_dynamics_variants():
    priors = sim.draw_priors(config.builtin("tf"), np.random.default_rng(0))
    eid = EntityId("mode1", 0)
    full = sim.model_dynamics(priors, "dekf", True)[eid]
    noref = sim.model_dynamics(priors, "dekf_noref", True)[eid]
    static = sim.model_dynamics(priors, "static", True)[eid]
    frozen = sim.model_dynamics(priors, "dekf", False)[eid]
    assert full.use_reference and not full.static
    assert not noref.use_reference
    assert static.static and frozen.static


def test_fm_not_simulated():
    cfg = config.builtin("mf").replace(model="fm", fm_dims=[1, 2], namespaces=config.builtin("mf").namespaces)
    with pytest.raises(ConfigError):
        sim.SimulatedWorld(cfg, sim.replica_streams(0, 0))


def test_cumulative_average_exact():
    rng = np.random.default_rng(0)
    s = MetricSeries("x", "estimation", rng.random((3, 50)), rng.random((3, 50)))
    for r in range(3):
        for t in range(1, 51):
            ref = sum(abs(s.p_true[r, i] - s.p_pred[r, i]) for i in range(t)) / t
            assert s.cumulative_error[r, t - 1] == pytest.approx(ref, rel=1e-14)


def test_run_estimation_records_prediction_before_update():
    cfg = _small("regression", n_sims=1, methods=["dekf"])
    series = sim.run_estimation(cfg)["dekf"]
    items, world = sim.generate_stream(cfg, 0)
    np.testing.assert_array_equal(series.p_true[0], [i.p_true for i in items])
    # the first prediction is made from the prior mean alone
    lam = world.priors[0].pi[0] @ items[0].ctx
    assert series.p_pred[0, 0] == pytest.approx(1 / (1 + math.exp(-lam)), rel=1e-12)


def test_gaussian_static_error_non_increasing():
    cfg = config.builtin("regression").replace(
        family="gaussian", link="identity", dynamic=False, n_sims=20, horizon=1000, methods=["dekf"])
    m = sim.run_estimation(cfg)["dekf"].cumulative_error.mean(axis=0)
    assert np.all(np.diff(m[100:]) <= 0)


def test_adagrad_tuning_picks_lowest_error():
    cfg = _small("regression", methods=["adagrad"], dynamic=False)
    s = sim.run_estimation(cfg, tune_adagrad=True)["adagrad"]
    grid = s.meta["grid"]
    assert set(grid) == set(cfg.adagrad_lr_grid)
    assert s.meta["lr"] == min(grid, key=grid.get)


def test_adagrad_zero_gradient_does_not_move():
    eid = EntityId("w", 0)
    opt = AdaGrad(GLMSignal([(eid, 3)]), Family.gaussian(1.0), "identity", {eid: np.array([0.5, -1.0, 2.0])})
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.standard_normal(3)
        opt.step(opt.predict(x), x)
    np.testing.assert_array_equal(opt.params[eid], [0.5, -1.0, 2.0])


def test_adagrad_touches_only_involved():
    u0, u1, v0 = EntityId("user", 0), EntityId("user", 1), EntityId("item", 0)
    init = {u0: np.ones(2), u1: np.ones(2), v0: np.ones(2)}
    opt = AdaGrad(MFSignal(2), Family.bernoulli(), "canonical", init)
    opt.step([1.0], (u1, v0))
    opt.step([0.0], (u0, v0))
    opt.step([1.0], (u0, v0))
    np.testing.assert_array_equal(opt.params[u0] == 1.0, [False, False])
    before = opt.params[u1].copy()
    opt.step([0.0], (u0, v0))
    np.testing.assert_array_equal(opt.params[u1], before)


def test_adagrad_reaches_batch_optimum():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 2))
    y = (rng.random(12) < 1 / (1 + np.exp(-X @ np.array([0.7, -0.4])))).astype(float)
    # batch maximum likelihood by plain gradient ascent
    b = np.zeros(2)
    for _ in range(100_000):
        g = X.T @ (y - 1 / (1 + np.exp(-X @ b)))
        if np.abs(g).max() < 1e-12:
            break
        b += 0.5 * g
    eid = EntityId("w", 0)
    opt = AdaGrad(GLMSignal([(eid, 2)]), Family.bernoulli(), "canonical", {eid: np.zeros(2)}, lr=0.1)
    for _ in range(5000):
        for i in range(12):
            opt.step([y[i]], X[i])
    assert np.abs(opt.params[eid] - b).max() < 1e-3


def test_random_policy_normalized_regret_near_one():
    cfg = config.builtin("tf").replace(dynamic=False, n_sims=10, horizon=5000)
    s = sim.run_bandit(cfg, ["random"])["random"]
    assert abs(s.final_mean() - 1.0) < 0.05


def test_bandit_candidates_and_regret_bounds():
    cfg = _small("mf", horizon=100)
    s = sim.run_bandit(cfg, ["greedy"])["greedy"]
    assert s.regret.shape == (2, 100)
    assert np.all(s.regret >= 0) and np.all(s.random_regret >= 0)
    assert s.meta["candidates"] == sim.CANDIDATE_RULES["mf"]


def test_candidate_set_shapes():
    for name, n in [("mf", 10), ("tf", 4), ("regression", 10)]:
        cfg = _small(name)
        world = sim.SimulatedWorld(cfg, sim.replica_streams(0, 0))
        world.advance()
        cs = world.candidate_set()
        assert len(cs) == n
        assert np.all((cs.true_probs > 0) & (cs.true_probs < 1))


def test_csv_deterministic_and_round_trip_precision(tmp_path):
    cfg = _small("tf", methods=["dekf", "dekf_noref"])
    paths = []
    for run in range(2):
        s = sim.run_estimation(cfg)["dekf"]
        p = tmp_path / f"run{run}.csv"
        sim.write_csv(s, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "t,mean_abs_error,cum_avg_abs_error,cum_avg_abs_error_stderr"
    assert len(lines) == 201
    col = np.array([float(ln.split(",")[2]) for ln in lines[1:]])
    np.testing.assert_array_equal(col, s.cumulative_error.mean(axis=0))


def test_parallel_replicas_match_serial():
    cfg = _small("tf", horizon=50, n_sims=3, methods=["dekf"])
    a = sim.run_estimation(cfg, jobs=1)["dekf"]
    b = sim.run_estimation(cfg, jobs=2)["dekf"]
    np.testing.assert_array_equal(a.p_pred, b.p_pred)


def test_methods_see_the_same_world():
    cfg = _small("mf", methods=["dekf", "static"])
    s = sim.run_estimation(cfg)
    np.testing.assert_array_equal(s["dekf"].p_true, s["static"].p_true)
    assert not np.array_equal(s["dekf"].p_pred, s["static"].p_pred)
