import numpy as np
import pytest

from dekf.errors import DimensionMismatch, DuplicateMode, OrderUnsupported
from dekf.signal import BIAS_ID, EntityId, FMSignal, GLMSignal, MFSignal, TFSignal, elementary_symmetric
from oracles import central_diff, fm_signal_bruteforce, grad_close, tf_signal_bruteforce


def fd_grads(model, params, ctx, h=1e-5):
    """Central-difference gradient of the (scalar) signal for each entity."""
    out = {}
    for eid in model.involved(ctx):
        def f(v, eid=eid):
            p = dict(params)
            p[eid] = v
            return model.signal(p, ctx)[0]
        out[eid] = central_diff(f, params[eid], h=h)
    return out


def assert_grads_match_fd(model, params, ctx):
    ev = model.evaluate(params, ctx)
    fd = fd_grads(model, params, ctx)
    assert set(ev.grads) == set(fd) == set(ev.involved)
    for eid in ev.involved:
        assert grad_close(ev.grads[eid][0], fd[eid], rel=1e-5, abs_floor=1e-8), eid


def test_entity_id_text_round_trip():
    eid = EntityId("mode3", 7)
    assert str(eid) == "mode3:7"
    assert EntityId.parse("mode3:7") == eid
    with pytest.raises(ValueError):
        EntityId.parse("nonamespace")


# GLM

def test_glm_unit_vector():
    model = GLMSignal([(("w", 0), 4)])
    x = np.array([1.0, 0, 0, 0])
    ev = model.evaluate({EntityId("w", 0): np.array([3.0, 1.0, -2.0, 5.0])}, x)
    assert ev.lam[0] == 3.0
    np.testing.assert_array_equal(ev.grads[EntityId("w", 0)], x[None, :])


def test_glm_dot_product(rng):
    model = GLMSignal([(("w", 0), 10)])
    x = rng.standard_normal(10)
    th = rng.standard_normal(10)
    lam = model.signal({EntityId("w", 0): th}, x)[0]
    assert abs(lam - float(np.dot(x, th))) < 1e-12


def test_glm_zero_block_not_involved(rng):
    model = GLMSignal([(("a", 0), 2), (("b", 0), 3)])
    x = np.array([0.5, -1.0, 0.0, 0.0, 0.0])
    assert model.involved(x) == [EntityId("a", 0)]
    ev = model.evaluate({EntityId("a", 0): np.ones(2)}, x)
    assert ev.involved == [EntityId("a", 0)]


def test_glm_block_context_and_multivariate(rng):
    model = GLMSignal([(("a", 0), 2), (("b", 0), 3)], d=2)
    Xa = rng.standard_normal((2, 2))
    Xb = rng.standard_normal((3, 2))
    params = {EntityId("a", 0): rng.standard_normal(2), EntityId("b", 0): rng.standard_normal(3)}
    dense = model.evaluate(params, np.vstack([Xa, Xb]))
    blocks = model.evaluate(params, {("a", 0): Xa, ("b", 0): Xb})
    np.testing.assert_allclose(dense.lam, blocks.lam, rtol=1e-15)
    np.testing.assert_allclose(dense.lam, Xa.T @ params[EntityId("a", 0)] + Xb.T @ params[EntityId("b", 0)])
    np.testing.assert_array_equal(dense.grads[EntityId("b", 0)], Xb.T)


def test_glm_dimension_mismatch():
    model = GLMSignal([(("w", 0), 3)])
    with pytest.raises(DimensionMismatch):
        model.evaluate({EntityId("w", 0): np.ones(3)}, np.ones(4))
    with pytest.raises(DimensionMismatch):
        model.evaluate({EntityId("w", 0): np.ones(2)}, np.ones(3))


def test_glm_gradients_fd(rng):
    model = GLMSignal([(("a", 0), 3), (("b", 0), 4)])
    params = {EntityId("a", 0): rng.standard_normal(3), EntityId("b", 0): rng.standard_normal(4)}
    assert_grads_match_fd(model, params, rng.standard_normal(7))


# MF

U, V = EntityId("user", 0), EntityId("item", 0)


def test_mf_zero_vectors():
    ev = MFSignal(2).evaluate({U: np.zeros(2), V: np.zeros(2)}, (U, V))
    assert ev.lam[0] == 0.0
    assert not ev.grads[U].any() and not ev.grads[V].any()


def test_mf_hand_example():
    ev = MFSignal(2).evaluate({U: np.array([1.0, 2.0]), V: np.array([3.0, -1.0])}, (U, V))
    assert ev.lam[0] == 1.0
    np.testing.assert_array_equal(ev.grads[U], [[3.0, -1.0]])
    np.testing.assert_array_equal(ev.grads[V], [[1.0, 2.0]])
    assert ev.involved == [U, V]


def test_mf_gradients_fd(rng):
    params = {U: rng.standard_normal(5), V: rng.standard_normal(5)}
    ev = MFSignal(5).evaluate(params, (U, V))
    fd = fd_grads(MFSignal(5), params, (U, V))
    for eid in (U, V):
        rel = np.max(np.abs(ev.grads[eid][0] - fd[eid]) / np.abs(fd[eid]))
        assert rel < 1e-6


def test_mf_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        MFSignal(3).evaluate({U: np.ones(3), V: np.ones(2)}, (U, V))


def test_mf_uninvolved_perturbation_changes_nothing(rng):
    other = EntityId("item", 5)
    params = {U: rng.standard_normal(3), V: rng.standard_normal(3), other: rng.standard_normal(3)}
    before = MFSignal(3).signal(params, (U, V))
    params[other] = params[other] + 10.0
    assert MFSignal(3).signal(params, (U, V))[0] == before[0]


# TF

def test_tf_q2_equals_mf(rng):
    params = {U: rng.standard_normal(4), V: rng.standard_normal(4)}
    tf = TFSignal(4).evaluate(params, (U, V))
    mf = MFSignal(4).evaluate(params, (U, V))
    np.testing.assert_array_equal(tf.lam, mf.lam)
    for eid in (U, V):
        np.testing.assert_array_equal(tf.grads[eid], mf.grads[eid])


def test_tf_hand_example():
    ids = [EntityId(f"mode{i}", 0) for i in range(3)]
    params = dict(zip(ids, [np.array([2.0]), np.array([3.0]), np.array([4.0])]))
    ev = TFSignal(1).evaluate(params, ids)
    assert ev.lam[0] == 24.0
    assert [ev.grads[e][0, 0] for e in ids] == [12.0, 8.0, 6.0]


def test_tf_q4_fd_and_bruteforce(rng):
    ids = [EntityId(f"mode{i}", i) for i in range(4)]
    params = {e: rng.standard_normal(3) for e in ids}
    model = TFSignal(3, modes=[e.namespace for e in ids])
    ev = model.evaluate(params, ids)
    assert abs(ev.lam[0] - tf_signal_bruteforce([params[e] for e in ids])) < 1e-12
    fd = fd_grads(model, params, ids)
    for e in ids:
        rel = np.max(np.abs(ev.grads[e][0] - fd[e]) / np.abs(fd[e]))
        assert rel < 1e-6


def test_tf_duplicate_mode():
    with pytest.raises(DuplicateMode):
        TFSignal(2).involved([EntityId("m", 0), EntityId("m", 1)])


def test_tf_dimension_mismatch():
    ids = [EntityId("a", 0), EntityId("b", 0)]
    with pytest.raises(DimensionMismatch):
        TFSignal(2).evaluate({ids[0]: np.ones(2), ids[1]: np.ones(3)}, ids)


# FM

def test_elementary_symmetric_small():
    z = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_allclose(elementary_symmetric(z, 3)[:, 0], [1.0, 6.0, 11.0, 6.0])


def test_fm_order1_is_glm(rng):
    ids = [EntityId("f", i) for i in range(5)]
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    w0 = rng.standard_normal()
    params = {e: np.array([wi]) for e, wi in zip(ids, w)}
    params[BIAS_ID] = np.array([w0])
    fm = FMSignal([1]).signal(params, list(zip(ids, x)))[0]
    glm = GLMSignal([(BIAS_ID, 1)] + [(e, 1) for e in ids]).signal(params, np.concatenate([[1.0], x]))[0]
    assert abs(fm - glm) < 1e-12


def test_fm_order2_equals_mf_plus_biases(rng):
    u, v = EntityId("user", 1), EntityId("item", 2)
    pu, pv = rng.standard_normal(4), rng.standard_normal(4)
    w0 = rng.standard_normal(1)
    lam = FMSignal([1, 3]).signal({BIAS_ID: w0, u: pu, v: pv}, [(u, 1.0), (v, 1.0)])[0]
    mf = MFSignal(3).signal({u: pu[1:], v: pv[1:]}, (u, v))[0]
    # first-order terms are accumulated together before joining the bias
    assert lam == w0[0] + (pu[0] + pv[0]) + mf


def test_fm_order2_gradient_simplified_form(rng):
    ids = [EntityId("f", i) for i in range(4)]
    x = rng.standard_normal(4)
    params = {e: rng.standard_normal(4) for e in ids}
    params[BIAS_ID] = np.zeros(1)
    ev = FMSignal([1, 3]).evaluate(params, list(zip(ids, x)))
    for i, e in enumerate(ids):
        expected_v = x[i] * sum(x[j] * params[ids[j]][1:] for j in range(4) if j != i)
        np.testing.assert_allclose(ev.grads[e][0, 1:], expected_v, rtol=1e-12, atol=1e-14)
        assert ev.grads[e][0, 0] == x[i]


@pytest.mark.parametrize("dims", [[1, 2, 3], [1, 3, 2, 2]])
def test_fm_higher_order_bruteforce_and_fd(rng, dims):
    ids = [EntityId("f", i) for i in range(4)] + [EntityId("g", 0)]
    x = rng.uniform(0.5, 1.5, size=len(ids)) * rng.choice([-1, 1], size=len(ids))
    model = FMSignal(dims)
    params = {e: rng.standard_normal(model.a) for e in ids}
    params[BIAS_ID] = rng.standard_normal(1)
    ctx = list(zip(ids, x))
    ev = model.evaluate(params, ctx)
    oracle = fm_signal_bruteforce(dims, params, ctx)
    assert abs(ev.lam[0] - oracle) <= 1e-6 * abs(oracle)
    assert ev.involved[0] == BIAS_ID
    np.testing.assert_array_equal(ev.grads[BIAS_ID], [[1.0]])
    assert_grads_match_fd(model, params, ctx)


def test_fm_zero_x_dropped():
    e1, e2 = EntityId("f", 1), EntityId("f", 2)
    assert FMSignal([1, 2]).involved([(e1, 1.0), (e2, 0.0)]) == [BIAS_ID, e1]


def test_fm_errors():
    with pytest.raises(OrderUnsupported):
        FMSignal([])
    with pytest.raises(DimensionMismatch):
        FMSignal([2, 2])
    e = EntityId("f", 0)
    with pytest.raises(DimensionMismatch):
        FMSignal([1, 2]).involved([(e, 1.0), (e, 2.0)])
