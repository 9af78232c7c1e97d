import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distfilt.errors import DimensionMismatch, IndexOutOfRange
from distfilt.models import (
    LinearModel,
    NoiseModel,
    ParticleInBoxModel,
    Regressors,
    TanhRegressionModel,
    evolve,
    jacobian_f,
    jacobian_h,
    layered_masks,
    neighbourhood_coverage,
    observe,
    reflect_into_box,
    round_robin_masks,
    sample_noise,
    support_masks,
    write_masks_csv,
)
from distfilt.network import path_topology


def central_difference(fun, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        cols.append((fun(x + e) - fun(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def box_model(n=3):
    axis = np.zeros(n, dtype=int)
    axis[-1] = 1
    return ParticleInBoxModel(axis)


def tanh_model(n=4, d=5, active=2):
    return TanhRegressionModel(round_robin_masks(n, d, active))


def test_tanh_evolution_is_identity():
    m = tanh_model()
    x = np.array([0.3, -1.0, 2.0, 0.0, 5.0])
    assert np.array_equal(evolve(m, x, np.zeros(5)), x)
    assert np.array_equal(jacobian_f(m, x), np.eye(5))


def test_box_interior_step():
    m = box_model()
    out = evolve(m, [0.0, 1.0, 0.0, 1.0], np.zeros(4))
    assert np.allclose(out, [0.04, 1.0, 0.04, 1.0])


def test_box_wall_reflection():
    m = box_model()
    # 9.99 + 0.04 * 1 = 10.03 folds to 9.97 with the velocity reversed
    out = evolve(m, [9.99, 1.0, 0.0, 0.0])
    assert out[0] == pytest.approx(9.97)
    assert out[1] == pytest.approx(-1.0)
    assert m.is_nonsmooth(np.array([9.99, 1.0, 0.0, 0.0]))


def test_reflect_into_box_oracle():
    # repeated elastic bounces traced by hand
    pos, sign = reflect_into_box(np.array([10.5, 31.0, -10.5, 45.0]), 10.0)
    assert np.allclose(pos, [9.5, -9.0, -9.5, 5.0])
    assert np.array_equal(sign, [-1.0, 1.0, -1.0, 1.0])


def test_box_jacobian_is_constant_velocity_block():
    m = box_model()
    block = np.array([[1.0, 0.04], [0.0, 1.0]])
    A = jacobian_f(m, [1.0, 2.0, -3.0, 0.5])
    assert np.allclose(A[:2, :2], block)
    assert np.allclose(A[2:, 2:], block)
    assert np.allclose(A[:2, 2:], 0.0)


def test_tanh_observation_examples():
    m = TanhRegressionModel(np.ones((1, 1), dtype=bool))
    ctx = Regressors(np.ones((1, 1, 1)))
    assert observe(m, 0, [0.0], [0.0], ctx)[0] == 0.0
    assert observe(m, 0, [0.5], [0.0], ctx)[0] == pytest.approx(0.4621171573, abs=1e-10)


def test_box_observation_selects_axis():
    m = box_model()
    assert observe(m, 0, [3.0, 0.0, -2.0, 0.0], [0.0])[0] == 3.0
    assert observe(m, 2, [3.0, 0.0, -2.0, 0.0], [0.0])[0] == -2.0
    H = jacobian_h(m, 0, np.zeros(4))
    assert np.array_equal(H, [[1.0, 0.0, 0.0, 0.0]])


def test_observe_errors():
    m = box_model()
    with pytest.raises(IndexOutOfRange):
        observe(m, 7, np.zeros(4))
    with pytest.raises(DimensionMismatch):
        observe(m, 0, np.zeros(3))
    with pytest.raises(DimensionMismatch):
        evolve(m, np.zeros(4), np.zeros(2))


def test_tanh_jacobian_at_origin_is_regressor(rng):
    m = tanh_model()
    ctx = m.draw_context(rng)
    H = jacobian_h(m, 1, np.zeros(5), ctx)
    assert np.array_equal(H, ctx.Z[1])


def test_tanh_jacobian_closed_form(rng):
    m = tanh_model()
    ctx = m.draw_context(rng)
    x = rng.standard_normal(5)
    for i in range(m.num_agents):
        Z = ctx.Z[i]
        expected = np.diag(1.0 - np.tanh(Z @ x) ** 2) @ Z
        assert np.allclose(jacobian_h(m, i, x, ctx), expected, atol=1e-14)


def test_jacobians_match_finite_differences(rng):
    tanh = tanh_model()
    box = box_model()
    for _ in range(100):
        ctx = tanh.draw_context(rng)
        x = rng.standard_normal(5)
        for i in range(tanh.num_agents):
            fd = central_difference(lambda z: observe(tanh, i, z, context=ctx), x)
            assert np.max(np.abs(fd - jacobian_h(tanh, i, x, ctx))) < 1e-5
        xb = np.array([rng.uniform(-9, 9), rng.normal(), rng.uniform(-9, 9), rng.normal()])
        fd = central_difference(lambda z: evolve(box, z), xb)
        assert np.max(np.abs(fd - jacobian_f(box, xb))) < 1e-5
        for i in range(box.num_agents):
            fd = central_difference(lambda z: observe(box, i, z), xb)
            assert np.max(np.abs(fd - jacobian_h(box, i, xb))) < 1e-5


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-6 * 0.2, 6 * 0.2), min_size=4, max_size=4),
)
def test_box_evolution_stays_in_box(pos, vel, v):
    m = box_model()
    x = np.array([pos[0], vel[0], pos[1], vel[1]])
    out = evolve(m, x, np.array(v))
    assert np.all(np.abs(out[[0, 2]]) <= 10.0 + 1e-12)


def test_zero_process_noise_draws_zero(rng):
    noise = NoiseModel(np.zeros((2, 2)), np.ones((3, 1, 1)))
    m = LinearModel(np.eye(2), np.ones((1, 2)), noise)
    for _ in range(5):
        v, w = sample_noise(m, rng)
        assert np.array_equal(v, np.zeros(2))
        assert w.shape == (3, 1)


def test_box_noise_covariance(rng):
    m = box_model()
    draws = [sample_noise(m, rng) for _ in range(100_000)]
    V = np.array([d[0] for d in draws])
    W = np.array([d[1][:, 0] for d in draws])
    cov = np.cov(V.T)
    assert np.allclose(np.diag(cov), 0.04, rtol=0.05)
    assert np.allclose(np.var(W, axis=0), 0.16, rtol=0.05)
    # cross-covariance between evolution and observation noise
    n = len(V)
    cross = (V - V.mean(0)).T @ (W - W.mean(0)) / n
    se = math.sqrt(0.04 * 0.16 / n)
    assert np.max(np.abs(cross)) < 3 * se


def test_noise_is_deterministic_per_seed():
    m = box_model()
    a = [sample_noise(m, np.random.default_rng(5)) for _ in range(1)]
    b = [sample_noise(m, np.random.default_rng(5)) for _ in range(1)]
    assert np.array_equal(a[0][0], b[0][0]) and np.array_equal(a[0][1], b[0][1])


def test_covariances_must_be_symmetric():
    with pytest.raises(ValueError):
        NoiseModel(np.array([[1.0, 0.5], [0.0, 1.0]]), np.ones((1, 1, 1)))


def test_layered_masks_cover_state_but_no_neighbourhood(sm7):
    masks = layered_masks(sm7, 5, 2)
    assert masks.sum(axis=1).tolist() == [2] * 120
    assert masks.any(axis=0).all()
    assert neighbourhood_coverage(sm7, masks).max() < 5


def test_support_masks_dispatch():
    t = path_topology(6)
    assert np.array_equal(support_masks("round_robin", t, 5, 2), round_robin_masks(6, 5, 2))
    with pytest.raises(ValueError):
        support_masks("nope", t, 5, 2)


def test_tanh_regressors_respect_masks(rng):
    m = tanh_model()
    ctx = m.draw_context(rng)
    assert np.all(ctx.Z[:, 0, :][~m.support_masks] == 0.0)


def test_masks_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_masks_csv(round_robin_masks(3, 4, 2), p)
    lines = p.read_text().splitlines()
    assert lines[0] == "agent,x0,x1,x2,x3"
    assert lines[1] == "0,1,1,0,0"
