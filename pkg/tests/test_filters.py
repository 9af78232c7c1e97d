import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distfilt import kernels
from distfilt.errors import DimensionMismatch, InconsistentPrior
from distfilt.filters import (
    AgentState,
    CentralizedState,
    GainRule,
    NetworkState,
    centralized_step,
    distributed_local_step,
    federated_step,
    fuse,
    masked_local_step,
    network_local_step,
    run_distributed,
    stationary_kalman_gain,
)
from distfilt.models import LinearModel, NoiseModel, ParticleInBoxModel, Regressors, TanhRegressionModel
from distfilt.network import (
    complete_topology,
    metropolis_weights,
    random_connected_topology,
    uniform_weights,
)


def scalar_model(a=0.9, q=0.01, r=0.1, n=1):
    noise = NoiseModel(np.array([[q]]), np.full((n, 1, 1), r))
    return LinearModel([[a]], [[1.0]], noise)


def random_linear(rng, n, d, m):
    F = rng.standard_normal((d, d)) / np.sqrt(d)
    H = rng.standard_normal((n, m, d))
    noise = NoiseModel(np.eye(d) * rng.uniform(0.01, 1.0), np.tile(np.eye(m) * rng.uniform(0.1, 1.0), (n, 1, 1)))
    return LinearModel(F, H, noise)


def riccati_fixed_point(a, q, r, iters=10_000):
    """Scalar predicted-variance iteration p <- a^2 p r / (p + r) + q."""
    p = 1.0
    for _ in range(iters):
        p = a * a * p * r / (p + r) + q
    return p / (p + r)


def test_gradient_step_size_range():
    with pytest.raises(ValueError):
        GainRule.gradient(1.0)
    with pytest.raises(ValueError):
        GainRule.gradient(0.0)
    with pytest.raises(ValueError):
        GainRule("newton")


def test_full_gain_passthrough():
    m = LinearModel(np.eye(2), np.eye(2)[None], NoiseModel(np.eye(2), np.eye(2)[None]))
    s = centralized_step(CentralizedState(np.array([3.0, -1.0]), np.eye(2)), m, [0.5, 0.25],
                         GainRule.fixed(np.eye(2)))
    assert np.allclose(s.x, [0.5, 0.25])


def test_zero_gain_is_projection():
    m = scalar_model()
    s = centralized_step(CentralizedState(np.array([2.0]), np.eye(1)), m, [7.0], GainRule.fixed([[0.0]]))
    assert s.x == pytest.approx([1.8])


def test_ekf_gain_reaches_stationary_value(rng):
    m = scalar_model()
    s = CentralizedState(np.zeros(1), np.eye(1))
    for _ in range(200):
        s = centralized_step(s, m, rng.standard_normal(1), GainRule.ekf())
    k = riccati_fixed_point(0.9, 0.01, 0.1)
    assert abs(s.G[0, 0] - k) < 1e-8
    assert abs(stationary_kalman_gain([[0.9]], [[1.0]], [[0.01]], [[0.1]])[0, 0] - k) < 1e-10


@given(st.integers(0, 2**32 - 1), st.sampled_from(["ekf", "gradient"]))
def test_federated_equals_centralized(seed, kind):
    rng = np.random.default_rng(seed)
    n, d, m = int(rng.integers(1, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
    model = random_linear(rng, n, d, m)
    rule = GainRule.ekf() if kind == "ekf" else GainRule.gradient(0.05)
    x, P = rng.standard_normal(d), np.eye(d)
    central = CentralizedState(x, P)
    replicas = [CentralizedState(x.copy(), P.copy()) for _ in range(n)]
    for _ in range(10):
        y = rng.standard_normal(n * m)
        central = centralized_step(central, model, y, rule)
        fed = federated_step(replicas, model, y, rule).state
        assert np.max(np.abs(fed.x - central.x)) < 1e-10
        replicas = [CentralizedState(fed.x.copy(), fed.P.copy()) for _ in range(n)]


def test_federated_single_agent_is_centralized(rng):
    m = scalar_model()
    s = CentralizedState(np.ones(1), np.eye(1))
    a = centralized_step(s, m, [0.3], GainRule.ekf())
    b = federated_step([s], m, [0.3], GainRule.ekf())
    assert np.array_equal(a.x, b.state.x)


def test_federated_partial_participation(rng):
    n = 4
    model = random_linear(rng, n, 3, 1)
    x = rng.standard_normal(3)
    reps = [CentralizedState(x.copy(), np.eye(3)) for _ in range(n)]
    y = rng.standard_normal(n)
    part = np.array([True, False, True, False])
    zeta = 0.1
    out = federated_step(reps, model, y, GainRule.gradient(zeta), participation=part)
    xbar = model.f(x)
    # mean of the per-agent summands with zero gain for the idle agents
    terms = [xbar + (2 * zeta * model.Hs[i].T @ (y[i:i + 1] - model.Hs[i] @ xbar) if part[i] else 0.0)
             for i in range(n)]
    assert np.allclose(out.state.x, np.mean(terms, axis=0), atol=1e-14)
    assert np.allclose(out.local_estimates[1], xbar)


def test_federated_rejects_inconsistent_prior():
    m = scalar_model(n=2)
    reps = [CentralizedState(np.zeros(1), np.eye(1)), CentralizedState(np.ones(1) * 1e-6, np.eye(1))]
    with pytest.raises(InconsistentPrior):
        federated_step(reps, m, [0.0, 0.0], GainRule.ekf())


def test_zero_innovation_local_step():
    m = scalar_model()
    a = AgentState(np.array([2.0]), np.eye(1), np.ones(1, dtype=bool))
    out = distributed_local_step(a, m, 0, [1.8], GainRule.ekf())
    assert out.phi == pytest.approx([1.8])


def test_gradient_local_step_tanh_example():
    m = TanhRegressionModel(np.ones((1, 1), dtype=bool))
    a = AgentState(np.zeros(1), np.eye(1), np.ones(1, dtype=bool))
    out = distributed_local_step(a, m, 0, [0.1], GainRule.gradient(0.5), Regressors(np.ones((1, 1, 1))))
    assert out.phi == pytest.approx([0.1], abs=1e-15)


def test_local_ekf_with_stacked_observations_matches_centralized(rng):
    n = 5
    full = random_linear(rng, n, 3, 1)
    stacked = LinearModel(full.F, full.Hs.reshape(1, n, 3), NoiseModel(full.noise.sigma_v,
                                                                       full.noise.stacked_sigma_w[None]))
    x, P = rng.standard_normal(3), np.eye(3)
    c = CentralizedState(x, P)
    a = AgentState(x.copy(), P.copy(), np.ones(3, dtype=bool))
    for _ in range(20):
        y = rng.standard_normal(n)
        c = centralized_step(c, full, y, GainRule.ekf())
        a = distributed_local_step(a, stacked, 0, y, GainRule.ekf())
        a = AgentState(a.phi, a.P, a.mask)
        assert np.allclose(a.x, c.x, atol=1e-10)
        assert np.allclose(a.P, c.P, atol=1e-10)


def test_masked_step_limits(rng):
    m = random_linear(rng, 2, 3, 1)
    x = rng.standard_normal(3)
    y = rng.standard_normal(1)
    for rule in (GainRule.ekf(), GainRule.gradient(0.2)):
        full = AgentState(x, np.eye(3), np.ones(3, dtype=bool))
        assert np.array_equal(masked_local_step(full, m, 0, y, rule).phi,
                              distributed_local_step(full, m, 0, y, rule).phi)
        none = AgentState(x, np.eye(3), np.zeros(3, dtype=bool))
        assert np.allclose(masked_local_step(none, m, 0, y, rule).phi, m.f(x))


def test_masked_box_agent_projects_unobserved_axis():
    m = ParticleInBoxModel([0, 1])
    x = np.array([1.0, 0.5, -2.0, 0.3])
    a = AgentState(x, np.eye(4), m.default_masks()[0])
    out = masked_local_step(a, m, 0, [4.0], GainRule.ekf())
    proj = m.f(x)
    assert np.allclose(out.phi[2:], proj[2:])
    assert not np.allclose(out.phi[:2], proj[:2])
    ups = out.upsilon @ out.phi + out.upsilon_c @ out.phi
    assert np.array_equal(ups, out.phi)
    assert np.array_equal(out.upsilon + out.upsilon_c, np.eye(4))


def test_fuse_examples(rng):
    phis = rng.standard_normal((4, 3))
    C = uniform_weights(complete_topology(4))
    assert np.allclose(fuse(phis, C), np.tile(phis.mean(0), (4, 1)))
    assert np.array_equal(fuse(phis, np.eye(4)), phis)
    agents = [AgentState(np.zeros(3), np.eye(3), np.ones(3, bool), phi=p) for p in phis]
    fused = fuse(agents, C)
    assert np.allclose(fused[2].x, phis.mean(0))


@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_fuse_preserves_consensus(n, seed):
    rng = np.random.default_rng(seed)
    C = metropolis_weights(random_connected_topology(n, rng))
    phi = rng.standard_normal(3)
    out = fuse(np.tile(phi, (n, 1)), C)
    assert np.allclose(out, phi, rtol=0, atol=1e-12 * max(1.0, np.abs(phi).max()))


def test_horizon_one_zero_noise_perfect_prior():
    noise = NoiseModel(np.zeros((2, 2)), np.zeros((3, 1, 1)))
    m = LinearModel(np.eye(2), np.array([[1.0, 0.0]]), noise, prior_cov=np.zeros((2, 2)))
    C = uniform_weights(complete_topology(3))
    tr = run_distributed(m, C, GainRule.gradient(0.1), m.default_masks(), 1, np.random.default_rng(0))
    assert np.all(tr.estimates == tr.truth[:, None, :])
    assert np.all(tr.central == tr.truth)


@pytest.mark.parametrize("kind", ["gradient", "ekf"])
def test_complete_graph_reduces_to_federated(kind):
    n = 6
    rng = np.random.default_rng(3)
    model = random_linear(rng, n, 3, 1) if kind == "ekf" else TanhRegressionModel(np.ones((n, 4), bool))
    rule = GainRule.gradient(0.1) if kind == "gradient" else GainRule.ekf()
    C = uniform_weights(complete_topology(n))
    tr = run_distributed(model, C, rule, np.ones((n, model.state_dim), bool), 50, np.random.default_rng(9))
    diff = np.abs(tr.estimates - tr.central[:, None, :]).max()
    if kind == "gradient":
        assert diff < 1e-10
    else:
        # local EKFs use only their own data, so equality needs the gradient rule
        assert np.isfinite(diff)


def test_sm7_tanh_run_is_bounded(sm7):
    from distfilt.models import layered_masks

    masks = layered_masks(sm7, 5, 2)
    m = TanhRegressionModel(masks)
    tr = run_distributed(m, metropolis_weights(sm7), GainRule.gradient(0.1), masks, 200,
                         np.random.default_rng(1))
    assert tr.diverged_at is None
    assert np.all(np.isfinite(tr.estimates))
    assert np.abs(tr.estimates).max() < 100


def test_ekf_covariances_stay_symmetric(sm7):
    axis = np.zeros(120, dtype=int)
    axis[34] = 1
    m = ParticleInBoxModel(axis)
    rng = np.random.default_rng(4)
    x0, est, P0 = m.sample_initial(rng)
    state = NetworkState(np.tile(est, (120, 1)), np.tile(P0, (120, 1, 1)), m.default_masks())
    C = metropolis_weights(sm7).to_csr()
    c = CentralizedState(est, P0)
    x = x0
    worst = 0.0
    for _ in range(300):
        v, w = m.noise.sample(rng)
        x = m.f(x, v)
        Y = m.h_batch(np.tile(x, (120, 1))) + w
        state = network_local_step(state, m, Y, GainRule.ekf())
        state.X = kernels.combine(C, state.Phi)
        c = centralized_step(c, m, Y, GainRule.ekf())
        worst = max(worst, np.abs(state.P - state.P.transpose(0, 2, 1)).max(), np.abs(c.P - c.P.T).max())
    assert worst < 1e-9


def test_backends_agree_on_runs(sm7):
    if "compiled" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    axis = np.zeros(120, dtype=int)
    axis[34] = 1
    m = ParticleInBoxModel(axis)
    C = metropolis_weights(sm7)
    a = run_distributed(m, C, GainRule.ekf(), m.default_masks(), 200, np.random.default_rng(2), backend="python")
    b = run_distributed(m, C, GainRule.ekf(), m.default_masks(), 200, np.random.default_rng(2), backend="compiled")
    assert np.allclose(a.estimates, b.estimates, atol=1e-9)


def test_runs_are_bitwise_deterministic():
    n = 5
    m = TanhRegressionModel(np.ones((n, 3), bool))
    C = metropolis_weights(random_connected_topology(n, np.random.default_rng(0)))
    a = run_distributed(m, C, GainRule.gradient(0.2), m.default_masks(), 40, np.random.default_rng(11))
    b = run_distributed(m, C, GainRule.gradient(0.2), m.default_masks(), 40, np.random.default_rng(11))
    assert np.array_equal(a.estimates, b.estimates) and np.array_equal(a.central, b.central)


def test_divergent_run_is_truncated():
    m = scalar_model(a=1.0, n=2)
    C = uniform_weights(complete_topology(2))
    # a gain of 3 makes the error recursion multiply by -2 every step
    tr = run_distributed(m, C, GainRule.fixed([[3.0]]), m.default_masks(), 200, np.random.default_rng(0))
    assert tr.diverged_at is not None
    assert np.all(np.isnan(tr.estimates[tr.diverged_at + 1:]))


def test_mask_shape_checked():
    m = scalar_model(n=2)
    with pytest.raises(DimensionMismatch):
        run_distributed(m, np.eye(2), GainRule.ekf(), np.ones((3, 1), bool), 5, np.random.default_rng(0))
