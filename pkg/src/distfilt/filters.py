"""Centralised, federated and distributed filtering recursions.

Gain rules
----------
``ekf``
    Extended-Kalman gain from a linearised Riccati recursion.
``gradient``
    Gradient-descent correction ``2 * zeta * J^T (y - h)`` on the squared
    innovation, ``J`` the observation Jacobian.  The centralised version uses
    the network-averaged cost, so its per-agent gain block is ``1/N`` of the
    local one.
``fixed``
    A constant per-agent gain; the centralised gain is again ``1/N`` of it.

For ``gradient`` and ``fixed`` the centralised and local gains are therefore
always matched (local = N x centralised block).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from . import kernels
from .errors import DimensionMismatch, InconsistentPrior, SingularInnovationCovariance
from .models import AgentSelector, StateSpaceModel, TanhRegressionModel

PRIOR_TOL = 1e-12


@dataclass(frozen=True)
class GainRule:
    kind: str
    zeta: float = 0.0
    gain: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ekf", "gradient", "fixed"):
            raise ValueError(f"unknown gain rule {self.kind!r}")
        if self.kind == "gradient" and not 0.0 < self.zeta < 1.0:
            raise ValueError(f"gradient step size must lie in (0, 1), got {self.zeta}")
        if self.kind == "fixed":
            if self.gain is None:
                raise ValueError("fixed gain rule needs a gain matrix")
            object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))

    @classmethod
    def ekf(cls):
        return cls("ekf")

    @classmethod
    def gradient(cls, zeta):
        return cls("gradient", zeta=float(zeta))

    @classmethod
    def fixed(cls, gain):
        return cls("fixed", gain=gain)


@dataclass
class CentralizedState:
    x: np.ndarray
    P: np.ndarray
    G: np.ndarray | None = None


@dataclass
class AgentState:
    """One agent's filter state.  ``mask`` is the diagonal of Upsilon_i."""

    x: np.ndarray
    P: np.ndarray
    mask: np.ndarray
    phi: np.ndarray | None = None
    gain: np.ndarray | None = None

    @property
    def upsilon(self) -> np.ndarray:
        return np.diag(self.mask.astype(float))

    @property
    def upsilon_c(self) -> np.ndarray:
        return np.diag((~self.mask.astype(bool)).astype(float))


def stationary_kalman_gain(A, H, Q, R):
    """Steady-state Kalman gain from the discrete algebraic Riccati equation."""
    A, H, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, H, Q, R))
    Pbar = linalg.solve_discrete_are(A.T, H.T, Q, R)
    S = H @ Pbar @ H.T + R
    return Pbar @ H.T @ np.linalg.inv(S)


def _stack_obs(y, model):
    y = np.asarray(y, dtype=float)
    n, m = model.num_agents, model.obs_dim
    if y.size != n * m:
        raise DimensionMismatch(f"expected {n * m} stacked observations, got {y.size}")
    return y.reshape(n, m)


def _solve_gain(Pbar, H, R):
    S = H @ Pbar @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        cho = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularInnovationCovariance("innovation covariance is singular") from exc
    if not np.all(np.isfinite(cho[0])):
        raise SingularInnovationCovariance("innovation covariance is singular")
    return linalg.cho_solve(cho, H @ Pbar).T


def central_gain(model, rule, xprev, P, xbar, context=None, participation=None):
    """Return (G, H_stacked, P_new) for one centralised step.

    ``participation`` is a boolean per agent; non-participants get zero gain
    columns and their observations are not used.
    """
    n, m, d = model.num_agents, model.obs_dim, model.state_dim
    H = model.H_batch(np.broadcast_to(xbar, (n, d)).copy(), context)
    Hs = H.reshape(n * m, d)
    part = np.ones(n, dtype=bool) if participation is None else np.asarray(participation, bool)
    cols = np.repeat(part, m)
    G = np.zeros((d, n * m))
    P_new = P
    if rule.kind == "ekf":
        A = model.jacobian_f(xprev)
        Pbar = A @ P @ A.T + model.noise.sigma_v
        P_new = 0.5 * (Pbar + Pbar.T)
        if cols.any():
            R = model.noise.stacked_sigma_w[np.ix_(cols, cols)]
            K = _solve_gain(Pbar, Hs[cols], R)
            G[:, cols] = K
            P_new = (np.eye(d) - K @ Hs[cols]) @ Pbar
            P_new = 0.5 * (P_new + P_new.T)
    elif rule.kind == "gradient":
        G = (2.0 * rule.zeta / n) * Hs.T
        G[:, ~cols] = 0.0
    else:
        if rule.gain.shape != (d, m):
            raise DimensionMismatch(f"fixed gain must be ({d}, {m}), got {rule.gain.shape}")
        G = np.tile(rule.gain / n, (1, n))
        G[:, ~cols] = 0.0
    return G, H, P_new


def centralized_step(state: CentralizedState, model: StateSpaceModel, y_n, rule: GainRule,
                     context=None) -> CentralizedState:
    """x_n = f(x_{n-1}) + G_n (y_n - h(f(x_{n-1}))) over stacked observations."""
    Y = _stack_obs(y_n, model)
    xbar = model.f(state.x)
    G, _, P = central_gain(model, rule, state.x, state.P, xbar, context)
    innov = Y - model.h_batch(np.broadcast_to(xbar, (model.num_agents, model.state_dim)).copy(), context)
    return CentralizedState(xbar + G @ innov.ravel(), P, G)


@dataclass
class FederatedResult:
    state: CentralizedState
    local_estimates: np.ndarray


def federated_step(replicas, model: StateSpaceModel, y, rule: GainRule, context=None,
                   participation=None) -> FederatedResult:
    """Local updates ``f(x) + N G_i (y_i - h_i(f(x)))`` averaged by a fusion centre.

    Non-participating agents contribute only the projection ``f(x)``.
    """
    ref = replicas[0]
    for r in replicas[1:]:
        if np.max(np.abs(r.x - ref.x)) > PRIOR_TOL or np.max(np.abs(r.P - ref.P)) > PRIOR_TOL:
            raise InconsistentPrior("replicas do not share the previous estimate")
    n, m = model.num_agents, model.obs_dim
    Y = _stack_obs(y, model)
    xbar = model.f(ref.x)
    G, _, P = central_gain(model, rule, ref.x, ref.P, xbar, context, participation)
    innov = Y - model.h_batch(np.broadcast_to(xbar, (n, model.state_dim)).copy(), context)
    part = np.ones(n, dtype=bool) if participation is None else np.asarray(participation, bool)
    local = np.empty((n, model.state_dim))
    for i in range(n):
        local[i] = xbar
        if part[i]:
            local[i] = xbar + n * G[:, i * m:(i + 1) * m] @ innov[i]
    fused = local.mean(axis=0)
    return FederatedResult(CentralizedState(fused, P, G), local)


def _single_context(model, agent, context):
    return AgentSelector(agent) if context is None else context.select(agent)


def _local_update(agent: AgentState, model, agent_index, y_i, rule, context, mask):
    ctx = _single_context(model, agent_index, context)
    x = np.asarray(agent.x, dtype=float)
    xbar = model.f(x)
    H = model.H_batch(xbar[None, :], ctx)
    innov = np.atleast_1d(np.asarray(y_i, dtype=float)) - model.h_batch(xbar[None, :], ctx)[0]
    if innov.shape != (model.obs_dim,):
        raise DimensionMismatch(f"observation must have {model.obs_dim} entries")
    mk = np.asarray(mask, dtype=float)[None, :]
    if rule.kind == "ekf":
        A = model.jacobian_f(x)
        Pbar = kernels.predict_covariance(A, agent.P[None], model.noise.sigma_v)
        R = model.noise.sigma_w[agent_index][None]
        phi, P, K = kernels.ekf_update(xbar[None], Pbar, H, innov[None], R, mk)
        return replace(agent, phi=phi[0], gain=K[0], P=P[0])
    if rule.kind == "gradient":
        phi, K = kernels.gradient_update(xbar[None], H, innov[None], rule.zeta, mk)
        return replace(agent, phi=phi[0], gain=K[0])
    K = rule.gain * mk[0][:, None]
    return replace(agent, phi=xbar + K @ innov, gain=K)


def distributed_local_step(agent: AgentState, model, agent_index: int, y_i, rule: GainRule,
                           context=None) -> AgentState:
    """phi_i = f(x_i) + G_i (y_i - h_i(f(x_i))) using only the agent's own data."""
    return _local_update(agent, model, agent_index, y_i, rule, context,
                         np.ones(model.state_dim, dtype=bool))


def masked_local_step(agent: AgentState, model, agent_index: int, y_i, rule: GainRule,
                      context=None) -> AgentState:
    """Update the masked entries; the rest are pure projections f(x_i)."""
    return _local_update(agent, model, agent_index, y_i, rule, context, agent.mask)


def fuse(phis, C):
    """x_i = sum_j c_ij phi_j.

    ``phis`` is an ``(N, d)`` array or a list of AgentState with ``phi`` set;
    the return type follows the input.
    """
    matrix = C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=float)
    if isinstance(phis, np.ndarray):
        return matrix @ phis
    stacked = np.stack([a.phi for a in phis])
    fused = matrix @ stacked
    return [replace(a, x=fused[i]) for i, a in enumerate(phis)]


# -- batched network recursion ----------------------------------------------

@dataclass
class NetworkState:
    X: np.ndarray          # (N, d) fused estimates
    P: np.ndarray          # (N, d, d) local covariances
    masks: np.ndarray      # (N, d) bool
    Phi: np.ndarray | None = None
    K: np.ndarray | None = None
    H: np.ndarray | None = None


def network_local_step(state: NetworkState, model, Y, rule: GainRule, context=None,
                       backend=None) -> NetworkState:
    """Masked local step for all agents at once."""
    xbar = model.f_batch(state.X)
    if isinstance(model, TanhRegressionModel):
        hx, H = kernels.tanh_observe(xbar, context.Z, backend=backend)
    else:
        hx, H = model.h_batch(xbar, context), model.H_batch(xbar, context)
    innov = Y - hx
    mk = state.masks.astype(float)
    if rule.kind == "ekf":
        A = _jacobians(model, state.X)
        Pbar = kernels.predict_covariance(A, state.P, model.noise.sigma_v, backend=backend)
        phi, P, K = kernels.ekf_update(xbar, Pbar, H, innov, model.noise.sigma_w, mk, backend=backend)
        return NetworkState(state.X, P, state.masks, phi, K, H)
    if rule.kind == "gradient":
        phi, K = kernels.gradient_update(xbar, H, innov, rule.zeta, mk, backend=backend)
        return NetworkState(state.X, state.P, state.masks, phi, K, H)
    K = rule.gain[None, :, :] * mk[:, :, None]
    phi = xbar + np.einsum("nij,nj->ni", K, innov)
    return NetworkState(state.X, state.P, state.masks, phi, K, H)


def _jacobians(model, X):
    """Shared (d, d) Jacobian when f is linear in the interior, else per agent."""
    if model.constant_jacobian_f:
        return model.jacobian_f(X[0])
    return np.stack([model.jacobian_f(x) for x in X])


@dataclass
class Trajectory:
    """Full traces of one realisation.

    Index 0 of ``truth``, ``central`` and ``estimates`` is the initial
    condition; ``phis[n-1]`` holds phi_{i,n} for steps n = 1..T.
    """

    truth: np.ndarray
    central: np.ndarray | None
    estimates: np.ndarray
    phis: np.ndarray
    diverged_at: int | None = None
    nonsmooth_steps: np.ndarray | None = None
    gains: dict = field(default_factory=dict)
    central_gains: dict = field(default_factory=dict)
    jacobians_h: dict = field(default_factory=dict)
    contexts: dict = field(default_factory=dict)


DIVERGENCE_LIMIT = 1e12


def run_distributed(model: StateSpaceModel, C, rule: GainRule, masks, horizon: int, rng,
                    with_central: bool = True, agent_spread: float = 0.0, record_steps=(),
                    backend=None) -> Trajectory:
    """Simulate truth, observations, the centralised filter and the network.

    ``record_steps`` lists step indices n at which the agents' gains, the
    centralised gain, the observation Jacobians at f(x_c) and the step's
    context are kept for later spectral analysis.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    n, d = model.num_agents, model.state_dim
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (n, d):
        raise DimensionMismatch(f"masks must be ({n}, {d}), got {masks.shape}")
    matrix = C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=float)
    csr = C.to_csr() if hasattr(C, "to_csr") else None
    if csr is None:
        from scipy import sparse
        csr = sparse.csr_matrix(matrix)

    x_true, x0, P0 = model.sample_initial(rng)
    X0 = np.tile(x0, (n, 1))
    if agent_spread > 0.0:
        X0 = X0 + agent_spread * rng.standard_normal((n, d))
    truth = np.empty((horizon + 1, d))
    central = np.empty((horizon + 1, d)) if with_central else None
    estimates = np.empty((horizon + 1, n, d))
    phis = np.empty((horizon, n, d))
    nonsmooth = np.zeros(horizon + 1, dtype=bool)
    truth[0], estimates[0] = x_true, X0
    net = NetworkState(X0.copy(), np.tile(P0, (n, 1, 1)), masks)
    cstate = CentralizedState(x0.copy(), P0.copy())
    if with_central:
        central[0] = x0
    record = set(record_steps)
    traj = Trajectory(truth, central, estimates, phis, nonsmooth_steps=nonsmooth)

    for step in range(1, horizon + 1):
        context = model.draw_context(rng)
        v, w = model.noise.sample(rng)
        nonsmooth[step] = model.is_nonsmooth(x_true, v)
        x_true = model.f(x_true, v)
        Y = model.h_batch(np.broadcast_to(x_true, (n, d)).copy(), context) + w
        truth[step] = x_true

        if with_central:
            prev = cstate.x
            cstate = centralized_step(cstate, model, Y, rule, context)
            central[step] = cstate.x
        net = network_local_step(net, model, Y, rule, context, backend=backend)
        phis[step - 1] = net.Phi
        net.X = kernels.combine(csr, net.Phi, backend=backend)
        estimates[step] = net.X

        if step in record:
            traj.gains[step] = net.K.copy()
            traj.contexts[step] = context
            if with_central:
                traj.central_gains[step] = cstate.G.copy()
                xbar_c = model.f(prev)
                traj.jacobians_h[step] = model.H_batch(np.broadcast_to(xbar_c, (n, d)).copy(), context)
            else:
                traj.jacobians_h[step] = net.H.copy()

        worst = np.max(np.abs(net.X))
        if not np.isfinite(worst) or worst ** 2 > DIVERGENCE_LIMIT or (
            with_central and not np.all(np.isfinite(cstate.x))
        ):
            traj.diverged_at = step
            truth[step + 1:] = np.nan
            estimates[step + 1:] = np.nan
            phis[step:] = np.nan
            if with_central:
                central[step + 1:] = np.nan
            break
    return traj
