"""State-space models: evolution, per-agent observation, Jacobians and noise.

Every model exposes batched methods over an ``(N, d)`` array whose row ``i``
is the state agent ``i`` evaluates its own functions at.  All agents of a
model share one observation dimension ``obs_dim``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange
from .network import NetworkTopology, bfs_layers


def _psd_factor(cov):
    """Square-root factor L with L @ L.T == cov, valid for singular PSD cov."""
    cov = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.any(w < -1e-12 * max(1.0, np.abs(w).max(initial=0.0))):
        raise ValueError("covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean white Gaussian evolution and observation noise.

    ``sigma_w`` holds one ``(m, m)`` block per agent; observation noise is
    independent across agents and of the evolution noise.
    """

    sigma_v: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        sv = np.atleast_2d(np.asarray(self.sigma_v, dtype=float))
        sw = np.asarray(self.sigma_w, dtype=float)
        if sw.ndim != 3 or sw.shape[1] != sw.shape[2]:
            raise DimensionMismatch(f"sigma_w must be (N, m, m), got {sw.shape}")
        for m in (sv, *sw):
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError("covariances must be symmetric")
        object.__setattr__(self, "sigma_v", sv)
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "_v_factor", _psd_factor(sv))
        object.__setattr__(self, "_w_factor", np.stack([_psd_factor(b) for b in sw]))

    @property
    def stacked_sigma_w(self) -> np.ndarray:
        """Block-diagonal covariance of the stacked observation noise."""
        n, m, _ = self.sigma_w.shape
        out = np.zeros((n * m, n * m))
        for i, block in enumerate(self.sigma_w):
            out[i * m:(i + 1) * m, i * m:(i + 1) * m] = block
        return out

    def sample(self, rng):
        d = self.sigma_v.shape[0]
        n, m, _ = self.sigma_w.shape
        v = self._v_factor @ rng.standard_normal(d)
        w = np.einsum("nij,nj->ni", self._w_factor, rng.standard_normal((n, m)))
        return v, w


class StateSpaceModel:
    """Base class.  Subclasses implement the batched hooks below."""

    state_dim: int
    num_agents: int
    obs_dim: int
    noise: NoiseModel
    # True when jacobian_f does not depend on the state
    constant_jacobian_f = False

    # time-varying observation functions draw their per-step context here
    def draw_context(self, rng):
        return None

    def f(self, x, v=None):
        raise NotImplementedError

    def f_batch(self, X):
        return np.stack([self.f(x) for x in X])

    def jacobian_f(self, x):
        raise NotImplementedError

    def h_batch(self, X, context=None):
        raise NotImplementedError

    def H_batch(self, X, context=None):
        raise NotImplementedError

    def is_nonsmooth(self, x, v=None) -> bool:
        """True when f(x, v) crosses a point where the Jacobian is not exact."""
        return False

    def default_masks(self) -> np.ndarray:
        return np.ones((self.num_agents, self.state_dim), dtype=bool)

    def sample_initial(self, rng):
        """Return (true initial state, initial estimate, initial covariance)."""
        raise NotImplementedError

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return (self.obs_dim,) * self.num_agents


class LinearModel(StateSpaceModel):
    """x' = F x + v, y_i = H_i x + w_i."""

    constant_jacobian_f = True

    def __init__(self, transition, observations, noise: NoiseModel, prior_cov=None, prior_mean=None):
        self.F = np.atleast_2d(np.asarray(transition, dtype=float))
        obs = np.asarray(observations, dtype=float)
        if obs.ndim == 2:
            obs = np.broadcast_to(obs, (noise.sigma_w.shape[0], *obs.shape)).copy()
        self.Hs = obs
        self.state_dim = self.F.shape[0]
        self.num_agents, self.obs_dim, d = obs.shape
        if d != self.state_dim or self.F.shape != (d, d):
            raise DimensionMismatch("transition/observation shapes disagree")
        if noise.sigma_w.shape[:2] != (self.num_agents, self.obs_dim):
            raise DimensionMismatch("noise shapes disagree with observation matrices")
        self.noise = noise
        self.prior_cov = np.eye(d) if prior_cov is None else np.atleast_2d(prior_cov)
        self.prior_mean = np.zeros(d) if prior_mean is None else np.asarray(prior_mean, float)

    def f(self, x, v=None):
        out = self.F @ x
        return out if v is None else out + v

    def f_batch(self, X):
        return X @ self.F.T

    def jacobian_f(self, x):
        return self.F.copy()

    def h_batch(self, X, context=None):
        return np.einsum("nmd,nd->nm", self._H(X, context), X)

    def H_batch(self, X, context=None):
        return np.broadcast_to(self._H(X, context), (X.shape[0], self.obs_dim, self.state_dim)).copy()

    def _H(self, X, context):
        if context is not None:  # single-agent selection
            return self.Hs[context.agent][None]
        if X.shape[0] != self.num_agents:
            raise DimensionMismatch(f"expected {self.num_agents} rows, got {X.shape[0]}")
        return self.Hs

    def sample_initial(self, rng):
        factor = _psd_factor(self.prior_cov)
        x0 = self.prior_mean + factor @ rng.standard_normal(self.state_dim)
        return x0, self.prior_mean.copy(), self.prior_cov.copy()


@dataclass(frozen=True)
class AgentSelector:
    """Context stand-in that pins a static model to one agent's functions."""

    agent: int

    def select(self, agent):
        return self


@dataclass(frozen=True)
class Regressors:
    """Per-step regressor rows ``Z[i]`` of shape ``(m, d)`` for each agent."""

    Z: np.ndarray

    def select(self, agent):
        return Regressors(self.Z[agent:agent + 1])


class TanhRegressionModel(StateSpaceModel):
    """Static parameter learnt through y_i = tanh(Z_i x) + w_i.

    ``Z_i`` is redrawn every step as Gaussian entries restricted to the
    agent's support mask, so agent i only ever sees its masked coordinates.
    """

    constant_jacobian_f = True

    def __init__(self, support_masks, obs_noise_var=0.01, regressor_std=1.0, truth_scale=0.5):
        masks = np.asarray(support_masks, dtype=bool)
        self.support_masks = masks
        self.num_agents, self.state_dim = masks.shape
        self.obs_dim = 1
        self.regressor_std = float(regressor_std)
        self.truth_scale = float(truth_scale)
        self.noise = NoiseModel(
            np.zeros((self.state_dim, self.state_dim)),
            np.full((self.num_agents, 1, 1), float(obs_noise_var)),
        )

    def draw_context(self, rng):
        z = rng.standard_normal((self.num_agents, 1, self.state_dim)) * self.regressor_std
        return Regressors(z * self.support_masks[:, None, :])

    def f(self, x, v=None):
        x = np.array(x, dtype=float)
        return x if v is None else x + v

    def f_batch(self, X):
        return np.array(X, dtype=float)

    def jacobian_f(self, x):
        return np.eye(self.state_dim)

    @staticmethod
    def _regressors(context):
        if not isinstance(context, Regressors):
            raise ValueError("TanhRegressionModel needs the step's Regressors as context")
        return context.Z

    def h_batch(self, X, context=None):
        return np.tanh(np.einsum("nmd,nd->nm", self._regressors(context), X))

    def H_batch(self, X, context=None):
        Z = self._regressors(context)
        t = np.tanh(np.einsum("nmd,nd->nm", Z, X))
        return (1.0 - t * t)[:, :, None] * Z

    def default_masks(self):
        return self.support_masks.copy()

    def sample_initial(self, rng):
        x0 = self.truth_scale * rng.standard_normal(self.state_dim)
        return x0, np.zeros(self.state_dim), np.eye(self.state_dim)


def reflect_into_box(position, half_width):
    """Fold positions into [-L, L] by elastic reflection.

    Returns the folded positions and a +1/-1 array giving the velocity sign
    after an even/odd number of wall hits.
    """
    period = 4.0 * half_width
    u = np.mod(np.asarray(position, dtype=float) + half_width, period)
    upper = u > 2.0 * half_width
    folded = np.where(upper, 3.0 * half_width - u, u - half_width)
    return folded, np.where(upper, -1.0, 1.0)


class ParticleInBoxModel(StateSpaceModel):
    """Constant-velocity target in [-L, L]^2 with reflecting walls.

    State is ``[p_x, v_x, p_y, v_y]``; every agent measures one position
    coordinate (``observed_axis[i]`` is 0 for p_x, 1 for p_y).
    """

    constant_jacobian_f = True

    def __init__(self, observed_axis, half_width=10.0, dt=0.04, evolution_var=0.04,
                 obs_noise_var=0.16, prior_std=1.0):
        self.observed_axis = np.asarray(observed_axis, dtype=int)
        if not np.isin(self.observed_axis, (0, 1)).all():
            raise ValueError("observed_axis entries must be 0 (p_x) or 1 (p_y)")
        self.num_agents = len(self.observed_axis)
        self.state_dim = 4
        self.obs_dim = 1
        self.half_width = float(half_width)
        self.dt = float(dt)
        self.prior_std = float(prior_std)
        self.noise = NoiseModel(
            evolution_var * np.eye(4), np.full((self.num_agents, 1, 1), float(obs_noise_var))
        )
        block = np.array([[1.0, self.dt], [0.0, 1.0]])
        self.F = np.kron(np.eye(2), block)
        self._selectors = np.zeros((self.num_agents, 1, 4))
        self._selectors[np.arange(self.num_agents), 0, 2 * self.observed_axis] = 1.0

    def _linear(self, x, v):
        out = self.F @ np.asarray(x, dtype=float)
        return out if v is None else out + v

    def f(self, x, v=None):
        out = self._linear(x, v)
        for ax in (0, 2):
            out[ax], sign = reflect_into_box(out[ax], self.half_width)
            out[ax + 1] *= sign
        return out

    def f_batch(self, X):
        out = np.asarray(X, dtype=float) @ self.F.T
        for ax in (0, 2):
            out[:, ax], sign = reflect_into_box(out[:, ax], self.half_width)
            out[:, ax + 1] *= sign
        return out

    def is_nonsmooth(self, x, v=None):
        lin = self._linear(x, v)
        return bool(np.any(np.abs(lin[[0, 2]]) > self.half_width))

    def jacobian_f(self, x):
        # interior Jacobian; wall hits are treated as measure-zero events
        return self.F.copy()

    def _sel(self, X, context):
        if context is not None:
            return self._selectors[context.agent][None]
        if X.shape[0] != self.num_agents:
            raise DimensionMismatch(f"expected {self.num_agents} rows, got {X.shape[0]}")
        return self._selectors

    def h_batch(self, X, context=None):
        return np.einsum("nmd,nd->nm", self._sel(X, context), X)

    def H_batch(self, X, context=None):
        return np.broadcast_to(self._sel(X, context), (X.shape[0], 1, 4)).copy()

    def default_masks(self):
        masks = np.zeros((self.num_agents, 4), dtype=bool)
        for i, ax in enumerate(self.observed_axis):
            masks[i, 2 * ax:2 * ax + 2] = True
        return masks

    def sample_initial(self, rng):
        L = self.half_width
        pos = rng.uniform(-0.5 * L, 0.5 * L, size=2)
        vel = rng.standard_normal(2)
        x0 = np.array([pos[0], vel[0], pos[1], vel[1]])
        cov = self.prior_std ** 2 * np.eye(4)
        est = x0 + self.prior_std * rng.standard_normal(4)
        return x0, est, cov


class CallableModel(StateSpaceModel):
    """Model assembled from plain callables, identical observation function
    for all agents; handy for analysis of user-supplied dynamics."""

    def __init__(self, f, jac_f, h, jac_h, noise: NoiseModel):
        self._f, self._jf, self._h, self._jh = f, jac_f, h, jac_h
        self.noise = noise
        self.state_dim = noise.sigma_v.shape[0]
        self.num_agents, self.obs_dim, _ = noise.sigma_w.shape

    def f(self, x, v=None):
        out = np.asarray(self._f(np.asarray(x, float)), dtype=float)
        return out if v is None else out + v

    def jacobian_f(self, x):
        return np.atleast_2d(self._jf(np.asarray(x, float)))

    def h_batch(self, X, context=None):
        return np.stack([np.atleast_1d(self._h(x)) for x in X])

    def H_batch(self, X, context=None):
        return np.stack([np.atleast_2d(self._jh(x)) for x in X])

    def sample_initial(self, rng):
        d = self.state_dim
        return rng.standard_normal(d), np.zeros(d), np.eye(d)


# -- module-level operations -------------------------------------------------

def _as_state(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise DimensionMismatch(f"state must have shape ({model.state_dim},), got {x.shape}")
    return x


def _check_agent(model, agent):
    if not 0 <= agent < model.num_agents:
        raise IndexOutOfRange(f"agent {agent} outside [0, {model.num_agents})")


def _context_for(model, agent, context):
    if context is None:
        return AgentSelector(agent)
    return context.select(agent)


def evolve(model: StateSpaceModel, x, v=None):
    x = _as_state(model, x)
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape != x.shape:
            raise DimensionMismatch(f"noise shape {v.shape} != state shape {x.shape}")
    return model.f(x, v)


def observe(model: StateSpaceModel, agent: int, x, w=None, context=None):
    _check_agent(model, agent)
    x = _as_state(model, x)
    y = model.h_batch(x[None, :], _context_for(model, agent, context))[0]
    if w is not None:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if w.shape != y.shape:
            raise DimensionMismatch(f"noise shape {w.shape} != observation shape {y.shape}")
        y = y + w
    return y


def jacobian_f(model: StateSpaceModel, x):
    return model.jacobian_f(_as_state(model, x))


def jacobian_h(model: StateSpaceModel, agent: int, x, context=None):
    _check_agent(model, agent)
    x = _as_state(model, x)
    return model.H_batch(x[None, :], _context_for(model, agent, context))[0]


def sample_noise(model: StateSpaceModel, rng):
    """Draw (v, w) with w of shape (N, m)."""
    return model.noise.sample(rng)


# -- support masks for the regression model ---------------------------------

def round_robin_masks(num_agents, state_dim, active):
    masks = np.zeros((num_agents, state_dim), dtype=bool)
    for i in range(num_agents):
        masks[i, [(i + k) % state_dim for k in range(active)]] = True
    return masks


def banded_masks(topology: NetworkTopology, state_dim, active):
    """Sliding coordinate windows laid along hop distance from a peripheral
    agent, so nearby agents share coordinates and distant ones do not.

    Window ``w`` covers coordinates ``w .. w+active-1``; every window is used
    when the graph is deep enough, making the union cover all coordinates.
    """
    far = int(np.argmax(bfs_layers(topology, 0)))
    layer = bfs_layers(topology, far)
    n_windows = state_dim - active + 1
    window = np.minimum(layer * n_windows // (layer.max() + 1), n_windows - 1)
    masks = np.zeros((topology.num_agents, state_dim), dtype=bool)
    for i, w in enumerate(window):
        masks[i, w:w + active] = True
    return masks


def layered_masks(topology: NetworkTopology, state_dim, active, source=None):
    """Cyclic coordinate windows indexed by hop distance modulo ``state_dim``.

    Adjacent agents sit at most one layer apart, so a closed neighbourhood
    sees at most three consecutive windows, i.e. ``active + 2`` coordinates.
    With ``active + 2 < state_dim`` no neighbourhood covers every coordinate,
    while each coordinate is observed within a few hops of every agent.
    """
    if source is None:
        source = int(np.argmax(bfs_layers(topology, 0)))
    layer = bfs_layers(topology, source)
    masks = np.zeros((topology.num_agents, state_dim), dtype=bool)
    for i, w in enumerate(layer % state_dim):
        masks[i, [(w + k) % state_dim for k in range(active)]] = True
    return masks


MASK_STRATEGIES = ("layered", "banded", "round_robin")


def support_masks(strategy, topology: NetworkTopology, state_dim, active):
    if strategy == "layered":
        return layered_masks(topology, state_dim, active)
    if strategy == "banded":
        return banded_masks(topology, state_dim, active)
    if strategy == "round_robin":
        return round_robin_masks(topology.num_agents, state_dim, active)
    raise ValueError(f"unknown mask strategy {strategy!r}; choose from {MASK_STRATEGIES}")


def neighbourhood_coverage(topology: NetworkTopology, masks) -> np.ndarray:
    """Number of coordinates covered by each agent's neighbourhood."""
    masks = np.asarray(masks, dtype=bool)
    return np.array([masks[sorted(nb)].any(axis=0).sum() for nb in topology.neighborhoods])


def write_masks_csv(masks, path):
    masks = np.asarray(masks, dtype=int)
    header = "agent," + ",".join(f"x{k}" for k in range(masks.shape[1]))
    rows = [header] + [f"{i}," + ",".join(map(str, row)) for i, row in enumerate(masks)]
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
