"""Seeded Monte Carlo runs of scenarios and aggregation of their statistics.

Each realisation ``r`` draws from ``np.random.default_rng([seed, r])``, so
realisations are independent streams that can run in any order.  Results are
reduced in realisation order, which keeps the output bitwise identical for
any number of workers.
"""
from __future__ import annotations

import copy
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .errors import FitFailed, IoFailure, ScenarioInvalid, UnknownParameter
from .filters import GainRule, run_distributed, stationary_kalman_gain
from .models import (
    MASK_STRATEGIES,
    LinearModel,
    NoiseModel,
    ParticleInBoxModel,
    TanhRegressionModel,
    support_masks,
)
from .network import (
    SPECTRAL_TOL,
    WEIGHT_RULES,
    central_agent,
    combination_matrix,
    complete_topology,
    generate_sm7_topology,
    path_topology,
    read_combination_csv,
    read_topology,
)

SCENARIO_VERSION = 1

# accepted model parameters and their defaults
MODEL_DEFAULTS = {
    "tanh": {
        "state_dim": 5,
        "active_coords": 2,
        "mask_strategy": "layered",
        "obs_noise_var": 0.01,
        "regressor_std": 1.0,
        "truth_scale": 0.5,
        "agent_spread": 0.0,
    },
    "particle_box": {
        "half_width": 10.0,
        "dt": 0.04,
        "evolution_var": 0.04,
        "obs_noise_var": 0.16,
        "prior_std": 1.0,
        "py_agent": "center",
        "agent_spread": 0.0,
    },
    "linear": {
        "transition": [[1.0]],
        "observation": [[1.0]],
        "process_var": 0.1,
        "obs_noise_var": 1.0,
        "prior_var": 1.0,
        "agent_spread": 0.0,
    },
}
TOPOLOGY_SOURCES = ("file", "sm7", "complete", "path")
GAIN_RULES = ("ekf", "gradient", "fixed", "stationary")
SWEEPABLE = ("gain.zeta", "horizon", "network.weights", "model.active_coords")


@dataclass
class ModelSpec:
    kind: str = "tanh"
    params: dict = field(default_factory=dict)

    def get(self, key):
        return self.params.get(key, MODEL_DEFAULTS[self.kind][key])


@dataclass
class NetworkSpec:
    source: str = "sm7"
    weights: str = "metropolis"
    path: str | None = None
    seed: int = 42
    agents: int | None = None


@dataclass
class GainSpec:
    rule: str = "gradient"
    zeta: float | None = None
    gain: list | None = None


@dataclass
class AnalysisSpec:
    burn_in: int = 0
    g_delta_window: int = 32
    gamma_realisations: int = 20


@dataclass
class Scenario:
    name: str
    seed: int
    horizon: int
    realisations: int
    model: ModelSpec = field(default_factory=ModelSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    gain: GainSpec = field(default_factory=GainSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    workers: int = 1
    version: int = SCENARIO_VERSION
    base_dir: Path | None = field(default=None, compare=False)

    def resolve(self, path) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def validate(self):
        if self.version != SCENARIO_VERSION:
            raise ScenarioInvalid(f"unsupported scenario version {self.version}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ScenarioInvalid("seed must be a non-negative integer")
        if self.realisations < 1:
            raise ScenarioInvalid("realisations must be at least 1")
        if self.horizon < 1:
            raise ScenarioInvalid("horizon must be at least 1")
        if self.workers < 1:
            raise ScenarioInvalid("workers must be at least 1")
        if self.model.kind not in MODEL_DEFAULTS:
            raise ScenarioInvalid(f"unknown model kind {self.model.kind!r}")
        unknown = set(self.model.params) - set(MODEL_DEFAULTS[self.model.kind])
        if unknown:
            raise ScenarioInvalid(f"unknown {self.model.kind} parameters: {sorted(unknown)}")
        net = self.network
        if net.source not in TOPOLOGY_SOURCES:
            raise ScenarioInvalid(f"unknown topology source {net.source!r}")
        if net.source == "file":
            if not net.path:
                raise ScenarioInvalid("network.path is required for source = 'file'")
            if not self.resolve(net.path).is_file():
                raise ScenarioInvalid(f"topology file not found: {self.resolve(net.path)}")
        if net.source in ("complete", "path") and not (net.agents and net.agents >= 1):
            raise ScenarioInvalid("network.agents is required for generated graphs")
        if net.weights not in WEIGHT_RULES and not self.resolve(net.weights).is_file():
            raise ScenarioInvalid(f"weights must be one of {sorted(WEIGHT_RULES)} or a CSV file")
        g = self.gain
        if g.rule not in GAIN_RULES:
            raise ScenarioInvalid(f"unknown gain rule {g.rule!r}")
        if g.rule == "gradient" and not (g.zeta is not None and 0.0 < g.zeta < 1.0):
            raise ScenarioInvalid("gain.zeta must lie in (0, 1) for the gradient rule")
        if g.rule == "fixed" and g.gain is None:
            raise ScenarioInvalid("gain.gain is required for the fixed rule")
        if g.rule == "stationary" and self.model.kind != "linear":
            raise ScenarioInvalid("the stationary gain rule needs the linear model")
        if self.model.kind == "tanh" and self.model.get("mask_strategy") not in MASK_STRATEGIES:
            raise ScenarioInvalid(f"mask_strategy must be one of {MASK_STRATEGIES}")
        a = self.analysis
        if a.burn_in < 0 or a.g_delta_window < 1 or a.gamma_realisations < 1:
            raise ScenarioInvalid("analysis settings must be positive")
        return self


# -- building ----------------------------------------------------------------

@dataclass
class Setup:
    """Objects built from a scenario, shared by all realisations."""

    model: object
    topology: object
    C: object
    rule: GainRule
    masks: np.ndarray
    agent_spread: float


def build_topology_from(spec: NetworkSpec, scenario: Scenario):
    if spec.source == "file":
        return read_topology(scenario.resolve(spec.path))
    if spec.source == "sm7":
        return generate_sm7_topology(spec.seed)
    if spec.source == "complete":
        return complete_topology(spec.agents)
    return path_topology(spec.agents)


def build(scenario: Scenario) -> Setup:
    scenario.validate()
    topo = build_topology_from(scenario.network, scenario)
    n = topo.num_agents
    w = scenario.network.weights
    C = combination_matrix(topo, w) if w in WEIGHT_RULES else read_combination_csv(scenario.resolve(w))
    if C.size != n:
        raise ScenarioInvalid(f"combination matrix is {C.size}x{C.size} for {n} agents")
    spec = scenario.model
    if spec.kind == "tanh":
        masks = support_masks(spec.get("mask_strategy"), topo, int(spec.get("state_dim")),
                              int(spec.get("active_coords")))
        model = TanhRegressionModel(masks, spec.get("obs_noise_var"), spec.get("regressor_std"),
                                    spec.get("truth_scale"))
    elif spec.kind == "particle_box":
        anchor = spec.get("py_agent")
        anchor = central_agent(topo) if anchor == "center" else int(anchor)
        if not 0 <= anchor < n:
            raise ScenarioInvalid(f"py_agent {anchor} out of range for {n} agents")
        axis = np.zeros(n, dtype=int)
        axis[anchor] = 1
        model = ParticleInBoxModel(axis, spec.get("half_width"), spec.get("dt"),
                                   spec.get("evolution_var"), spec.get("obs_noise_var"),
                                   spec.get("prior_std"))
        masks = model.default_masks()
    else:
        F = np.atleast_2d(np.asarray(spec.get("transition"), dtype=float))
        H = np.atleast_2d(np.asarray(spec.get("observation"), dtype=float))
        d, m = F.shape[0], H.shape[0]
        noise = NoiseModel(spec.get("process_var") * np.eye(d),
                           np.broadcast_to(spec.get("obs_noise_var") * np.eye(m), (n, m, m)).copy())
        model = LinearModel(F, H, noise, prior_cov=spec.get("prior_var") * np.eye(d))
        masks = model.default_masks()
    g = scenario.gain
    if g.rule == "ekf":
        rule = GainRule.ekf()
    elif g.rule == "gradient":
        rule = GainRule.gradient(g.zeta)
    elif g.rule == "fixed":
        rule = GainRule.fixed(np.asarray(g.gain, dtype=float))
    else:
        rule = GainRule.fixed(stationary_kalman_gain(model.F, model.Hs[0], model.noise.sigma_v,
                                                     model.noise.sigma_w[0]))
    return Setup(model, topo, C, rule, masks, float(spec.get("agent_spread")))


def realisation_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for realisation ``index`` of master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


# -- running -----------------------------------------------------------------

@dataclass
class RunSummary:
    """Monte Carlo means per step n = 1..horizon."""

    central_mse: np.ndarray
    agent_mse: np.ndarray          # (horizon, N)
    agent_component_mse: np.ndarray  # (horizon, N, d)
    delta_sq: np.ndarray
    delta_sq_sem: np.ndarray
    report: analysis.ConvergenceReport
    wall_seconds: float
    realisations: int
    diverged: list = field(default_factory=list)
    initial_central_mse: float = float("nan")
    initial_agent_mse: np.ndarray | None = None

    @property
    def agent_mse_min(self):
        return self.agent_mse.min(axis=1)

    @property
    def agent_mse_max(self):
        return self.agent_mse.max(axis=1)

    @property
    def agent_mse_mean(self):
        return self.agent_mse.mean(axis=1)

    @property
    def horizon(self):
        return len(self.central_mse)


@dataclass
class _Realisation:
    index: int
    diverged: bool
    central_sq: np.ndarray
    agent_sq: np.ndarray           # per component, (T+1, N, d)
    delta_sq: np.ndarray
    gamma: np.ndarray | None = None
    trajectory: object = None


def _analysis_steps(scenario: Scenario, setup: Setup):
    T = scenario.horizon
    window = min(scenario.analysis.g_delta_window, T)
    return list(range(T - window + 1, T + 1))


def simulate(setup: Setup, scenario: Scenario, index: int, record_steps=(), backend=None):
    """One realisation; returns its Trajectory."""
    return run_distributed(setup.model, setup.C, setup.rule, setup.masks, scenario.horizon,
                           realisation_rng(scenario.seed, index), with_central=True,
                           agent_spread=setup.agent_spread, record_steps=record_steps,
                           backend=backend)


def _run_one(args):
    setup, scenario, index = args
    record = _analysis_steps(scenario, setup) if index == 0 else ()
    traj = simulate(setup, scenario, index, record)
    if traj.diverged_at is not None:
        return _Realisation(index, True, None, None, None, trajectory=traj if index == 0 else None)
    errors = analysis.ErrorTrace.from_estimates(traj.truth, traj.central, traj.estimates)
    delta = analysis.discrepancy(errors).sq_norm
    gamma = None
    if index < scenario.analysis.gamma_realisations:
        gamma, _ = analysis.gamma_ratios(traj.truth, traj.estimates, traj.phis)
    return _Realisation(index, False, errors.central_sq, errors.agents ** 2, delta, gamma,
                        traj if index == 0 else None)


def _iterate(setup, scenario, workers):
    jobs = ((setup, scenario, r) for r in range(scenario.realisations))
    if workers <= 1 or scenario.realisations == 1:
        yield from map(_run_one, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map yields in submission order, so the reduction order is fixed
        yield from pool.map(_run_one, jobs, chunksize=max(1, scenario.realisations // (4 * workers)))


def run_scenario(scenario: Scenario, workers: int | None = None, progress=None) -> RunSummary:
    """Simulate every realisation and aggregate per-step means.

    Realisations that diverge are excluded from the means and listed in
    ``RunSummary.diverged``.
    """
    setup = build(scenario)
    lemma1 = analysis.lemma1_radius(setup.C)
    if not lemma1 < 1.0 - SPECTRAL_TOL:
        raise ScenarioInvalid(f"combination matrix fails the averaging condition (radius {lemma1:.6g})")
    workers = scenario.workers if workers is None else workers
    T, n, d = scenario.horizon, setup.model.num_agents, setup.model.state_dim
    start = time.perf_counter()
    c_sum = np.zeros(T + 1)
    a_sum = np.zeros((T + 1, n, d))
    d_sum = np.zeros(T + 1)
    d_sq_sum = np.zeros(T + 1)
    gammas = []
    diverged = []
    first = None
    count = 0
    for res in _iterate(setup, scenario, workers):
        if res.index == 0:
            first = res.trajectory
        if res.diverged:
            diverged.append(res.index)
        else:
            count += 1
            c_sum += res.central_sq
            a_sum += res.agent_sq
            d_sum += res.delta_sq
            d_sq_sum += res.delta_sq ** 2
            if res.gamma is not None:
                gammas.append(res.gamma)
        if progress is not None:
            progress(res.index + 1, scenario.realisations)
    with np.errstate(invalid="ignore", divide="ignore"):
        c_mean, a_mean, d_mean = c_sum / count, a_sum / count, d_sum / count
        var = np.maximum(d_sq_sum / count - d_mean ** 2, 0.0) * count / max(count - 1, 1)
        d_sem = np.sqrt(var / count)
    agent_mse = a_mean.sum(axis=-1)
    report = build_report(setup, scenario, first, gammas, agent_mse, lemma1)
    return RunSummary(c_mean[1:], agent_mse[1:], a_mean[1:], d_mean[1:], d_sem[1:], report,
                      time.perf_counter() - start, scenario.realisations, diverged,
                      float(c_mean[0]), agent_mse[0])


def build_report(setup: Setup, scenario: Scenario, traj, gammas, agent_mse, lemma1):
    rep = analysis.ConvergenceReport(lemma1_radius=lemma1)
    rep.combination_radius = analysis.lifted_combination_radius(setup.C)
    rep.theorem3_k_max = setup.topology.diameter()
    if gammas:
        summary = analysis.summarize_gamma(np.stack(gammas))
        rep.gamma_per_agent = summary
        rep.gamma_max = float(np.nanmax(summary)) if np.isfinite(summary).any() else float("nan")
    if traj is not None and traj.diverged_at is None and traj.gains:
        model = setup.model
        steps = sorted(traj.gains)
        g = []
        res = []
        for s in steps:
            A = model.jacobian_f(traj.central[s - 1])
            g.append(analysis.g_delta(setup.C, traj.gains[s], traj.jacobians_h[s], A, setup.masks))
            res.append(analysis.residual_report(
                model, traj.central[s - 1], traj.estimates[s - 1], traj.truth[s],
                traj.contexts[s], traj.central_gains[s], traj.gains[s], setup.C, setup.masks))
        rep.g_delta_steps = np.array(steps)
        rep.g_delta = np.array(g)
        last = steps[-1]
        rep.theorem1_radius = analysis.theorem1_radius(
            setup.C, traj.gains[last], traj.jacobians_h[last], model.jacobian_f(traj.central[last - 1]))
        k, prod = analysis.theorem3_search(rep.g_delta, rep.theorem3_k_max)
        rep.theorem3_k, rep.theorem3_product = k, float(prod)
        rep.res_f = float(np.mean([r.res_f for r in res]))
        rep.res_h = float(np.mean([r.res_h for r in res]))
        rep.res_ob = float(np.mean([r.res_ob for r in res]))
        rep.res_delta = float(np.mean([r.res_delta for r in res]))
        rep.mu_prime = float(np.max(np.sum((traj.estimates - traj.central[:, None, :]) ** 2, axis=-1)))
        rep.nonsmooth_in_window = bool(traj.nonsmooth_steps[steps].any())
    # fitted on steps 1..T of the network-averaged agent MSE, mu = MSE at step 1
    try:
        trace = np.mean(agent_mse[1:], axis=1)
        fit = analysis.fit_exponential_bound(trace, scenario.analysis.burn_in, float(trace[0]))
        rep.fit_eta, rep.fit_rho, rep.fit_nu, rep.fit_valid = fit.eta, fit.rho, fit.nu, fit.valid
    except FitFailed:
        rep.fit_valid = False
    return rep


# -- sweeps ------------------------------------------------------------------

def with_parameter(scenario: Scenario, key: str, value) -> Scenario:
    """Copy of ``scenario`` with one sweepable field replaced."""
    if key not in SWEEPABLE:
        raise UnknownParameter(f"{key!r} is not sweepable; choose from {SWEEPABLE}")
    out = copy.deepcopy(scenario)
    if key == "gain.zeta":
        out.gain.zeta = float(value)
    elif key == "horizon":
        out.horizon = int(value)
    elif key == "network.weights":
        out.network.weights = str(value)
    else:
        out.model.params["active_coords"] = int(value)
    return out


def sweep(scenario: Scenario, parameter: str, values, workers=None) -> list[RunSummary]:
    """One summary per value, all sharing the scenario's master seed."""
    if parameter not in SWEEPABLE:
        raise UnknownParameter(f"{parameter!r} is not sweepable; choose from {SWEEPABLE}")
    return [run_scenario(with_parameter(scenario, parameter, v), workers) for v in values]


# -- output ------------------------------------------------------------------

SUMMARY_HEADER = "step,central_mse,agent_mse_min,agent_mse_mean,agent_mse_max,delta_sq"


def export_csv(summary: RunSummary, path) -> None:
    cols = (summary.central_mse, summary.agent_mse_min, summary.agent_mse_mean,
            summary.agent_mse_max, summary.delta_sq)
    lines = [SUMMARY_HEADER]
    for k in range(summary.horizon):
        lines.append(f"{k + 1}," + ",".join(f"{c[k]:.12g}" for c in cols))
    _write(path, "\n".join(lines) + "\n")


def read_summary_csv(path) -> dict:
    """Columns of an exported summary as arrays keyed by header name."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != SUMMARY_HEADER:
        raise ValueError(f"{path}: unexpected header")
    data = np.array([[float(v) for v in line.split(",")] for line in text[1:]]).reshape(-1, 6)
    return {name: data[:, i] for i, name in enumerate(SUMMARY_HEADER.split(","))}


def export_discrepancy_csv(summary: RunSummary, path) -> None:
    """step, mean_sq_delta and one MSE column per agent."""
    n = summary.agent_mse.shape[1]
    lines = ["step,mean_sq_delta," + ",".join(f"mse_agent_{i}" for i in range(n))]
    for k in range(summary.horizon):
        row = ",".join(f"{v:.12g}" for v in summary.agent_mse[k])
        lines.append(f"{k + 1},{summary.delta_sq[k]:.12g},{row}")
    _write(path, "\n".join(lines) + "\n")


TRAJECTORY_HEADER = "step,agent,component,truth,estimate,phi"


def export_trajectory_csv(traj, path) -> None:
    """Long-format dump; agent -1 is the centralised filter, phi is empty at step 0."""
    T1, n, d = traj.estimates.shape
    lines = [TRAJECTORY_HEADER]
    for s in range(T1):
        for k in range(d):
            lines.append(f"{s},-1,{k},{traj.truth[s, k]:.17g},{traj.central[s, k]:.17g},")
        for i in range(n):
            for k in range(d):
                phi = "" if s == 0 else f"{traj.phis[s - 1, i, k]:.17g}"
                lines.append(f"{s},{i},{k},{traj.truth[s, k]:.17g},{traj.estimates[s, i, k]:.17g},{phi}")
    _write(path, "\n".join(lines) + "\n")


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
