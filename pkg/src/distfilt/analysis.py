"""Error and discrepancy processes, convergence conditions and bound fits.

Conventions: ``N`` agents, state dimension ``d``, trace length ``T``.
Discrepancy ``Delta_n`` stacks ``eps_{i,n} - eps_n`` over agents, which is
``x_c - x_i`` per block.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DimensionMismatch, FitFailed, ShapeMismatch, WindowTooLong
from .network import averaging_gap_matrix, spectral_radius

DENOMINATOR_FLOOR = 1e-15
GAMMA_QUANTILE = 95.0


@dataclass
class ErrorTrace:
    central: np.ndarray   # (T, d)
    agents: np.ndarray    # (T, N, d)

    @classmethod
    def from_estimates(cls, truth, central, estimates):
        truth = np.asarray(truth, dtype=float)
        return cls(truth - np.asarray(central), truth[:, None, :] - np.asarray(estimates))

    @property
    def central_sq(self):
        return np.sum(self.central ** 2, axis=-1)

    @property
    def agent_sq(self):
        return np.sum(self.agents ** 2, axis=-1)

    @property
    def network_sq(self):
        """||E_n||^2 of the stacked network error."""
        T = self.agents.shape[0]
        return np.sum(self.agents.reshape(T, -1) ** 2, axis=-1)


@dataclass
class DiscrepancyTrace:
    delta: np.ndarray     # (T, N, d)

    @property
    def sq_norm(self):
        T = self.delta.shape[0]
        return np.sum(self.delta.reshape(T, -1) ** 2, axis=-1)


def discrepancy(errors: ErrorTrace) -> DiscrepancyTrace:
    c, a = np.asarray(errors.central), np.asarray(errors.agents)
    if a.ndim != 3 or c.shape != (a.shape[0], a.shape[2]):
        raise ShapeMismatch(f"central errors {c.shape} do not align with agent errors {a.shape}")
    return DiscrepancyTrace(a - c[:, None, :])


# -- spectral conditions ----------------------------------------------------

def _as_blocks(x, n, shape):
    x = np.asarray(x, dtype=float)
    if x.ndim == len(shape):
        x = np.broadcast_to(x, (n, *shape))
    if x.shape != (n, *shape):
        raise DimensionMismatch(f"expected blocks of shape {(n, *shape)}, got {x.shape}")
    return x


def closed_loop_matrix(C, gains, H, A, masks=None) -> np.ndarray:
    """Assemble (C (x) I)(I - Y G~ H)(I (x) A) as a dense (Nd, Nd) matrix.

    ``gains`` is (N, d, m), ``H`` is (N, m, d); ``A`` is (d, d) or (N, d, d).
    """
    matrix = C.matrix if hasattr(C, "matrix") else np.atleast_2d(np.asarray(C, dtype=float))
    n = matrix.shape[0]
    gains = np.asarray(gains, dtype=float)
    if gains.ndim == 2:
        gains = np.broadcast_to(gains, (n, *gains.shape))
    d, m = gains.shape[1], gains.shape[2]
    H = _as_blocks(H, n, (m, d))
    A = _as_blocks(A, n, (d, d))
    if masks is not None:
        gains = gains * np.asarray(masks, dtype=float)[:, :, None]
    B = np.eye(d) - np.einsum("nij,njk->nik", gains, H)
    B = np.einsum("nij,njk->nik", B, A)
    return np.einsum("ij,jab->iajb", matrix, B).reshape(n * d, n * d)


def theorem1_radius(C, gains, H, A) -> float:
    """rho(C (I - G~ H) A) for the lifted network matrices."""
    return spectral_radius(closed_loop_matrix(C, gains, H, A))


def g_delta(C, gains, H, A, masks) -> float:
    """Per-step radius rho(C (I - Y G~ H) A) used by the windowed condition."""
    return spectral_radius(closed_loop_matrix(C, gains, H, A, masks))


def lemma1_radius(C) -> float:
    matrix = C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=float)
    return spectral_radius(averaging_gap_matrix(matrix))


def theorem3_window(g_sequence, k: int):
    """Product of the most recent k+1 values and whether it is below 1."""
    g = np.asarray(g_sequence, dtype=float)
    if k < 0 or k + 1 > g.size:
        raise WindowTooLong(f"window of {k + 1} values exceeds sequence of length {g.size}")
    product = float(np.prod(g[g.size - k - 1:]))
    return product, product < 1.0


def theorem3_search(g_sequence, k_max: int):
    """Smallest k <= k_max whose trailing window product is below 1.

    Returns ``(k, product)`` or ``(None, smallest product seen)``.
    """
    g = np.asarray(g_sequence, dtype=float)
    best = np.inf
    for k in range(min(k_max, g.size - 1) + 1):
        product, ok = theorem3_window(g, k)
        if ok:
            return k, product
        best = min(best, product)
    return None, best


# -- contraction factors ----------------------------------------------------

@dataclass
class GammaEstimate:
    per_step: np.ndarray      # (T, N); NaN where the denominator is degenerate
    summary: np.ndarray       # (N,) high quantile per agent
    degenerate: np.ndarray    # (T, N) bool

    @property
    def gamma(self) -> float:
        return float(np.nanmax(self.summary))


def gamma_ratios(truth, estimates, phis):
    """gamma_{i,n} = ||x_n - phi_{i,n}||^2 / ||x_{n-1} - x_{i,n-1}||^2.

    ``truth`` (T+1, d), ``estimates`` (T+1, N, d), ``phis`` (T, N, d).
    """
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    phis = np.asarray(phis, dtype=float)
    if estimates.shape[0] != truth.shape[0] or phis.shape[0] != truth.shape[0] - 1:
        raise ShapeMismatch("truth, estimates and phis are not aligned")
    num = np.sum((truth[1:, None, :] - phis) ** 2, axis=-1)
    den = np.sum((truth[:-1, None, :] - estimates[:-1]) ** 2, axis=-1)
    degenerate = ~(den > DENOMINATOR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(degenerate, np.nan, num / np.where(degenerate, 1.0, den))
    return ratio, degenerate


def summarize_gamma(ratios, quantile=GAMMA_QUANTILE):
    """Per-agent high quantile over steps (and realisations stacked on axis 0)."""
    r = np.asarray(ratios, dtype=float)
    r = r.reshape(-1, r.shape[-1])
    out = np.full(r.shape[-1], np.nan)
    ok = ~np.all(np.isnan(r), axis=0)
    if ok.any():
        out[ok] = np.nanpercentile(r[:, ok], quantile, axis=0)
    return out


def estimate_gamma(truth, estimates, phis, quantile=GAMMA_QUANTILE) -> GammaEstimate:
    ratio, degenerate = gamma_ratios(truth, estimates, phis)
    return GammaEstimate(ratio, summarize_gamma(ratio, quantile), degenerate)


# -- exponential boundedness fit -------------------------------------------

@dataclass
class ExponentialBoundFit:
    eta: float
    rho: float
    nu: float
    mu: float
    residual: float
    valid: bool
    transient: tuple[int, int] = (0, 0)

    def curve(self, n):
        return self.eta * self.mu * self.rho ** np.asarray(n, dtype=float) + self.nu

    def dominates(self, mse_trace, slack=0.0):
        """True when the fitted curve bounds the trace on the transient window."""
        lo, hi = self.transient
        n = np.arange(lo, hi)
        t = np.asarray(mse_trace, dtype=float)[lo:hi]
        return bool(np.all(t <= (1.0 + slack) * self.curve(n)))


FLOOR_FRACTION = 0.2
TRANSIENT_DROP = 1e-3
INVALID_FRACTION = 0.1


def fit_exponential_bound(mse_trace, burn_in: int = 0, initial_error_sq: float | None = None
                          ) -> ExponentialBoundFit:
    """Fit E||e_n||^2 <= eta * mu * rho^n + nu.

    ``nu`` is the mean of the trailing 20% of the trace.  The transient runs
    from ``burn_in`` until the excess over ``nu`` first falls below 1e-3 of
    its starting value (at most to the start of the trailing segment), and
    ``log(mse - nu)`` is fitted by least squares there.  ``mu`` is
    ``initial_error_sq`` (1.0 when not given, making ``eta`` the raw
    amplitude).
    """
    t = np.asarray(mse_trace, dtype=float)
    if t.ndim != 1 or t.size <= burn_in + 10:
        raise FitFailed(f"trace of length {t.size} too short for burn-in {burn_in}")
    if not np.all(np.isfinite(t)):
        raise FitFailed("trace contains non-finite values")
    tail_start = t.size - max(1, int(round(FLOOR_FRACTION * t.size)))
    nu = float(np.mean(t[tail_start:]))
    excess = t - nu
    if not excess[burn_in] > 0.0 or np.all(np.diff(t[burn_in:]) >= 0.0):
        raise FitFailed("trace shows no decaying transient")
    start_excess = excess[burn_in]
    stop = tail_start
    small = np.nonzero(excess[burn_in:tail_start] < TRANSIENT_DROP * start_excess)[0]
    if small.size:
        stop = burn_in + int(small[0])
    stop = max(stop, burn_in + 2)
    window = np.arange(burn_in, stop)
    ex = excess[window]
    positive = ex > 0.0
    valid = np.mean(~positive) <= INVALID_FRACTION
    if positive.sum() < 2:
        raise FitFailed("fewer than two positive transient points")
    n, y = window[positive].astype(float), np.log(ex[positive])
    slope, intercept = np.polyfit(n, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * n + intercept)) ** 2)))
    rho = float(np.exp(slope))
    if not 0.0 < rho < 1.0:
        valid = False
        rho = float(np.clip(rho, np.finfo(float).tiny, 1.0 - 1e-12))
    mu = 1.0 if initial_error_sq is None else float(initial_error_sq)
    eta = float(np.exp(intercept)) / mu
    return ExponentialBoundFit(eta, rho, max(nu, 0.0), mu, resid, bool(valid), (int(window[0]), int(stop)))


# -- linearisation residuals ------------------------------------------------

@dataclass
class ResidualNorms:
    res_f: float
    res_h: float
    res_ob: float
    res_delta: float | None = None
    mu_prime: float = 0.0


def residual_report(model, central_est, agent_est, next_truth, context=None,
                    central_gain=None, agent_gains=None, C=None, masks=None) -> ResidualNorms:
    """Squared-norm residuals of the first-order discrepancy expansion at one step.

    ``central_est`` is x_n, ``agent_est`` the (N, d) agent estimates x_{i,n},
    ``next_truth`` x_{n+1} = f(x_n, v_n) and ``context`` the step n+1 context.
    Res_Delta needs the step n+1 gains (centralised (d, N*m), agents
    (N, d, m)), the combination matrix and the masks.
    """
    xc = np.asarray(central_est, dtype=float)
    X = np.asarray(agent_est, dtype=float)
    n, d = X.shape
    if xc.shape != (d,) or np.shape(next_truth) != (d,):
        raise ShapeMismatch("state vectors do not align with agent estimates")
    A = model.jacobian_f(xc)
    fc = model.f(xc)
    fX = model.f_batch(X)
    diff = xc[None, :] - X                         # Delta blocks x_c - x_i
    lin_f = diff @ A.T
    res_f = (fc[None, :] - fX) - lin_f
    fc_rows = np.broadcast_to(fc, (n, d)).copy()
    h_c = model.h_batch(fc_rows, context)
    H = model.H_batch(fc_rows, context)
    res_h = (h_c - model.h_batch(fX, context)) - np.einsum("nij,nj->ni", H, lin_f)
    r_ob = model.h_batch(np.broadcast_to(next_truth, (n, d)).copy(), context) - h_c
    out = ResidualNorms(
        res_f=float(np.sum(res_f ** 2)),
        res_h=float(np.sum(res_h ** 2)),
        res_ob=float(np.sum(r_ob ** 2)),
        mu_prime=float(np.max(np.sum(diff ** 2, axis=1))),
    )
    if central_gain is not None and agent_gains is not None and C is not None:
        matrix = C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=float)
        K = np.asarray(agent_gains, dtype=float)
        if masks is not None:
            K = K * np.asarray(masks, dtype=float)[:, :, None]
        common = np.asarray(central_gain) @ r_ob.ravel()
        local = np.einsum("nij,nj->ni", K, r_ob)
        res_delta = common[None, :] - matrix @ local
        out.res_delta = float(np.sum(res_delta ** 2))
    return out


# -- bound checks -------------------------------------------------------------

def lifted_combination_radius(C) -> float:
    """rho(C (x) I) = rho(C)."""
    matrix = C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=float)
    return spectral_radius(matrix)


def contraction_bound_holds(delta_sq, rho_c, gamma, slack):
    """Per-step truth of ||D_{n+1}||^2 <= rho_c * gamma * ||D_n||^2 + slack."""
    d = np.asarray(delta_sq, dtype=float)
    slack = np.broadcast_to(np.asarray(slack, dtype=float), d[1:].shape)
    return d[1:] <= rho_c * gamma * d[:-1] + slack


# -- report ------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    lemma1_radius: float = float("nan")
    theorem1_radius: float = float("nan")
    combination_radius: float = float("nan")
    gamma_max: float = float("nan")
    gamma_per_agent: np.ndarray = field(default_factory=lambda: np.zeros(0))
    g_delta_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    g_delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theorem3_k: int | None = None
    theorem3_product: float = float("nan")
    theorem3_k_max: int = 0
    res_f: float = float("nan")
    res_h: float = float("nan")
    res_ob: float = float("nan")
    res_delta: float = float("nan")
    mu_prime: float = float("nan")
    nonsmooth_in_window: bool = False
    fit_eta: float = float("nan")
    fit_rho: float = float("nan")
    fit_nu: float = float("nan")
    fit_valid: bool = False

    @property
    def theorem3_satisfied(self) -> bool:
        return self.theorem3_k is not None

    @property
    def theorem3_products(self) -> np.ndarray:
        """Trailing window products for k = 0..min(k_max, len(g) - 1)."""
        g = np.asarray(self.g_delta, dtype=float)
        if g.size == 0:
            return np.zeros(0)
        k = min(self.theorem3_k_max, g.size - 1)
        return np.cumprod(g[::-1][:k + 1])

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("gamma_per_agent", "g_delta_steps", "g_delta"):
                continue
            out[f.name] = v
        out["theorem3_satisfied"] = self.theorem3_satisfied
        out["theorem3_products"] = list(self.theorem3_products)
        out["gamma_per_agent"] = list(self.gamma_per_agent)
        out["g_delta_count"] = int(len(self.g_delta))
        return out

    def write(self, path, g_delta_path=None):
        """Flat ``key = value`` text; the g_Delta sequence goes to a CSV."""
        lines = [f"{k} = {_fmt(v)}" for k, v in self.as_dict().items()]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        if g_delta_path is not None:
            write_g_delta_csv(self.g_delta_steps, self.g_delta, g_delta_path)


def _fmt(v):
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def write_g_delta_csv(steps, values, path):
    with open(path, "w") as fh:
        fh.write("step,g_delta\n")
        for s, g in zip(steps, values):
            fh.write(f"{int(s)},{float(g):.12g}\n")


def read_g_delta_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    return data[:, 0].astype(int), data[:, 1]
