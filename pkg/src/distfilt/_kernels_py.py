"""Pure numpy implementations of the per-step network kernels.

These are the reference versions; ``distfilt._core`` provides compiled
equivalents with identical signatures.  Arrays are float64 and C-contiguous.
Shapes: N agents, d state entries, m observations per agent.
"""
import numpy as np

# status codes shared with the compiled core
OK = 0
SINGULAR = 1


def predict_covariance(A, P, Q):
    """Return A P_i A^T + Q for every agent.  A is (d, d) or (N, d, d)."""
    if A.ndim == 2:
        out = np.einsum("ij,njk,lk->nil", A, P, A)
    else:
        out = np.einsum("nij,njk,nlk->nil", A, P, A)
    return out + Q


def ekf_update(xbar, Pbar, H, innov, R, mask):
    """Masked extended-Kalman correction with Joseph-form covariance.

    Returns ``(phi, P, K, status)``; ``status`` is SINGULAR and the outputs
    are undefined if any innovation covariance fails its Cholesky factor.
    """
    PHt = np.einsum("nij,nkj->nik", Pbar, H)
    S = np.einsum("nij,njk->nik", H, PHt) + R
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None, None, None, SINGULAR
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, 1, 2)), 1, 2)
    K = K * mask[:, :, None]
    phi = xbar + np.einsum("nij,nj->ni", K, innov)
    d = xbar.shape[1]
    IKH = np.eye(d) - np.einsum("nij,njk->nik", K, H)
    P = np.einsum("nij,njk,nlk->nil", IKH, Pbar, IKH) + np.einsum("nij,njk,nlk->nil", K, R, K)
    P = 0.5 * (P + np.swapaxes(P, 1, 2))
    return phi, P, K, OK


def gradient_update(xbar, H, innov, zeta, mask):
    """phi = xbar + 2 zeta mask * H^T innov; returns (phi, K)."""
    K = (2.0 * zeta) * np.swapaxes(H, 1, 2) * mask[:, :, None]
    phi = xbar + np.einsum("nij,nj->ni", K, innov)
    return phi, K


def combine(indptr, indices, data, phi):
    """Row-wise convex combination x_i = sum_j c_ij phi_j with C in CSR form."""
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    out = np.zeros((n, phi.shape[1]))
    np.add.at(out, rows, data[:, None] * phi[indices])
    return out


def tanh_observe(X, Z):
    """Return (tanh(Z_i x_i), (1 - tanh^2) Z_i) per agent."""
    t = np.tanh(np.einsum("nmd,nd->nm", Z, X))
    return t, (1.0 - t * t)[:, :, None] * Z
