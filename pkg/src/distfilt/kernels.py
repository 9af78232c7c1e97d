"""Backend selection for the per-step network kernels.

The compiled ``_core`` extension is used when it imports; otherwise, or when
``DISTFILT_PURE_PYTHON=1`` is set, the numpy versions are used.  Both expose
the same functions; ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _kernels_py
from .errors import SingularInnovationCovariance

_core = None
if os.environ.get("DISTFILT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        _core = None

BACKEND = "compiled" if _core is not None else "python"


def available_backends():
    names = ["python"]
    if _core is not None or _try_core() is not None:
        names.append("compiled")
    return names


def _try_core():
    try:
        from . import _core as core  # type: ignore[attr-defined]
    except ImportError:
        return None
    return core


def get_backend(name=None):
    """Module implementing the kernels: ``'compiled'``, ``'python'`` or the default."""
    if name is None:
        name = BACKEND
    if name == "python":
        return _kernels_py
    if name == "compiled":
        core = _core or _try_core()
        if core is None:
            raise ImportError("compiled kernels are not built; run `python setup.py build_ext --inplace`")
        return core
    raise ValueError(f"unknown backend {name!r}")


_impl = get_backend()


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def predict_covariance(A, P, Q, backend=None):
    impl = get_backend(backend) if backend else _impl
    return impl.predict_covariance(_c(A), _c(P), _c(Q))


def ekf_update(xbar, Pbar, H, innov, R, mask, backend=None):
    impl = get_backend(backend) if backend else _impl
    phi, P, K, status = impl.ekf_update(_c(xbar), _c(Pbar), _c(H), _c(innov), _c(R), _c(mask))
    if status != _kernels_py.OK:
        raise SingularInnovationCovariance("innovation covariance is not positive definite")
    return phi, P, K


def gradient_update(xbar, H, innov, zeta, mask, backend=None):
    impl = get_backend(backend) if backend else _impl
    return impl.gradient_update(_c(xbar), _c(H), _c(innov), float(zeta), _c(mask))


def combine(csr, phi, backend=None):
    """x_i = sum_j C[i, j] phi_j for a scipy CSR matrix ``csr``."""
    impl = get_backend(backend) if backend else _impl
    if impl is _kernels_py:
        return np.asarray(csr @ _c(phi))
    return impl.combine(
        csr.indptr.astype(np.int32), csr.indices.astype(np.int32), _c(csr.data), _c(phi)
    )


def tanh_observe(X, Z, backend=None):
    impl = get_backend(backend) if backend else _impl
    return impl.tanh_observe(_c(X), _c(Z))
