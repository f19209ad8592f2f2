"""Backend selection for the hot numerical kernels.

The compiled Cython module is used when it imports cleanly; otherwise the
NumPy versions in ``_pykernels`` are used. Set ``DPNSUM_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels as python_backend

try:
    if os.environ.get("DPNSUM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = python_backend
    BACKEND = "python"

nsum_loglik_grad = _impl.nsum_loglik_grad
corr_cholesky = _impl.corr_cholesky
corr_cholesky_grad = _impl.corr_cholesky_grad


def compiled_backend():
    """Return the compiled module, or ``None`` if it was not built."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


__all__ = ["BACKEND", "nsum_loglik_grad", "corr_cholesky", "corr_cholesky_grad",
           "compiled_backend", "python_backend"]
