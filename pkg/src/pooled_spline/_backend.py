"""Select the compiled stratum kernel when available.

Set ``POOLED_SPLINE_BACKEND=python`` to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
clogit_strata = _pykernels.clogit_strata

if os.environ.get("POOLED_SPLINE_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        clogit_strata = _ckernels.clogit_strata


def get_kernel(name=None):
    """Return ``clogit_strata`` for backend ``name`` ('cython', 'python' or None)."""
    if name is None:
        return clogit_strata
    if name == "python":
        return _pykernels.clogit_strata
    if name == "cython":
        from . import _ckernels
        return _ckernels.clogit_strata
    raise ValueError(f"unknown backend {name!r}")
