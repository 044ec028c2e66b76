"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` take over. Setting the environment
variable ``LGRNET_PURE_PYTHON=1`` forces the fallback.
"""

import os

from lgrnet import _pykernels

AGG_INTERPOLATION = _pykernels.AGG_INTERPOLATION
AGG_AVG_POOL = _pykernels.AGG_AVG_POOL
AGG_NEAREST = _pykernels.AGG_NEAREST
METRIC_CHEBYSHEV = _pykernels.METRIC_CHEBYSHEV
METRIC_EUCLIDEAN = _pykernels.METRIC_EUCLIDEAN


def _load_compiled():
    if os.environ.get("LGRNET_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from lgrnet import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"
_active = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the kernel module named ``name`` (default: the active one)."""
    if name is None:
        return _active
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}")


def set_backend(name):
    """Switch the active backend; returns the previous name."""
    global _active, BACKEND
    prev = BACKEND
    _active = get_backend(name)
    BACKEND = name
    return prev
