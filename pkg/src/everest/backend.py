"""Kernel backend selection.

Two interchangeable kernel sets exist: the compiled extension
(``everest._ckernels``, built from Cython) and the numpy fallback
(``everest._kernels_py``). One of them is selected once at import time:

* ``EVEREST_BACKEND=c``       force the compiled kernels (ImportError if absent)
* ``EVEREST_BACKEND=python``  force the numpy kernels
* unset / ``auto``            compiled if available, else numpy

Callers must go through this module's attributes (``backend.softmax_fwd``)
rather than ``from``-importing the functions, so that :func:`use` can rebind
the backend for benchmarks and parity tests.
"""

import os

from . import _kernels_py

_KERNELS = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "adamw_update",
)

# Kernels the compiled backend actually takes from the extension. softmax
# and the AdamW update stay on numpy even under 'c': numpy's SIMD exp and
# memory-bound fused array ops beat a scalar C loop at every size this
# package touches (measured in benchmarks/bench_backends.py).
_C_PREFERRED = ("layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd")

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_name = None


def available():
    """Names of the backends usable in this process."""
    return ("c", "python") if _ckernels is not None else ("python",)


def use(name):
    """Bind the named backend ('c' or 'python') for the whole process."""
    global _name
    if name == "c":
        if _ckernels is None:
            raise ImportError(
                "compiled kernels requested (EVEREST_BACKEND=c) but "
                "everest._ckernels is not built"
            )
        for fn in _KERNELS:
            impl = _ckernels if fn in _C_PREFERRED else _kernels_py
            globals()[fn] = getattr(impl, fn)
    elif name == "python":
        for fn in _KERNELS:
            globals()[fn] = getattr(_kernels_py, fn)
    else:
        raise ValueError(f"unknown backend {name!r}")
    _name = name
    return name


def backend_name():
    return _name


_env = os.environ.get("EVEREST_BACKEND", "auto").lower()
if _env == "auto":
    use("c" if _ckernels is not None else "python")
else:
    use(_env)
