"""Quantization kernel backends.

Two interchangeable implementations of the hot inner loops:

* ``reference`` -- pure numpy, always available
* ``accel``     -- numba @njit, used by default when numba imports

Selection: the ``UPQ_BACKEND`` environment variable (``auto`` / ``numba`` /
``numpy``), or :func:`set_backend` at runtime.  Both backends are bit-identical
(see tests/test_quant_kernels.py); ``benchmarks/bench_kernels.py`` compares
their throughput.
"""

from __future__ import annotations

import os

from . import reference

_KERNEL_NAMES = (
    "seq_forward",
    "seq_backward",
    "flexround_forward",
    "flexround_backward",
    "int4_forward",
    "int4_backward",
    "bin_count_int2",
)

_backend_name = "numpy"
_impl = reference


def _load_accel():
    from . import accel  # deferred: importing numba is slow

    return accel


def set_backend(name: str) -> None:
    """Select the kernel backend: 'numba', 'numpy', or 'auto'."""
    global _backend_name, _impl
    if name == "numpy":
        _impl, _backend_name = reference, "numpy"
    elif name == "numba":
        _impl, _backend_name = _load_accel(), "numba"
    elif name == "auto":
        try:
            _impl, _backend_name = _load_accel(), "numba"
        except ImportError:
            _impl, _backend_name = reference, "numpy"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def get_backend() -> str:
    return _backend_name


def __getattr__(name: str):
    if name in _KERNEL_NAMES:
        return getattr(_impl, name)
    raise AttributeError(name)


set_backend(os.environ.get("UPQ_BACKEND", "auto"))
