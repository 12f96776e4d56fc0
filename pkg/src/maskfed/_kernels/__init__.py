"""Kernel backend selection.

The compiled extension (_core, built from _core.pyx) provides the hot
fused kernels; py_impl is the NumPy fallback with identical semantics.
Selection happens once at import: MASKFED_KERNELS=py forces the fallback,
=cy requires the extension, =auto (default) prefers the extension when it
imported cleanly. benchmarks/bench_kernels.py compares the two.
"""

import os

from . import py_impl

try:
    from . import _core as cy_impl
except ImportError:
    cy_impl = None


def _select(choice):
    if choice == "py":
        return py_impl
    if choice == "cy":
        if cy_impl is None:
            raise ImportError(
                "MASKFED_KERNELS=cy but the compiled kernel extension is not "
                "available; reinstall with a C compiler or use =py/=auto"
            )
        return cy_impl
    if choice == "auto":
        return cy_impl if cy_impl is not None else py_impl
    raise ValueError(f"MASKFED_KERNELS must be auto|py|cy, got {choice!r}")


_impl = _select(os.environ.get("MASKFED_KERNELS", "auto"))


def impl():
    """Active kernel backend module."""
    return _impl


def backend_name() -> str:
    return _impl.NAME


def set_backend(name: str):
    """Switch backends at runtime (tests and benchmarks only)."""
    global _impl
    _impl = _select(name)
    return _impl
