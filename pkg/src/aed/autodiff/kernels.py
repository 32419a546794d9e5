"""Kernel backend selection.

The compiled extension is preferred; set ``AED_KERNELS=python`` to force the
numpy fallback (the fallback is also used if the extension failed to build).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load() -> ModuleType:
    if os.environ.get("AED_KERNELS", "").lower() == "python":
        return _pykernels
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels
    return _ckernels


_impl = _load()


def backend() -> str:
    return _impl.BACKEND


def use(name: str) -> None:
    """Switch backend at runtime ("cython" or "python")."""
    global _impl
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def im2col(x, k):
    return _impl.im2col(x, k)


def col2im(dcols, channels, k):
    return _impl.col2im(dcols, channels, k)


def maxpool_fwd(x, pool):
    return _impl.maxpool_fwd(x, pool)


def maxpool_bwd(dout, idx, length):
    return _impl.maxpool_bwd(dout, idx, length)
