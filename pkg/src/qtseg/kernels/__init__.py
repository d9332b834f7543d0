"""Patch kernels (im2col/col2im, window max) with a compiled fast path.

The Cython extension is used when it was built; otherwise the numpy versions
in ``_pykernels`` take over. Set ``QTSEG_KERNELS=python`` to force the
fallback, or call :func:`use_backend` at runtime.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend '{name}' unavailable; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


BACKEND = "python"
_impl = _pykernels
if os.environ.get("QTSEG_KERNELS", "").lower() != "python" and _ckernels is not None:
    use_backend("cython")


def im2col(xp, k, s, ho, wo):
    return _impl.im2col(xp, k, s, ho, wo)


def col2im(cols, hp, wp, k, s, ho, wo):
    return _impl.col2im(cols, hp, wp, k, s, ho, wo)


def maxpool_forward(xp, k, s, ho, wo):
    return _impl.maxpool_forward(xp, k, s, ho, wo)


def maxpool_backward(g, idx, hp, wp, k, s):
    return _impl.maxpool_backward(g, idx, hp, wp, k, s)
