"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``INTACTLAB_PURE=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("INTACTLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _fallback

matmul = _impl.matmul
quantize_groups = _impl.quantize_groups
dequantize_groups = _impl.dequantize_groups
