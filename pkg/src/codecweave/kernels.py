"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``CODECWEAVE_PURE=1`` to force the numpy path.
"""
import os

from . import _kernels_py

_names = ("softmax_xent", "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
          "causal_softmax", "softmax_bwd", "scatter_add_rows", "adamw_update")

_impl = _kernels_py
BACKEND = "numpy"
if os.environ.get("CODECWEAVE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        pass

softmax_xent = _impl.softmax_xent
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
causal_softmax = _impl.causal_softmax
softmax_bwd = _impl.softmax_bwd
scatter_add_rows = _impl.scatter_add_rows
adamw_update = _impl.adamw_update

__all__ = ["BACKEND", *_names]
