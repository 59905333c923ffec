"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used. LSR_KERNELS=ext forces the extension (ImportError if it is
missing), LSR_KERNELS=py forces the fallback.
"""
import os

_choice = os.environ.get("LSR_KERNELS", "auto")
if _choice not in ("auto", "ext", "py"):
    raise RuntimeError(f"LSR_KERNELS must be auto, ext or py, got {_choice!r}")

if _choice == "py":
    from . import numpy_impl as _impl

    BACKEND = "py"
else:
    try:
        from . import _ext as _impl  # type: ignore[no-redef]

        BACKEND = "ext"
    except ImportError:
        if _choice == "ext":
            raise
        from . import numpy_impl as _impl  # type: ignore[no-redef]

        BACKEND = "py"

splitmix64_array = _impl.splitmix64_array
hash_ids = _impl.hash_ids
row_indices_batch = _impl.row_indices_batch
gather_sum = _impl.gather_sum
scatter_add_multi = _impl.scatter_add_multi
scatter_add = _impl.scatter_add
softmax_xent_grad = _impl.softmax_xent_grad
rank_nll = _impl.rank_nll
attn_softmax_fwd = _impl.attn_softmax_fwd
attn_softmax_bwd = _impl.attn_softmax_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
ln_fwd = _impl.ln_fwd
ln_bwd = _impl.ln_bwd
dropout_fwd = _impl.dropout_fwd
dropout_bwd = _impl.dropout_bwd
