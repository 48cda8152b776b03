"""Kernel dispatch: compiled extension if importable, numpy fallback otherwise.

Set ``CATE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("CATE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

topk_indices = _impl.topk_indices
cosine_max_scores = _impl.cosine_max_scores
mann_whitney_auc = _impl.mann_whitney_auc

__all__ = ["BACKEND", "topk_indices", "cosine_max_scores", "mann_whitney_auc"]
