"""Kernel dispatch: the compiled extension when it was built, numpy otherwise.

Set ``SPARSEVID_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("SPARSEVID_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

policy_logp = _impl.policy_logp
surrogate_grad = _impl.surrogate_grad
discounted_return = _impl.discounted_return

__all__ = ["BACKEND", "policy_logp", "surrogate_grad", "discounted_return"]
