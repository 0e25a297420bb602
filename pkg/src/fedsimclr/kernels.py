"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy versions
are used. Set ``FEDSIMCLR_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("FEDSIMCLR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

cosine_infonce = _impl.cosine_infonce
infonce_table_terms = _impl.infonce_table_terms
