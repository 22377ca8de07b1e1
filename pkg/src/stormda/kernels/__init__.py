"""Hot loops with a compiled implementation and a numpy fallback.

The compiled extension is used when it was built; set ``SDA_KERNELS=python``
to force the fallback or ``SDA_KERNELS=cython`` to require the extension.
"""
from __future__ import annotations

import importlib
import os

from . import _pykernels

_choice = os.environ.get("SDA_KERNELS", "auto").lower()
_compiled = None
if _choice != "python":
    try:
        _compiled = importlib.import_module("._ckernels", __name__)
    except ImportError:
        if _choice == "cython":
            raise
_impl = _compiled or _pykernels

BACKEND = "cython" if _compiled is not None else "python"
blend_accumulate = _impl.blend_accumulate
crps_ensemble = _impl.crps_ensemble


def available() -> dict:
    """Backend name -> module, for side-by-side benchmarks and tests."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
