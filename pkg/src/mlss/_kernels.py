"""Import-time selection of the filtering/smoothing kernel backend.

The compiled extension is preferred when present; setting the environment
variable ``MLSS_PURE_PYTHON=1`` (before import) forces the NumPy twin, which
is also the automatic fallback when the extension was not built.
"""
from __future__ import annotations

import os

from . import _filter_py

if os.environ.get("MLSS_PURE_PYTHON", "").strip() not in ("", "0"):
    backend = _filter_py
    BACKEND_NAME = "python"
else:
    try:
        from . import _filter_cy as backend  # type: ignore[no-redef]
        BACKEND_NAME = "cython"
    except ImportError:
        backend = _filter_py
        BACKEND_NAME = "python"


def active_backend():
    """Name of the kernel backend in use ('cython' or 'python')."""
    return BACKEND_NAME
