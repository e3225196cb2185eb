"""Select the column-march kernel at import time.

Set ``HEATFLUX_EKS_PURE=1`` to force the numpy fallback.
"""
import os

from . import _march_py

pure_march_columns = _march_py.march_columns

try:
    if os.environ.get("HEATFLUX_EKS_PURE"):
        raise ImportError("pure mode requested")
    from ._march import march_columns as compiled_march_columns
except ImportError:
    compiled_march_columns = None

BACKEND = "cython" if compiled_march_columns is not None else "numpy"
