"""Select the compiled tree kernels when built, else the numpy fallback.

Set ``DORL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _trees_py as fallback

compiled = None
if os.environ.get("DORL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _trees as compiled
    except ImportError:
        compiled = None

backend = compiled if compiled is not None else fallback
BACKEND_NAME = "cython" if compiled is not None else "numpy"

gini_best_split = backend.gini_best_split
newton_best_split = backend.newton_best_split
apply_tree = backend.apply_tree
