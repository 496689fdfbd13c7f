"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback. Setting ``SAFEMPC_PURE_PYTHON=1`` forces the fallback.
"""

import os

from safempc import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SAFEMPC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from safempc import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

ratio_test = _impl.ratio_test
bellman_sweep = _impl.bellman_sweep
chain_stay = _impl.chain_stay
worst_rollout_attracted = _impl.worst_rollout_attracted
