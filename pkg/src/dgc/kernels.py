"""Hot-kernel backend selection.

The compiled ``dgc._kernels`` extension is used when it imports; otherwise the
numpy fallback in ``dgc._fallback`` is used. ``DGC_PURE_PYTHON=1`` forces the
fallback. ``BACKEND`` names the active choice.
"""

import os

from . import _fallback

_NAMES = (
    "conv1d_cols",
    "conv1d_col2im",
    "conv2d_cols",
    "conv2d_col2im",
    "balanced_assign",
    "gaussian_affinity",
    "affinity_grad",
)

try:
    if os.environ.get("DGC_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"

conv1d_cols = _impl.conv1d_cols
conv1d_col2im = _impl.conv1d_col2im
conv2d_cols = _impl.conv2d_cols
conv2d_col2im = _impl.conv2d_col2im
balanced_assign = _impl.balanced_assign
gaussian_affinity = _impl.gaussian_affinity
affinity_grad = _impl.affinity_grad


def implementations():
    """Both backends keyed by name, for tests and benchmarks."""
    out = {"python": _fallback}
    try:
        from . import _kernels
        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
