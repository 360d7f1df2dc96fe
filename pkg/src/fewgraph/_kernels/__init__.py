"""Kernel backend selection.

The compiled extension is used when it built successfully; otherwise the
numpy fallback takes over. `FEWGRAPH_BACKEND=numpy|compiled` forces a
choice (forcing `compiled` raises if the extension is missing).
"""

from __future__ import annotations

import os

from . import _ops_np

_forced = os.environ.get("FEWGRAPH_BACKEND", "").strip().lower()

_compiled = None
if _forced != "numpy":
    try:
        from . import _ops_cy as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

if _forced == "compiled" and _compiled is None:
    raise ImportError(
        "FEWGRAPH_BACKEND=compiled but the fewgraph._kernels._ops_cy "
        "extension is not built; reinstall the package or drop the override"
    )

if _compiled is not None:
    BACKEND = "compiled"
    pairwise_sqdist = _compiled.pairwise_sqdist
    pairwise_diffs = _compiled.pairwise_diffs
    edge_mlp_forward = _compiled.edge_mlp_forward
else:
    BACKEND = "numpy"
    pairwise_sqdist = _ops_np.pairwise_sqdist
    pairwise_diffs = _ops_np.pairwise_diffs
    edge_mlp_forward = _ops_np.edge_mlp_forward

__all__ = ["BACKEND", "pairwise_sqdist", "pairwise_diffs", "edge_mlp_forward"]
