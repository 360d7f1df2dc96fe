"""Pure-numpy implementations of the hot graph kernels.

Semantics and cache layout are shared with the compiled backend in
`_ops_cy.pyx`; the two are interchangeable (see tests/test_kernels.py).
"""

from __future__ import annotations

import numpy as np

from ..nnops import layer_norm, relu, sigmoid


def pairwise_sqdist(z: np.ndarray) -> np.ndarray:
    """Squared euclidean distance between every pair of rows."""
    diff = z[:, None, :] - z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pairwise_diffs(z: np.ndarray) -> np.ndarray:
    """Row-major stack of z[i] - z[j] for every ordered pair (i, j)."""
    n, d = z.shape
    return (z[:, None, :] - z[None, :, :]).reshape(n * n, d)


def edge_mlp_forward(x0, w1, b1, g1, be1, w2, b2, g2, be2, w3, b3):
    """Two affine-normalize-rectify blocks plus a sigmoid-squashed scalar head.

    x0 holds one difference vector per row. Returns the edge weights and the
    intermediates the shared backward pass consumes:
    (e, xhat1, istd1, h1, xhat2, istd2, h2).
    """
    a1 = x0 @ w1 + b1
    l1, (xhat1, istd1) = layer_norm(a1, g1, be1)
    h1 = relu(l1)
    a2 = h1 @ w2 + b2
    l2, (xhat2, istd2) = layer_norm(a2, g2, be2)
    h2 = relu(l2)
    e = sigmoid(h2 @ w3 + b3)
    return e, xhat1, istd1, h1, xhat2, istd2, h2
