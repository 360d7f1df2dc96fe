"""Sample-level graph network.

Builds a fully connected graph over episode embeddings where each directed
edge weight is a learned scalar in [0, 1] produced from the pair's
difference vector, aggregates neighbours into refined class features
(p_c = mean_i(z_i + sum_j e_ij z_j)), and scores the episode with a
squared-distance triplet loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops, seeding
from ._kernels import edge_mlp_forward, pairwise_diffs, pairwise_sqdist
from .errors import (
    ConfigError,
    DimensionMismatch,
    IoError,
    NoValidTriplet,
    UnevenClassSizes,
)

MINING_POLICIES = ("all-triplets", "batch-hard")


@dataclass
class EdgeEncoderParams:
    """Two affine-normalize-rectify blocks and a sigmoid-squashed scalar head.

    Normalization is per difference vector, keeping every edge weight a pure
    function of its own pair. `clamp_zero` short-circuits the encoder to 0
    for the ablation that reduces aggregation to a plain class mean.
    """

    w1: np.ndarray
    b1: np.ndarray
    g1: np.ndarray
    be1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    g2: np.ndarray
    be2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray  # shape (1,)
    clamp_zero: bool = False

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("w1", self.w1), ("b1", self.b1), ("g1", self.g1), ("be1", self.be1),
            ("w2", self.w2), ("b2", self.b2), ("g2", self.g2), ("be2", self.be2),
            ("w3", self.w3), ("b3", self.b3),
        ]

    def copy(self) -> "EdgeEncoderParams":
        return EdgeEncoderParams(*(a.copy() for _, a in self.arrays()), clamp_zero=self.clamp_zero)

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for _, a in self.arrays()]


def init_edge_encoder(
    dim: int, hidden: int, seed: int, clamp_zero: bool = False, head_bias: float = -1.0
) -> EdgeEncoderParams:
    """Seeded init; the negative head bias keeps fresh edges moderate (around
    0.27) so aggregation starts gentle while sigmoid gradients stay alive."""
    rng = seeding.derive_rng(seed, seeding.INIT_EDGE)

    def fan_in(n_in, shape):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, size=shape)

    return EdgeEncoderParams(
        w1=fan_in(dim, (dim, hidden)),
        b1=fan_in(dim, (hidden,)),
        g1=np.ones(hidden),
        be1=np.zeros(hidden),
        w2=fan_in(hidden, (hidden, hidden)),
        b2=fan_in(hidden, (hidden,)),
        g2=np.ones(hidden),
        be2=np.zeros(hidden),
        w3=fan_in(hidden, (hidden,)),
        b3=np.array([head_bias]),
        clamp_zero=clamp_zero,
    )


@dataclass
class SampleGraph:
    """Fully connected graph over one episode's embeddings."""

    nodes: np.ndarray  # (n, d)
    edges: np.ndarray  # (n, n), entries in [0, 1]
    labels: np.ndarray  # (n,)


@dataclass
class RefinedClassFeature:
    label: int
    values: np.ndarray


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.5
    mining: str = "batch-hard"

    def validate(self) -> None:
        if self.margin < 0:
            raise ConfigError("triplet margin must be >= 0")
        if self.mining not in MINING_POLICIES:
            raise ConfigError(f"mining must be one of {MINING_POLICIES}")


def _edge_forward(params: EdgeEncoderParams, diffs: np.ndarray):
    """Edge weights for a stack of difference vectors; returns (e, cache)."""
    if params.clamp_zero:
        return np.zeros(diffs.shape[0]), None
    e, xhat1, istd1, h1, xhat2, istd2, h2 = edge_mlp_forward(
        diffs, params.w1, params.b1, params.g1, params.be1,
        params.w2, params.b2, params.g2, params.be2, params.w3, params.b3,
    )
    return e, (diffs, xhat1, istd1, h1, xhat2, istd2, h2, e)


def _edge_backward(params: EdgeEncoderParams, cache, de: np.ndarray):
    """Returns (d_diffs, grads ordered like EdgeEncoderParams.arrays())."""
    if params.clamp_zero:
        raise ValueError("no gradients flow through a clamped encoder")
    x0, xhat1, istd1, h1, xhat2, istd2, h2, e = cache
    ds = de * e * (1.0 - e)
    dh2 = np.outer(ds, params.w3)
    dw3 = h2.T @ ds
    db3 = np.array([ds.sum()])
    dl2 = dh2 * (h2 > 0)
    da2, dg2, dbe2 = nnops.layer_norm_backward((xhat2, istd2), params.g2, dl2)
    dh1 = da2 @ params.w2.T
    dw2 = h1.T @ da2
    db2 = da2.sum(axis=0)
    dl1 = dh1 * (h1 > 0)
    da1, dg1, dbe1 = nnops.layer_norm_backward((xhat1, istd1), params.g1, dl1)
    dx0 = da1 @ params.w1.T
    dw1 = x0.T @ da1
    db1 = da1.sum(axis=0)
    return dx0, [dw1, db1, dg1, dbe1, dw2, db2, dg2, dbe2, dw3, db3]


def edge_encode(params: EdgeEncoderParams, z_i: np.ndarray, z_j: np.ndarray) -> float:
    """Scalar edge weight in [0, 1] for the pair (z_i, z_j)."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape or z_i.ndim != 1 or z_i.size != params.input_dim:
        raise DimensionMismatch(
            f"edge encoder expects two vectors of length {params.input_dim}"
        )
    e, _ = _edge_forward(params, (z_i - z_j)[None, :])
    return float(e[0])


def build_sample_graph(
    params: EdgeEncoderParams, embeddings: np.ndarray, labels
) -> SampleGraph:
    """Dense directed edge matrix over all node pairs, diagonal included."""
    z = np.ascontiguousarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DimensionMismatch("graph needs a (n >= 2, d) embedding matrix")
    if z.shape[1] != params.input_dim:
        raise DimensionMismatch(
            f"embeddings have dim {z.shape[1]}, encoder expects {params.input_dim}"
        )
    n = z.shape[0]
    if params.clamp_zero:
        edges = np.zeros((n, n))
    else:
        e, _ = _edge_forward(params, pairwise_diffs(z))
        edges = e.reshape(n, n)
    return SampleGraph(nodes=z, edges=edges, labels=y)


def _class_index(labels: np.ndarray):
    order = np.unique(labels)
    groups = [np.flatnonzero(labels == c) for c in order]
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise UnevenClassSizes(f"class sizes differ: { {int(c): len(g) for c, g in zip(order, groups)} }")
    return order, groups


def refine_forward(params: EdgeEncoderParams, nodes: np.ndarray, labels: np.ndarray, rounds: int):
    """Aggregation rounds ending in a per-class average.

    Each round recomputes edges from the current node features and maps
    z_i <- z_i + sum_j e_ij z_j; the class average is applied once, after
    the final round. Returns (class_features, class_labels, cache).
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    order, groups = _class_index(labels)
    z = np.ascontiguousarray(nodes, dtype=np.float64)
    steps = []
    agg = None
    for _ in range(rounds):
        n = z.shape[0]
        if params.clamp_zero:
            e_cache = None
            edges = np.zeros((n, n))
        else:
            e, e_cache = _edge_forward(params, pairwise_diffs(z))
            edges = e.reshape(n, n)
        agg = z + edges @ z
        steps.append((z, edges, e_cache))
        z = agg
    feats = np.stack([agg[g].mean(axis=0) for g in groups])
    return feats, order, (steps, groups)


def refine_backward(params: EdgeEncoderParams, cache, dfeats: np.ndarray):
    """Returns (dnodes, dparams) for the given class-feature gradient."""
    steps, groups = cache
    n = steps[-1][0].shape[0]
    d_agg = np.zeros((n, steps[-1][0].shape[1]))
    for g, df in zip(groups, dfeats):
        d_agg[g] = df / len(g)
    dparams = params.zero_grads()
    dz = None
    for z, edges, e_cache in reversed(steps):
        dz = d_agg + edges.T @ d_agg
        if e_cache is not None:
            de = (d_agg @ z.T).reshape(-1)
            dx0, grads = _edge_backward(params, e_cache, de)
            for acc, g_ in zip(dparams, grads):
                acc += g_
            gmat = dx0.reshape(n, n, -1)
            dz += gmat.sum(axis=1) - gmat.sum(axis=0)
        d_agg = dz
    return dz, dparams


def refine_class_features(
    params: EdgeEncoderParams, graph: SampleGraph, rounds: int = 1
) -> list[RefinedClassFeature]:
    """Refined class-level features from a sample graph."""
    feats, order, _ = refine_forward(params, graph.nodes, graph.labels, rounds)
    return [RefinedClassFeature(int(c), feats[i]) for i, c in enumerate(order)]


def _triplet_masks(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    return pos, neg


def triplet_loss_and_grad(embeddings: np.ndarray, labels, config: TripletConfig):
    """Mean hinge over mined triplets and its embedding gradient.

    Distances are squared euclidean; the hinge subgradient at the kink is 0.
    """
    config.validate()
    z = np.ascontiguousarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pos, neg = _triplet_masks(y)
    if not (pos.any(axis=1) & neg.any(axis=1)).any():
        raise NoValidTriplet("need an anchor with at least one positive and one negative")
    dist = pairwise_sqdist(z)
    d_dist = np.zeros_like(dist)

    if config.mining == "all-triplets":
        arg = dist[:, :, None] - dist[:, None, :] + config.margin
        valid = pos[:, :, None] & neg[:, None, :]
        active = valid & (arg > 0)
        count = int(valid.sum())
        loss = float(arg[active].sum() / count)
        d_dist += active.sum(axis=2) / count
        d_dist -= active.sum(axis=1) / count
    else:  # batch-hard
        anchors = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
        pos_d = np.where(pos, dist, -np.inf)
        neg_d = np.where(neg, dist, np.inf)
        hardest_pos = pos_d[anchors].argmax(axis=1)
        hardest_neg = neg_d[anchors].argmin(axis=1)
        arg = dist[anchors, hardest_pos] - dist[anchors, hardest_neg] + config.margin
        active = arg > 0
        loss = float(np.maximum(arg, 0.0).mean())
        w = 1.0 / len(anchors)
        for a, p, q, act in zip(anchors, hardest_pos, hardest_neg, active):
            if act:
                d_dist[a, p] += w
                d_dist[a, q] -= w

    s = d_dist + d_dist.T
    dz = 2.0 * (s.sum(axis=1)[:, None] * z - s @ z)
    return loss, dz


def triplet_loss(embeddings: np.ndarray, labels, config: TripletConfig) -> float:
    loss, _ = triplet_loss_and_grad(embeddings, labels, config)
    return loss


def write_adjacency(graph: SampleGraph, path: str) -> None:
    """Debug dump: one `i j weight` line per directed edge, 6 decimals."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            n = graph.edges.shape[0]
            for i in range(n):
                for j in range(n):
                    fh.write(f"{i} {j} {graph.edges[i, j]:.6f}\n")
    except OSError as exc:
        raise IoError(f"cannot write adjacency dump {path!r}: {exc}") from exc
