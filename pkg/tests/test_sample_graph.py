"""Sample-level graph: edges, refinement, triplet loss."""

import numpy as np
import pytest

from fewgraph.errors import (
    ConfigError,
    DimensionMismatch,
    NoValidTriplet,
    UnevenClassSizes,
)
from fewgraph.nnops import LN_EPS
from fewgraph.sample_graph import (
    EdgeEncoderParams,
    SampleGraph,
    TripletConfig,
    build_sample_graph,
    edge_encode,
    init_edge_encoder,
    refine_class_features,
    refine_forward,
    triplet_loss,
    write_adjacency,
)


def params(dim=4, hidden=6, seed=3, head_bias=-0.5, clamp=False):
    return init_edge_encoder(dim, hidden, seed=seed, head_bias=head_bias, clamp_zero=clamp)


def reference_edge(p: EdgeEncoderParams, zi, zj):
    """Independent re-statement of the encoder: two affine-normalize-rectify
    blocks and a squashed scalar head, written long-hand."""
    x = np.asarray(zi, dtype=float) - np.asarray(zj, dtype=float)

    def block(v, w, b, g, be):
        a = v @ w + b
        mu = a.mean()
        var = ((a - mu) ** 2).mean()
        xhat = (a - mu) / np.sqrt(var + LN_EPS)
        return np.maximum(g * xhat + be, 0.0)

    h1 = block(x, p.w1, p.b1, p.g1, p.be1)
    h2 = block(h1, p.w2, p.b2, p.g2, p.be2)
    s = float(h2 @ p.w3 + p.b3[0])
    return 1.0 / (1.0 + np.exp(-s))


class TestEdgeEncode:
    def test_identical_pairs_share_one_weight(self, rng):
        p = params()
        zs = rng.normal(size=(5, 4))
        values = {edge_encode(p, z, z) for z in zs}
        assert len(values) == 1

    def test_purity(self, rng):
        p = params()
        zi, zj = rng.normal(size=4), rng.normal(size=4)
        assert edge_encode(p, zi, zj) == edge_encode(p, zi, zj)

    def test_matches_long_hand_formula_and_asymmetry(self, rng):
        p = params()
        zi, zj = rng.normal(size=4), rng.normal(size=4)
        forward = edge_encode(p, zi, zj)
        backward = edge_encode(p, zj, zi)
        assert forward == pytest.approx(reference_edge(p, zi, zj), abs=1e-12)
        assert backward == pytest.approx(reference_edge(p, zj, zi), abs=1e-12)
        assert 0.0 <= forward <= 1.0 and 0.0 <= backward <= 1.0

    def test_range_over_many_pairs(self, rng):
        p = params()
        z = rng.normal(size=(10_000, 2, 4)) * 5.0
        values = np.array([edge_encode(p, a, b) for a, b in z[:50]])
        assert np.all((values >= 0.0) & (values <= 1.0))
        # vectorized sweep for the full 10^4 sample
        from fewgraph.sample_graph import _edge_forward

        diffs = z[:, 0, :] - z[:, 1, :]
        e, _ = _edge_forward(p, np.ascontiguousarray(diffs))
        assert np.all((e >= 0.0) & (e <= 1.0))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            edge_encode(params(), rng.normal(size=4), rng.normal(size=5))


class TestBuildSampleGraph:
    def test_shape_and_range(self, rng):
        g = build_sample_graph(params(), rng.normal(size=(3, 4)), [0, 0, 1])
        assert g.edges.shape == (3, 3)
        assert np.all((g.edges >= 0) & (g.edges <= 1))

    def test_identical_embeddings_give_constant_matrix(self):
        z = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (4, 1))
        g = build_sample_graph(params(), z, [0, 0, 1, 1])
        assert len(np.unique(g.edges)) == 1

    def test_episode_matches_pairwise_oracle(self, rng):
        p = params()
        z = rng.normal(size=(25, 4))
        y = np.repeat(np.arange(5), 5)
        g = build_sample_graph(p, z, y)
        for i in range(25):
            for j in range(25):
                assert g.edges[i, j] == pytest.approx(edge_encode(p, z[i], z[j]), abs=1e-12)

    def test_needs_two_nodes(self, rng):
        with pytest.raises(DimensionMismatch):
            build_sample_graph(params(), rng.normal(size=(1, 4)), [0])


class TestRefineClassFeatures:
    def test_clamped_edges_collapse_to_class_mean(self, rng):
        p = params(clamp=True)
        z = rng.normal(size=(6, 4))
        y = np.array([0, 0, 0, 1, 1, 1])
        g = build_sample_graph(p, z, y)
        feats = refine_class_features(p, g, rounds=1)
        for f in feats:
            assert np.allclose(f.values, z[y == f.label].mean(axis=0), atol=1e-12)

    def test_single_node_self_edge(self, rng):
        p = params()
        z = rng.normal(size=(1, 4))
        w = edge_encode(p, z[0], z[0])
        g = SampleGraph(nodes=z, edges=np.array([[w]]), labels=np.array([0]))
        feats = refine_class_features(p, g, rounds=1)
        assert np.allclose(feats[0].values, (1.0 + w) * z[0], atol=1e-12)

    def test_within_class_permutation_invariance(self, rng):
        p = params()
        z = rng.normal(size=(8, 4))
        y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        base = refine_forward(p, z, y, rounds=2)[0]
        perm = np.array([3, 1, 0, 2, 6, 7, 4, 5])  # permutes within classes
        permuted = refine_forward(p, z[perm], y[perm], rounds=2)[0]
        assert np.allclose(base, permuted, atol=1e-10)

    def test_multi_round_recursion_matches_manual_unroll(self, rng):
        p = params()
        z = rng.normal(size=(4, 4))
        y = np.array([0, 0, 1, 1])

        def encode_matrix(nodes):
            n = len(nodes)
            return np.array([[edge_encode(p, nodes[i], nodes[j]) for j in range(n)] for i in range(n)])

        z1 = z + encode_matrix(z) @ z
        agg2 = z1 + encode_matrix(z1) @ z1
        expect = np.stack([agg2[y == c].mean(axis=0) for c in (0, 1)])
        got = refine_forward(p, z, y, rounds=2)[0]
        assert np.allclose(got, expect, atol=1e-10)

    def test_uneven_class_sizes_rejected(self, rng):
        p = params()
        z = rng.normal(size=(5, 4))
        with pytest.raises(UnevenClassSizes):
            refine_forward(p, z, np.array([0, 0, 0, 1, 1]), rounds=1)

    def test_rounds_must_be_positive(self, rng):
        p = params()
        z = rng.normal(size=(4, 4))
        with pytest.raises(ConfigError):
            refine_forward(p, z, np.array([0, 0, 1, 1]), rounds=0)


class TestTripletLoss:
    def test_hand_computed_hinge(self):
        # anchor == positive, squared negative distance 0.25, margin 0.5
        z = np.array([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0]])
        y = np.array([0, 0, 1])
        for mining in ("all-triplets", "batch-hard"):
            loss = triplet_loss(z, y, TripletConfig(margin=0.5, mining=mining))
            assert loss == pytest.approx(0.25, abs=1e-12)

    def test_separated_clusters_zero_loss(self):
        z = np.vstack([np.zeros((3, 2)), np.full((3, 2), 10.0)])
        y = np.array([0, 0, 0, 1, 1, 1])
        assert triplet_loss(z, y, TripletConfig(margin=0.5)) == 0.0

    def test_zero_margin_with_correct_ordering(self, rng):
        z = np.vstack([rng.normal(size=(3, 2)) * 0.1, rng.normal(size=(3, 2)) * 0.1 + 5.0])
        y = np.array([0, 0, 0, 1, 1, 1])
        for mining in ("all-triplets", "batch-hard"):
            assert triplet_loss(z, y, TripletConfig(margin=0.0, mining=mining)) == 0.0

    def test_non_negative_for_random_inputs(self, rng):
        for _ in range(200):
            z = rng.normal(size=(8, 3))
            y = rng.integers(0, 3, size=8)
            if len(set(y.tolist())) < 2:
                continue
            counts = {c: (y == c).sum() for c in set(y.tolist())}
            if max(counts.values()) < 2:
                continue
            for mining in ("all-triplets", "batch-hard"):
                assert triplet_loss(z, y, TripletConfig(0.3, mining)) >= 0.0

    def test_monotone_in_margin(self, rng):
        z = rng.normal(size=(9, 4))
        y = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
        for mining in ("all-triplets", "batch-hard"):
            losses = [triplet_loss(z, y, TripletConfig(m, mining)) for m in (0.1, 0.5, 1.5)]
            assert losses[0] <= losses[1] <= losses[2]

    def test_no_valid_triplet(self):
        z = np.eye(3)
        with pytest.raises(NoValidTriplet):
            triplet_loss(z, np.array([0, 1, 2]), TripletConfig(0.5))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TripletConfig(margin=-0.1).validate()
        with pytest.raises(ConfigError):
            TripletConfig(mining="hardest").validate()


class TestAdjacencyDump:
    def test_format(self, tmp_path, rng):
        g = build_sample_graph(params(), rng.normal(size=(3, 4)), [0, 0, 1])
        path = str(tmp_path / "adj.txt")
        write_adjacency(g, path)
        lines = open(path).read().strip().split("\n")
        assert len(lines) == 9
        i, j, w = lines[5].split()
        assert (int(i), int(j)) == (1, 2)
        assert float(w) == pytest.approx(g.edges[1, 2], abs=5e-7)
