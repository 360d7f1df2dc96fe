"""Session-stream and episode-sampling contracts."""

import numpy as np
import pytest

from fewgraph.datasets import (
    LabeledDataset,
    load_directory_dataset,
    load_feature_csv,
    load_feature_npz,
    make_synthetic_reference,
    save_feature_csv,
    save_feature_npz,
)
from fewgraph.errors import (
    ConfigError,
    IndexOutOfRange,
    InsufficientClasses,
    InsufficientSamples,
)
from fewgraph.protocol import (
    ProtocolConfig,
    build_session_stream,
    cumulative_label_set,
    describe_stream,
    sample_episode,
)


def toy_dataset(classes=10, per_class=12, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for c in range(classes):
        for _ in range(per_class):
            samples.append((rng.normal(size=dim) + 3.0 * c, c))
    return LabeledDataset(samples)


def config(**kw):
    base = dict(base_class_count=4, n_way=2, k_shot=3, query_per_class=2,
                session_count=2, seed=7)
    base.update(kw)
    return ProtocolConfig(**base)


class TestBuildSessionStream:
    def test_covers_all_classes_disjointly(self):
        # 100 classes, base 60, eight 5-way sessions -> all 100 classes used
        ds = toy_dataset(classes=100, per_class=8, dim=2)
        cfg = config(base_class_count=60, n_way=5, k_shot=5, query_per_class=0,
                     session_count=8)
        stream = build_session_stream(ds, cfg)
        used = set()
        for a in range(len(stream.label_spaces)):
            for b in range(a + 1, len(stream.label_spaces)):
                assert not set(stream.label_spaces[a]) & set(stream.label_spaces[b])
            used |= set(stream.label_spaces[a])
        assert len(used) == 100
        assert all(len(space) == 5 for space in stream.label_spaces[1:])

    def test_ten_ten_way_sessions(self):
        ds = toy_dataset(classes=200, per_class=8, dim=2)
        cfg = config(base_class_count=100, n_way=10, k_shot=5, session_count=10)
        stream = build_session_stream(ds, cfg)
        assert len(stream.sessions) == 11
        assert all(len(space) == 10 for space in stream.label_spaces[1:])

    def test_base_only_stream(self):
        ds = toy_dataset(classes=10, per_class=10)
        cfg = config(base_class_count=10, session_count=0)
        stream = build_session_stream(ds, cfg)
        assert len(stream.sessions) == 1
        assert set(stream.test_sets[0].labels()) == set(stream.label_spaces[0])
        assert len(stream.label_spaces[0]) == 10

    def test_incremental_sessions_are_k_shot(self):
        stream = build_session_stream(toy_dataset(), config())
        for t in range(1, 3):
            session = stream.sessions[t]
            assert session.class_count == 2
            for label in session.labels():
                assert session.count_of(label) == 3

    def test_cumulative_test_sets(self):
        stream = build_session_stream(toy_dataset(), config())
        for t, test_set in enumerate(stream.test_sets):
            expect = set()
            for space in stream.label_spaces[: t + 1]:
                expect |= set(space)
            assert set(test_set.labels()) == expect

    def test_test_split_disjoint_from_train(self):
        stream = build_session_stream(toy_dataset(), config())
        train_ids = {id(p) for session in stream.sessions for p, _ in session.samples}
        test_ids = {id(p) for ts in stream.test_sets for p, _ in ts.samples}
        assert not train_ids & test_ids

    def test_explicit_test_dataset(self):
        train = toy_dataset(seed=0)
        test = toy_dataset(per_class=3, seed=1)
        stream = build_session_stream(train, config(), test_dataset=test)
        # every base-class train sample is used when the split is external
        assert len(stream.sessions[0]) == 4 * 12

    def test_deterministic_and_seed_sensitivity(self):
        ds = toy_dataset()
        s1 = build_session_stream(ds, config())
        s2 = build_session_stream(ds, config())
        assert s1.label_spaces == s2.label_spaces
        assert [len(x) for x in s1.sessions] == [len(x) for x in s2.sessions]
        for a, b in zip(s1.sessions, s2.sessions):
            assert all(x is y for (x, _), (y, _) in zip(a.samples, b.samples))
        s3 = build_session_stream(ds, config(seed=8))
        assert [len(sp) for sp in s3.label_spaces] == [len(sp) for sp in s1.label_spaces]
        assert s3.label_spaces != s1.label_spaces  # generically different shuffle

    def test_insufficient_classes(self):
        with pytest.raises(InsufficientClasses):
            build_session_stream(toy_dataset(classes=5), config())

    def test_insufficient_samples_for_k_shot(self):
        ds = toy_dataset(classes=10, per_class=3)
        with pytest.raises(InsufficientSamples):
            build_session_stream(ds, config(k_shot=3))  # 20% held out first

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            config(n_way=1).validate()
        with pytest.raises(ConfigError):
            config(k_shot=0).validate()


class TestCumulativeLabelSet:
    def test_base_only(self):
        stream = build_session_stream(toy_dataset(), config())
        assert cumulative_label_set(stream, 0) == set(stream.label_spaces[0])

    def test_brute_force_union(self):
        stream = build_session_stream(toy_dataset(), config(base_class_count=6))
        expect = set()
        for space in stream.label_spaces[:3]:
            expect |= set(space)
        assert cumulative_label_set(stream, 2) == expect
        assert len(cumulative_label_set(stream, 2)) == 10

    def test_cardinality_arithmetic(self):
        ds = toy_dataset(classes=100, per_class=8, dim=2)
        cfg = config(base_class_count=60, n_way=5, k_shot=5, session_count=8)
        stream = build_session_stream(ds, cfg)
        for t in range(9):
            assert len(cumulative_label_set(stream, t)) == 60 + 5 * t
        assert len(cumulative_label_set(stream, 8)) == 100

    def test_out_of_range(self):
        stream = build_session_stream(toy_dataset(), config())
        with pytest.raises(IndexOutOfRange):
            cumulative_label_set(stream, 3)
        with pytest.raises(IndexOutOfRange):
            cumulative_label_set(stream, -1)


class TestSampleEpisode:
    def test_shapes(self):
        ds = toy_dataset(classes=8, per_class=25)
        ep = sample_episode(ds, way=5, shot=5, query_per_class=15, seed=0)
        assert len(ep.support) == 25
        assert len(ep.query) == 75

    def test_minimal_episode(self):
        ds = toy_dataset(classes=2, per_class=2)
        ep = sample_episode(ds, way=1, shot=1, query_per_class=0, seed=0)
        assert len(ep.support) == 1
        assert ep.query == []

    def test_determinism(self):
        ds = toy_dataset()
        a = sample_episode(ds, 3, 2, 2, seed=42)
        b = sample_episode(ds, 3, 2, 2, seed=42)
        assert a.labels() == b.labels()
        for (pa, la), (pb, lb) in zip(a.support + a.query, b.support + b.query):
            assert la == lb and pa is pb

    def test_invariants_over_many_seeds(self):
        ds = toy_dataset(classes=6, per_class=8)
        for seed in range(1000):
            ep = sample_episode(ds, way=3, shot=2, query_per_class=2, seed=seed)
            by_label = {}
            for payload, label in ep.support:
                by_label.setdefault(label, []).append(id(payload))
            assert len(by_label) == 3
            assert all(len(v) == 2 for v in by_label.values())
            support_ids = {i for v in by_label.values() for i in v}
            query_ids = {id(p) for p, _ in ep.query}
            assert not support_ids & query_ids
            assert {lab for _, lab in ep.query} <= set(by_label)

    def test_insufficient_samples(self):
        ds = toy_dataset(classes=3, per_class=3)
        with pytest.raises(InsufficientSamples):
            sample_episode(ds, way=3, shot=2, query_per_class=2, seed=0)


class TestDatasetsAndLoaders:
    def test_synthetic_reference_shapes(self):
        train, test = make_synthetic_reference(class_count=5, dim=8, train_per_class=20,
                                               test_per_class=7, seed=3)
        assert train.class_count == 5 and test.class_count == 5
        assert all(train.count_of(c) == 20 for c in train.labels())
        assert all(test.count_of(c) == 7 for c in test.labels())
        assert train.samples[0][0].shape == (8,)

    def test_synthetic_deterministic(self):
        a, _ = make_synthetic_reference(class_count=3, dim=4, train_per_class=5,
                                        test_per_class=2, seed=9)
        b, _ = make_synthetic_reference(class_count=3, dim=4, train_per_class=5,
                                        test_per_class=2, seed=9)
        assert np.array_equal(a.payload_matrix(), b.payload_matrix())

    def test_csv_round_trip(self, tmp_path):
        ds = toy_dataset(classes=3, per_class=4, dim=5)
        path = str(tmp_path / "feats.csv")
        save_feature_csv(ds, path)
        back = load_feature_csv(path)
        assert np.array_equal(back.label_vector(), ds.label_vector())
        assert np.allclose(back.payload_matrix(), ds.payload_matrix())

    def test_npz_round_trip(self, tmp_path):
        ds = toy_dataset(classes=3, per_class=4, dim=5)
        path = str(tmp_path / "feats.npz")
        save_feature_npz(ds, path)
        back = load_feature_npz(path)
        assert np.array_equal(back.label_vector(), ds.label_vector())
        assert np.allclose(back.payload_matrix(), ds.payload_matrix())

    def test_directory_loader(self, tmp_path):
        for c in range(3):
            d = tmp_path / str(c)
            d.mkdir()
            np.save(d / "a.npy", np.full(4, float(c)))
            (d / "b.txt").write_text(" ".join(str(float(c) + 0.5) for _ in range(4)))
        ds = load_directory_dataset(str(tmp_path))
        assert ds.class_count == 3
        assert all(ds.count_of(c) == 2 for c in ds.labels())

    def test_describe_stream(self):
        stream = build_session_stream(toy_dataset(), config())
        text = describe_stream(stream)
        lines = text.strip().split("\n")
        assert len(lines) == 3
        assert lines[0].startswith("session=0 classes=4")
        assert "labels=" in lines[1]
