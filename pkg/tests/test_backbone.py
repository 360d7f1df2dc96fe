"""Feature extractor, prototypes, pretraining, checkpoints."""

import numpy as np
import pytest

from fewgraph.backbone import (
    MlpParams,
    class_prototype,
    extract_features,
    init_backbone,
    load_backbone_checkpoint,
    pretrain_base,
    save_backbone_checkpoint,
)
from fewgraph.datasets import LabeledDataset
from fewgraph.errors import EmptyClass, ShapeMismatch
from fewgraph.protocol import ProtocolConfig, build_session_stream
from fewgraph.trainer import TrainConfig


def gaussian_base_dataset(classes=6, per_class=40, dim=8, seed=0, spread=4.0):
    rng = np.random.default_rng(seed)
    samples = []
    for c in range(classes):
        direction = rng.normal(size=dim)
        mean = spread * direction / np.linalg.norm(direction)
        for _ in range(per_class):
            samples.append((mean + rng.normal(size=dim), c))
    return LabeledDataset(samples)


def base_only_stream(ds):
    cfg = ProtocolConfig(base_class_count=ds.class_count, n_way=2, k_shot=1,
                         query_per_class=0, session_count=0, seed=0)
    return build_session_stream(ds, cfg)


class TestExtractFeatures:
    def test_shape_contract(self, rng):
        params = init_backbone(6, 5, 4, seed=1)
        z = extract_features(params, rng.normal(size=(4, 6)))
        assert z.shape == (4, 4)

    def test_determinism(self, rng):
        params = init_backbone(6, 5, 4, seed=1)
        x = rng.normal(size=(3, 6))
        assert np.array_equal(extract_features(params, x), extract_features(params, x))

    def test_zero_weights_give_zero_embeddings(self, rng):
        params = init_backbone(6, 5, 4, seed=1)
        for w in params.weights:
            w[...] = 0.0
        for b in params.biases:
            b[...] = 0.0
        z = extract_features(params, rng.normal(size=(3, 6)))
        assert np.array_equal(z, np.zeros((3, 4)))

    def test_permutation_equivariance(self, rng):
        params = init_backbone(6, 5, 4, seed=1)
        x = rng.normal(size=(7, 6))
        perm = rng.permutation(7)
        assert np.array_equal(extract_features(params, x)[perm], extract_features(params, x[perm]))

    def test_flattens_image_payloads(self, rng):
        params = init_backbone(12, 5, 4, seed=1)
        imgs = [rng.normal(size=(3, 4)) for _ in range(2)]
        assert extract_features(params, imgs).shape == (2, 4)

    def test_shape_mismatch(self, rng):
        params = init_backbone(6, 5, 4, seed=1)
        with pytest.raises(ShapeMismatch):
            extract_features(params, rng.normal(size=(3, 7)))


class TestClassPrototype:
    def test_single_sample(self):
        z = np.array([[1.0, 2.0]])
        assert np.array_equal(class_prototype(z, np.array([3]), 3), z[0])

    def test_symmetric_pair(self):
        z = np.array([[1.0, -2.0], [-1.0, 2.0]])
        assert np.allclose(class_prototype(z, np.array([0, 0]), 0), 0.0)

    def test_hand_computed_mean(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        proto = class_prototype(z, np.array([5, 5, 5]), 5)
        assert np.allclose(proto, [2.0 / 3.0, 2.0 / 3.0], atol=1e-15)

    def test_matches_loop_oracle(self, rng):
        for _ in range(100):
            z = rng.normal(size=(20, 6))
            y = rng.integers(0, 4, size=20)
            target = int(rng.integers(0, 4))
            if not (y == target).any():
                continue
            total = np.zeros(6)
            count = 0
            for i in range(20):
                if y[i] == target:
                    total += z[i]
                    count += 1
            assert np.allclose(class_prototype(z, y, target), total / count, atol=1e-12)

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            class_prototype(np.ones((2, 3)), np.array([0, 1]), 7)


class TestPretrainBase:
    def test_reaches_high_train_accuracy(self):
        stream = base_only_stream(gaussian_base_dataset())
        cfg = TrainConfig(pretrain_epochs=50, embed_dim=8, backbone_hidden=32, seed=0)
        result = pretrain_base(stream, cfg)
        assert result.epoch_accuracies[-1] >= 0.95
        assert result.epoch_losses[-1] <= result.epoch_losses[0]

    def test_zero_epochs_keeps_init(self):
        stream = base_only_stream(gaussian_base_dataset())
        cfg = TrainConfig(pretrain_epochs=0, embed_dim=8, seed=0)
        result = pretrain_base(stream, cfg)
        ref = init_backbone(8, cfg.backbone_hidden, cfg.embed_dim, cfg.seed)
        for (_, a), (_, b) in zip(result.params.arrays(), ref.arrays()):
            assert np.array_equal(a, b)

    def test_zero_learning_rate_keeps_loss_constant(self):
        stream = base_only_stream(gaussian_base_dataset())
        cfg = TrainConfig(pretrain_epochs=4, pretrain_lr=0.0, embed_dim=8, seed=0)
        result = pretrain_base(stream, cfg)
        assert len(set(result.epoch_losses)) == 1


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        params = init_backbone(6, 5, 4, seed=12)
        for w in params.weights:
            w += rng.normal(size=w.shape)
        path = str(tmp_path / "bb.ckpt")
        save_backbone_checkpoint(params, path)
        back = load_backbone_checkpoint(path)
        assert isinstance(back, MlpParams)
        for (na, a), (nb, b) in zip(params.arrays(), back.arrays()):
            assert na == nb
            assert a.tobytes() == b.tobytes()

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        from fewgraph.errors import IoError

        with pytest.raises(IoError):
            load_backbone_checkpoint(str(path))
