"""Reference segmenter: config validation, determinism, learning, evaluation."""

import numpy as np
import pytest
import torch

from defectgen.errors import ConfigError
from defectgen.metrics import miou
from defectgen.segmentation import (SEG_BACKBONES, SegConfig, TinyUNet, eval_seg,
                                    register_backbone, train_seg)

FAST = SegConfig(epochs=2, batch_size=8, seed=0)


class TestConfig:
    def test_defaults_valid(self):
        SegConfig()

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            SegConfig(epochs=0)
        with pytest.raises(ConfigError):
            SegConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            SegConfig(batch_size=0)
        with pytest.raises(ConfigError):
            SegConfig(backbone="resnet-nope")

    def test_registry(self):
        assert "tiny-unet" in SEG_BACKBONES

        @register_backbone("test-stub")
        def _stub(n_classes):
            return TinyUNet(n_classes, base=8)

        try:
            cfg = SegConfig(backbone="test-stub", epochs=1)
            assert cfg.backbone == "test-stub"
        finally:
            del SEG_BACKBONES["test-stub"]


class TestNet:
    def test_output_shape(self):
        net = TinyUNet(n_classes=3)
        x = torch.randn(2, 3, 32, 32)
        assert net(x).shape == (2, 3, 32, 32)


class TestTraining:
    def test_deterministic_per_seed(self, toy_train):
        a = train_seg(toy_train, FAST)
        b = train_seg(toy_train, FAST)
        assert a.weights_hash() == b.weights_hash()
        assert a.loss_history == b.loss_history

    def test_seed_changes_weights(self, toy_train):
        a = train_seg(toy_train, FAST)
        b = train_seg(toy_train, SegConfig(epochs=2, batch_size=8, seed=1))
        assert a.weights_hash() != b.weights_hash()

    def test_loss_decreases(self, toy_train):
        m = train_seg(toy_train, SegConfig(epochs=8, batch_size=8, seed=0))
        assert m.loss_history[-1] < m.loss_history[0]

    def test_empty_dataset_rejected(self, toy_train):
        from dataclasses import replace

        empty = replace(toy_train, sample_ids=[])
        with pytest.raises(ConfigError):
            train_seg(empty, FAST)

    def test_predict_shape_and_range(self, toy_train):
        m = train_seg(toy_train, FAST)
        s = toy_train.load_sample(toy_train.sample_ids[0])
        pred = m.predict(s.image)
        assert pred.shape == s.mask.shape
        assert pred.min() >= 0 and pred.max() < m.n_classes


class TestEval:
    def test_eval_matches_manual_miou(self, toy_train, toy_val):
        m = train_seg(toy_train, FAST)
        got = eval_seg(m, toy_val)
        samples = toy_val.load_all()
        want = miou([m.predict(s.image) for s in samples],
                    [s.mask for s in samples], m.n_classes)
        assert got == want

    def test_training_longer_helps(self, toy_train, toy_val):
        short = eval_seg(train_seg(toy_train, SegConfig(epochs=1, seed=0)), toy_val)
        long = eval_seg(train_seg(toy_train, SegConfig(epochs=25, seed=0)), toy_val)
        assert long["mean"] > short["mean"]
