import numpy as np
import pytest
import torch

from umd.data import train_test_split_stratified
from umd.evaluation import (OracleClassifier, conditional_fidelity_check, extract_representation,
                            few_shot_split, fit_linear_probe, predict_linear_probe, probe_model,
                            probe_timestep, sample_fidelity, train_oracle_classifier)
from umd.exceptions import ConfigError
from umd.objective import ObjectiveConfig
from umd.sampler import SamplerConfig
from umd.schedules import make_cosine_schedule
from umd.trainer import build_model

from conftest import tiny_config


class TestRidgeProbe:
    def test_one_hot_features_are_perfect(self):
        labels = np.repeat(np.arange(5), 4)
        feats = np.eye(5)[labels]
        w = fit_linear_probe(feats, labels)
        assert np.mean(predict_linear_probe(w, feats) == labels) == 1.0

    def test_noise_features_sit_at_chance(self):
        rng = np.random.default_rng(0)
        n, k = 4000, 10
        w = fit_linear_probe(rng.normal(size=(n, 6)), rng.integers(0, k, n), n_classes=k)
        acc = np.mean(predict_linear_probe(w, rng.normal(size=(n, 6))) == rng.integers(0, k, n))
        assert abs(acc - 1 / k) < 5 * np.sqrt(0.1 * 0.9 / n)

    def test_normal_equations(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 7))
        y = rng.integers(0, 3, 60)
        lam = 0.05
        w = fit_linear_probe(X, y, lam)
        Xb = np.hstack([X, np.ones((60, 1))])
        reg = np.full(8, lam * np.trace(X.T @ X) / 7)
        reg[-1] = 0
        resid = (Xb.T @ Xb + np.diag(reg)) @ w - Xb.T @ np.eye(3)[y]
        assert np.abs(resid).max() / np.abs(Xb.T @ np.eye(3)[y]).max() < 1e-8

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(80, 5))
        y = rng.integers(0, 4, 80)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        test = rng.normal(size=(30, 5))
        a = predict_linear_probe(fit_linear_probe(X, y, 0.3), test)
        b = predict_linear_probe(fit_linear_probe(X @ q, y, 0.3), test @ q)
        assert np.array_equal(a, b)

    def test_bias_is_not_shrunk(self):
        rng = np.random.default_rng(3)
        y = np.array([0] * 30 + [1] * 10)
        w = fit_linear_probe(rng.normal(size=(40, 4)), y, ridge_lambda=1e9)
        np.testing.assert_allclose(w[-1], [0.75, 0.25], atol=1e-6)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            fit_linear_probe(np.ones((4, 2)), [0, 1, 0, 1], ridge_lambda=0)
        with pytest.raises(ValueError):
            fit_linear_probe(np.array([[np.nan, 1.0], [0.0, 1.0]]), [0, 1])


class TestFewShot:
    def test_k_per_class(self):
        labels = np.repeat(np.arange(4), 10)
        idx = few_shot_split(labels, 3, seed=5)
        assert np.array_equal(np.bincount(labels[idx]), [3, 3, 3, 3])
        assert np.array_equal(idx, few_shot_split(labels, 3, seed=5))
        assert not np.array_equal(idx, few_shot_split(labels, 3, seed=6))

    def test_errors(self):
        labels = np.repeat(np.arange(3), 2)
        with pytest.raises(ValueError):
            few_shot_split(labels, 0)
        with pytest.raises(ValueError):
            few_shot_split(labels, 3)


class TestRepresentation:
    def test_shape_determinism_and_batching(self, small_digits):
        model = build_model(tiny_config())
        sched = make_cosine_schedule(1000)
        a = extract_representation(model, small_digits.images, 30, sched, seed=1, batch_size=40)
        b = extract_representation(model, small_digits.images, 30, sched, seed=1, batch_size=40)
        assert a.shape == (40, 16) and np.array_equal(a, b)
        c = extract_representation(model, small_digits.images, 0, batch_size=7)
        d = extract_representation(model, small_digits.images, 0, batch_size=40)
        np.testing.assert_allclose(c, d, atol=1e-5)

    def test_noised_readout_needs_schedule(self, small_digits):
        with pytest.raises(ValueError):
            extract_representation(build_model(tiny_config()), small_digits.images, 10)

    def test_probe_timestep_rule(self):
        assert probe_timestep(ObjectiveConfig()) == 0
        assert probe_timestep(ObjectiveConfig(r_t0=0.0, m_tge1=0.0), 50) == 50

    def test_probe_model_runs(self, digits):
        model = build_model(tiny_config())
        res = probe_model(model, digits.subset(torch.arange(300)), digits.subset(torch.arange(300, 400)), 5)
        assert 0.0 <= res.accuracy <= 1.0 and res.n_shots == 5 and res.n_classes == 10
        assert "accuracy" in res.summary()


@pytest.fixture(scope="module")
def split(digits):
    tr, te = train_test_split_stratified(digits.labels, 0.25, 0)
    return digits.subset(tr), digits.subset(te)


@pytest.fixture(scope="module")
def oracle(split):
    return train_oracle_classifier(*split)


class TestOracle:
    def test_oracle_clears_floor(self, oracle):
        assert oracle.heldout_accuracy >= 0.95

    def test_self_consistency(self, oracle, split):
        held = split[1]
        acc = conditional_fidelity_check(held.images, held.labels.numpy(), oracle)
        assert acc == pytest.approx(oracle.heldout_accuracy)

    def test_weak_oracle_refused(self, oracle, digits):
        weak = OracleClassifier(oracle.estimator, 0.6)
        with pytest.raises(ValueError, match="below"):
            conditional_fidelity_check(digits.images[:4], digits.labels[:4].numpy(), weak)

    def test_sample_fidelity_bookkeeping(self, oracle):
        cfg = tiny_config(**{"model.n_classes": 10})
        model = build_model(cfg)
        out = sample_fidelity(model, make_cosine_schedule(1000), SamplerConfig(n_steps=2, cfg_scale=1.5),
                              oracle, n_per_class=2)
        assert out["n_samples"] == 20 and 0 <= out["accuracy"] <= 1
        assert out["model_evals"] == 2 * 2
        assert out["samples"].shape == (20, 1, 16, 16)

    def test_sample_fidelity_needs_classes(self, oracle):
        with pytest.raises(ConfigError):
            sample_fidelity(build_model(tiny_config()), make_cosine_schedule(1000), SamplerConfig(), oracle, 1)
