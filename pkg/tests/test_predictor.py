"""Tests for the surrogate regressors and the model bundle."""

import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import spearmanr

from osc_agent.errors import ConfigError, PersistenceError, PredictorError, SpecMismatch
from osc_agent.predictor import (
    FeatureSpec,
    FeatureVector,
    RegressorModel,
    SurrogateSuite,
    TrainConfig,
    dataset_from_records,
    featurize,
    predict_homo_lumo,
    predict_point,
    predict_with_uncertainty,
    regression_metrics,
    split_holdout,
    train,
)
from osc_agent.smiles import parse_smiles

TINY_SPEC = FeatureSpec(radius=2, width=64)
TINY_TRAIN = TrainConfig(hidden=8, dropout=0.0, lr=1e-2, batch_size=8, epochs=5, seed=0)

WIDE = FeatureSpec(radius=2, width=8)


def synthetic_heteroscedastic(n=512, seed=0):
    """y = bit count + noise; noise is small when bit 0 is off and large when it is on."""
    rng = np.random.default_rng(seed)
    rows = []
    noise_scale = []
    for _ in range(n):
        bits = rng.integers(0, 2, size=8).astype(np.float64)
        scale = 2.0 if bits[0] else 0.1
        rows.append((FeatureVector(bits, WIDE), float(bits.sum() + rng.normal(0.0, scale))))
        noise_scale.append(scale)
    return rows, noise_scale


class TestFeatures:
    def test_featurize_length(self):
        vec = featurize(parse_smiles("CCO"), TINY_SPEC)
        assert vec.values.shape == (64,)
        assert set(np.unique(vec.values)) <= {0.0, 1.0}

    def test_descriptors_are_appended(self):
        spec = FeatureSpec(radius=2, width=64, descriptors=("heavy_atoms", "rings"))
        vec = featurize(parse_smiles("c1ccccc1O"), spec)
        assert vec.values.shape == (66,)
        assert vec.values[-2:].tolist() == [7.0, 1.0]

    def test_unknown_descriptor(self):
        with pytest.raises(ConfigError):
            FeatureSpec(descriptors=("dipole",))

    def test_shape_mismatch(self):
        with pytest.raises(SpecMismatch):
            FeatureVector(np.zeros(10), TINY_SPEC)

    def test_non_finite_entries(self):
        values = np.zeros(64)
        values[3] = np.nan
        with pytest.raises(PredictorError):
            FeatureVector(values, TINY_SPEC)


class TestTrain:
    def test_deterministic(self, reference_records):
        data = dataset_from_records(reference_records, "pce", TINY_SPEC)
        a = train(data, TINY_TRAIN)
        b = train(data, TINY_TRAIN)
        assert a.parameters_equal(b)
        assert a.metadata["loss_history"] == b.metadata["loss_history"]

    def test_seed_changes_parameters(self, reference_records):
        data = dataset_from_records(reference_records, "pce", TINY_SPEC)
        assert not train(data, TINY_TRAIN).parameters_equal(train(data, replace(TINY_TRAIN, seed=1)))

    def test_loss_decreases(self, reference_records):
        data = dataset_from_records(reference_records, "homo", TINY_SPEC)
        model = train(data, replace(TINY_TRAIN, epochs=60, uncertainty=False), target="homo")
        history = model.metadata["loss_history"]
        assert len(history) == 60
        assert history[-1] < history[0]
        assert model.metadata["final_loss"] == history[-1]

    def test_constant_target(self):
        data = [(featurize(parse_smiles(s), TINY_SPEC), 5.0) for s in ("CCO", "CCC", "c1ccccc1", "CC(=O)O")]
        model = train(data, replace(TINY_TRAIN, epochs=50, uncertainty=False))
        for vec, _ in data:
            assert predict_point(model, vec) == pytest.approx(5.0, abs=0.5)

    def test_learns_heteroscedastic_noise(self):
        data, noise_scale = synthetic_heteroscedastic()
        cfg = TrainConfig(hidden=32, dropout=0.0, lr=1e-2, batch_size=64, alpha=0.5, epochs=200, seed=0)
        model = train(data, cfg)
        sigmas = [predict_with_uncertainty(model, vec).sigma for vec, _ in data]
        rho, _ = spearmanr(sigmas, noise_scale)
        assert rho > 0.5

    def test_too_few_samples(self):
        with pytest.raises(PredictorError):
            train([(featurize(parse_smiles("CCO"), TINY_SPEC), 1.0)], TINY_TRAIN)

    def test_non_finite_target(self):
        data = [(featurize(parse_smiles(s), TINY_SPEC), y) for s, y in (("CCO", 1.0), ("CCC", float("nan")))]
        with pytest.raises(PredictorError):
            train(data, TINY_TRAIN)

    def test_mixed_specs(self):
        data = [
            (featurize(parse_smiles("CCO"), TINY_SPEC), 1.0),
            (featurize(parse_smiles("CCC"), FeatureSpec(radius=1, width=64)), 2.0),
        ]
        with pytest.raises(SpecMismatch):
            train(data, TINY_TRAIN)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)


class TestInference:
    def test_uncertainty_output(self, reference_records):
        model = train(dataset_from_records(reference_records, "pce", TINY_SPEC), TINY_TRAIN)
        out = predict_with_uncertainty(model, featurize(parse_smiles("c1ccsc1"), TINY_SPEC))
        assert np.isfinite(out.mu)
        assert out.sigma > 0

    def test_point_model_has_no_variance_head(self, reference_records):
        model = train(dataset_from_records(reference_records, "homo", TINY_SPEC), replace(TINY_TRAIN, uncertainty=False), "homo")
        with pytest.raises(SpecMismatch):
            predict_with_uncertainty(model, featurize(parse_smiles("CCO"), TINY_SPEC))

    def test_wrong_feature_spec(self, reference_records):
        model = train(dataset_from_records(reference_records, "pce", TINY_SPEC), TINY_TRAIN)
        with pytest.raises(SpecMismatch):
            predict_with_uncertainty(model, featurize(parse_smiles("CCO"), FeatureSpec(radius=3, width=64)))

    def test_homo_lumo_pair(self, models_dir):
        suite = SurrogateSuite.load(models_dir)
        vec = featurize(parse_smiles("c1ccsc1"), suite.spec)
        homo, lumo = predict_homo_lumo((suite.homo, suite.lumo), vec)
        assert homo == predict_point(suite.homo, vec)
        assert lumo == predict_point(suite.lumo, vec)


class TestPersistence:
    def test_json_round_trip(self, tmp_path, reference_records):
        spec = FeatureSpec(radius=2, width=64, descriptors=("heavy_atoms",))
        model = train(dataset_from_records(reference_records, "pce", spec), TINY_TRAIN)
        path = tmp_path / "pce.json"
        model.save(path)
        loaded = RegressorModel.load(path)
        assert loaded.parameters_equal(model)
        assert loaded.spec == spec
        assert loaded.standardization == model.standardization
        vec = featurize(parse_smiles("CCCCc1ccsc1"), spec)
        assert predict_with_uncertainty(loaded, vec) == predict_with_uncertainty(model, vec)

    def test_unknown_format(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"format": "something-else", "version": 1}))
        with pytest.raises(PersistenceError, match="unsupported"):
            RegressorModel.load(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"format": ')
        with pytest.raises(PersistenceError):
            RegressorModel.load(path)

    def test_parameters_must_fit(self, tmp_path, reference_records):
        model = train(dataset_from_records(reference_records, "pce", TINY_SPEC), TINY_TRAIN)
        data = model.to_dict()
        data["architecture"]["hidden"] = 16
        path = tmp_path / "model.json"
        path.write_text(json.dumps(data))
        with pytest.raises(PersistenceError):
            RegressorModel.load(path)


class TestSurrogateSuite:
    def test_evaluate(self, models_dir):
        suite = SurrogateSuite.load(models_dir)
        est = suite.evaluate(parse_smiles("CCCCCCc1ccc(-c2cccs2)s1"))
        assert est.pce_sigma > 0
        assert 1.0 <= est.sascore <= 10.0
        assert all(np.isfinite([est.pce_mu, est.homo, est.lumo]))

    def test_tool_settings(self, models_dir):
        settings = SurrogateSuite.load(models_dir).tool_settings()
        assert set(settings) == {"pce", "homo", "lumo", "sascore"}
        assert "approximate" in settings["sascore"]

    def test_missing_sa_table(self, models_dir):
        (models_dir / "sa_table.tsv").unlink()
        suite = SurrogateSuite.load(models_dir)
        assert suite.sa_table.approximate
        assert len(suite.sa_table) == 0

    def test_missing_model(self, models_dir):
        (models_dir / "lumo.json").unlink()
        with pytest.raises(PersistenceError):
            SurrogateSuite.load(models_dir)


class TestHoldout:
    def test_split_is_disjoint_and_seeded(self):
        rows = [(i, float(i)) for i in range(10)]
        train_part, hold = split_holdout(rows, 0.2, seed=4)
        assert len(hold) == 2
        assert sorted(train_part + hold) == rows
        assert split_holdout(rows, 0.2, seed=4) == (train_part, hold)

    def test_small_fraction_keeps_one(self):
        _, hold = split_holdout([(i, 0.0) for i in range(5)], 0.01)
        assert len(hold) == 1

    def test_zero_fraction(self):
        train_part, hold = split_holdout([(i, 0.0) for i in range(5)], 0.0)
        assert hold == [] and len(train_part) == 5

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_holdout([(0, 0.0)], 1.0)

    def test_metrics(self):
        assert regression_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == {"r2": 1.0, "mae": 0.0, "n": 3}
        mean_only = regression_metrics([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
        assert mean_only["r2"] == pytest.approx(0.0)
        assert mean_only["mae"] == pytest.approx(2.0 / 3.0)
        with pytest.raises(PredictorError):
            regression_metrics([], [])
