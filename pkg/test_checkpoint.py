"""
Tests for saving, loading and importing model state.
"""

import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from checkpoint import MANIFEST, import_statistics, load_checkpoint, save_checkpoint
from errors import DimensionError, InputError
from models import ModelSpec, SyntheticSpec, TrainConfig
from partition import parse_scheme
from training import Network, evaluate, make_dataset, train

SPEC = SyntheticSpec(n_classes=3, n_train_per_class=8, n_val_per_class=4, n_test_per_class=4,
                     channels=2, height=2, width=2, seed=0)


@pytest.fixture(scope="module")
def trained():
    data = make_dataset(SPEC)
    config = TrainConfig(batch_size=4, epochs=1, scheme="batchgroup:2:2", seed=0)
    model, _ = train(ModelSpec(widths=[4, 6]), data, config)
    return model, data


def test_round_trip_preserves_predictions(trained, tmp_path):
    model, data = trained
    save_checkpoint(model, str(tmp_path))
    loaded = load_checkpoint(str(tmp_path))

    assert loaded.scheme == model.scheme
    for name, value in model.parameters().items():
        assert_array_equal(loaded.parameters()[name], value)
    for ours, theirs in zip(model.norms, loaded.norms):
        assert_array_equal(theirs.moving.m_x, ours.moving.m_x)
        assert_array_equal(theirs.moving.m_x2, ours.moving.m_x2)
    for alpha in (0.0, 0.5, 1.0):
        assert evaluate(loaded, data.test, alpha) == evaluate(model, data.test, alpha)


def test_checkpoint_layout(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, str(tmp_path))
    files = set(os.listdir(tmp_path))
    assert {MANIFEST, "mix0.csv", "mix1.csv", "classifier_w.csv", "classifier_b.csv",
            "norm0_params.csv", "norm1_moving.csv"} <= files
    with open(tmp_path / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["scheme"] == "batchgroup:2:2"
    assert manifest["shapes"]["mix1"] == [6, 4]


def test_missing_checkpoint(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(str(tmp_path / "absent"))


def test_missing_weight_file(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, str(tmp_path))
    os.remove(tmp_path / "mix1.csv")
    with pytest.raises(InputError):
        load_checkpoint(str(tmp_path))


def test_manifest_shape_mismatch(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, str(tmp_path))
    with open(tmp_path / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    manifest["shapes"]["mix0"] = [5, 2]
    with open(tmp_path / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)
    with pytest.raises(DimensionError):
        load_checkpoint(str(tmp_path))


def test_import_statistics():
    model = Network(ModelSpec(widths=[3]), 2, 2, parse_scheme("batch"))
    mean = np.array([0.5, -1.0, 2.0])
    var = np.array([1.0, 0.25, 4.0])
    import_statistics(model, {0: (mean, var)})
    assert_allclose(model.norms[0].moving.m_x, mean)
    assert_allclose(model.norms[0].moving.implied_var(), var)

    with pytest.raises(DimensionError):
        import_statistics(model, {0: (mean[:2], var[:2])})
