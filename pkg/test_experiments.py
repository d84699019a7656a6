"""
Tests for the experiment harness: planning, result tables and determinism.
"""

import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from errors import ConfigurationError, DimensionError, InputError
from experiments import (ALPHA_COLUMNS, BOUNDS_COLUMNS, COMPARE_COLUMNS, GHOST_COLUMNS,
                         NON_IID_COLUMNS, WEIGHT_DECAY_COLUMNS, _eval_alphas, _median, load_spec,
                         plan_runs, run_experiment, tuned_summary)

TINY = {
    "dataset": {"n_classes": 4, "n_train_per_class": 16, "n_val_per_class": 8,
                "n_test_per_class": 8, "channels": 2, "height": 2, "width": 2,
                "separation": 2.0, "noise": 1.0, "seed": 0},
    "model": {"widths": [4]},
    "train": {"batch_size": 8, "learning_rate": 0.05, "epochs": 1, "scheme": "batch"},
    "alpha_grid": [0.0, 0.5, 1.0],
    "ghost_sizes": [2, 4, 8],
    "compare": [
        {"batch_size": 2, "schemes": ["batch", "group:2"]},
        {"batch_size": 8, "schemes": ["ghost:4", "batchgroup:2:2"]},
    ],
    "batch_group": "batchgroup:2:2",
    "classes_per_batch": 2,
    "tightness_B": 8,
    "seed": 0,
}


def tiny_spec(out, **updates):
    data = json.loads(json.dumps(TINY))
    data.update(updates)
    return load_spec(None, out=str(out), **data)


def read(path):
    return pd.read_csv(path)


def test_load_spec_from_file_with_overrides(tmp_path):
    config = tmp_path / "experiment.json"
    config.write_text(json.dumps(TINY))
    spec = load_spec(str(config), seed=7, jobs=None, out=str(tmp_path / "out"))
    assert spec.seed == 7
    assert spec.jobs == 1
    assert spec.train.scheme.kind == "batch"


def test_load_spec_errors(tmp_path):
    with pytest.raises(InputError):
        load_spec(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_spec(str(broken))
    with pytest.raises(ConfigurationError):
        load_spec(None, alpha_grid=[0.0, 1.5])
    assert load_spec(None, alpha_grid=[0.0, 1.5], allow_alpha_extrapolation=True).alpha_grid[-1] == 1.5


def test_eval_alphas_prepend_zero():
    assert _eval_alphas([0.5, 1.0]) == [0.0, 0.5, 1.0]
    assert _eval_alphas([0.2, 0.0, 0.2]) == [0.2, 0.0]


def test_tuned_summary_selection():
    rows = [
        {"alpha": 0.0, "val_accuracy": 0.5, "val_xent": 1.0, "test_accuracy": 0.4, "test_xent": 1.1},
        {"alpha": 0.5, "val_accuracy": 0.7, "val_xent": 0.9, "test_accuracy": 0.6, "test_xent": 0.8},
        {"alpha": 1.0, "val_accuracy": 0.7, "val_xent": 0.7, "test_accuracy": 0.5, "test_xent": 0.9},
    ]
    by_accuracy = tuned_summary(rows, "accuracy")
    assert by_accuracy["best_alpha"] == 0.5
    assert by_accuracy["test_accuracy"] == 0.6
    assert by_accuracy["alpha0_test_accuracy"] == 0.4
    assert tuned_summary(rows, "xent")["best_alpha"] == 1.0


def test_median_over_seeds():
    assert _median([{"a": 1.0, "b": 4.0}, {"a": 3.0, "b": 5.0}, {"a": 2.0, "b": 9.0}]) == \
        {"a": 2.0, "b": 5.0}


def test_plan_uses_consecutive_seeds(tmp_path):
    spec = tiny_spec(tmp_path, seed=10, n_seeds=3)
    tasks = plan_runs(spec, "sweep-ghost")
    assert len(tasks) == 9
    assert [t.train.seed for t in tasks[:3]] == [10, 11, 12]
    assert all(t.dataset.seed == 0 for t in tasks)


@pytest.mark.parametrize("command,updates", [
    ("sweep-ghost", {"ghost_sizes": [3]}),
    ("bounds", {"ghost_sizes": [2, 5]}),
    ("compare", {"compare": [{"batch_size": 1, "schemes": ["batch"]}]}),
    ("compare", {"compare": [{"batch_size": 8, "schemes": ["group:3"]}]}),
    ("non-iid", {"classes_per_batch": 3}),
    ("weight-decay", {}),
    ("sweep-ghost", {"train": {**TINY["train"], "alpha_grid": [1.5]}}),
    ("non-iid", {"train": {**TINY["train"], "alpha_grid": [0.0, 2.0]}}),
])
def test_invalid_plans_fail_before_writing(tmp_path, command, updates):
    out = tmp_path / "out"
    spec = tiny_spec(out, **updates)
    with pytest.raises(ConfigurationError):
        run_experiment(spec, command)
    assert not out.exists()


def test_missing_checkpoint_is_input_error(tmp_path):
    spec = tiny_spec(tmp_path / "out", checkpoint=str(tmp_path / "nothing"))
    with pytest.raises(InputError):
        run_experiment(spec, "sweep-alpha")


@pytest.mark.parametrize("dataset", [{"channels": 3}, {"n_classes": 2}])
def test_checkpoint_for_other_data_fails_before_writing(tmp_path, dataset):
    run_experiment(tiny_spec(tmp_path / "train"), "sweep-alpha")
    out = tmp_path / "other"
    other = tiny_spec(out, dataset={**TINY["dataset"], **dataset},
                      checkpoint=str(tmp_path / "train" / "checkpoint"))
    with pytest.raises(DimensionError):
        run_experiment(other, "sweep-alpha")
    assert not out.exists()


def test_sweep_alpha_trains_then_reuses_checkpoint(tmp_path):
    first = tiny_spec(tmp_path / "first")
    files = run_experiment(first, "sweep-alpha")
    assert [os.path.basename(f) for f in files] == ["alpha_sweep.csv", "history.csv"]
    sweep = read(files[0])
    assert list(sweep.columns) == ALPHA_COLUMNS
    assert list(sweep["alpha"]) == [0.0, 0.5, 1.0]
    assert os.path.exists(tmp_path / "first" / "experiment.json")

    second = tiny_spec(tmp_path / "second", alpha_grid=[0.0],
                       checkpoint=str(tmp_path / "first" / "checkpoint"))
    files = run_experiment(second, "sweep-alpha")
    again = read(files[0])
    assert len(again) == 1
    pd.testing.assert_series_equal(again.iloc[0], sweep.iloc[0], check_names=False)


def test_sweep_ghost_table(tmp_path):
    [path] = run_experiment(tiny_spec(tmp_path), "sweep-ghost")
    frame = read(path)
    assert list(frame.columns) == GHOST_COLUMNS
    assert list(frame["ghost_size"]) == [2, 4, 8]
    assert frame["best_alpha"].isin([0.0, 0.5, 1.0]).all()
    assert frame["test_accuracy"].between(0.0, 1.0).all()


def test_compare_table(tmp_path):
    [path] = run_experiment(tiny_spec(tmp_path), "compare")
    frame = read(path)
    assert list(frame.columns) == COMPARE_COLUMNS
    assert list(zip(frame["batch_size"], frame["scheme"])) == [
        (2, "batch"), (2, "group:2"), (8, "ghost:4"), (8, "batchgroup:2:2")]


def test_non_iid_table(tmp_path):
    [path] = run_experiment(tiny_spec(tmp_path), "non-iid")
    frame = read(path)
    assert list(frame.columns) == NON_IID_COLUMNS
    assert list(frame["sampling"]) == ["non_iid"] * 4 + ["iid"] * 4
    assert list(frame["scheme"][:4]) == ["batch", "ghost:2", "ghost:4", "batchgroup:2:2"]
    assert list(frame["ghost_size"][:3]) == [8, 2, 4]
    assert math.isnan(frame["ghost_size"][3])


def test_non_iid_without_control(tmp_path):
    [path] = run_experiment(tiny_spec(tmp_path, iid_control=False), "non-iid")
    assert set(read(path)["sampling"]) == {"non_iid"}


def test_bounds_tables(tmp_path):
    bounds_path, tightness_path = run_experiment(tiny_spec(tmp_path), "bounds")
    bounds = read(bounds_path)
    assert list(bounds.columns) == BOUNDS_COLUMNS
    assert len(bounds) == 3 * 2
    train_rows = bounds[bounds["mode"] == "train"]
    assert (train_rows["min"] >= train_rows["bound_lo"] - 1e-9).all()
    assert (train_rows["max"] <= train_rows["bound_hi"] + 1e-9).all()
    cells = dict(zip(train_rows["ghost_size"], train_rows["group_cells"]))
    assert cells == {2: 8, 4: 16, 8: 32}
    assert np.allclose(train_rows["bound_hi"], np.sqrt(train_rows["group_cells"] - 1))

    tightness = read(tightness_path)
    far = tightness[tightness["a"] == 1e6].iloc[0]
    assert far["value"] == pytest.approx(-math.sqrt(7), abs=1e-3)
    assert (tightness["value"] >= tightness["limit"] - 1e-12).all()


def test_inference_range_leaves_the_train_bound(tmp_path):
    spec = tiny_spec(tmp_path, dataset={**TINY["dataset"], "height": 1, "width": 1},
                     train={**TINY["train"], "epochs": 2}, ghost_sizes=[2])
    bounds_path, _ = run_experiment(spec, "bounds")
    bounds = read(bounds_path)
    assert (bounds["group_cells"] == 2).all()
    assert np.allclose(bounds["bound_hi"], 1.0)
    train_rows = bounds[bounds["mode"] == "train"]
    assert (train_rows["max"] <= 1.0 + 1e-9).all()
    infer_rows = bounds[bounds["mode"] == "infer"]
    outside = (infer_rows["min"] < infer_rows["bound_lo"]) | (infer_rows["max"] > infer_rows["bound_hi"])
    assert outside.any()


def test_weight_decay_table(tmp_path):
    spec = tiny_spec(tmp_path, train={**TINY["train"], "wd": {"delta": 0.05, "weights": True}})
    [path] = run_experiment(spec, "weight-decay")
    frame = read(path)
    assert list(frame.columns) == WEIGHT_DECAY_COLUMNS
    assert list(frame["variant"]) == ["off", "gamma_to_0", "gamma_to_1"]
    assert math.isnan(frame["gamma_target"][0])
    assert list(frame["gamma_target"][1:]) == [0.0, 1.0]
    assert (frame["delta"] == 0.05).all()
    assert frame["mean_gamma"][1] < frame["mean_gamma"][2]


def test_results_are_byte_identical(tmp_path):
    first = run_experiment(tiny_spec(tmp_path / "a"), "sweep-ghost")[0]
    second = run_experiment(tiny_spec(tmp_path / "b"), "sweep-ghost")[0]
    parallel = run_experiment(tiny_spec(tmp_path / "c", jobs=2), "sweep-ghost")[0]
    with open(first, "rb") as a, open(second, "rb") as b, open(parallel, "rb") as c:
        content = a.read()
        assert content == b.read()
        assert content == c.read()


def test_seed_changes_results(tmp_path):
    first = read(run_experiment(tiny_spec(tmp_path / "a", seed=0), "sweep-ghost")[0])
    second = read(run_experiment(tiny_spec(tmp_path / "b", seed=1), "sweep-ghost")[0])
    assert not first.equals(second)


def test_experiment_record(tmp_path):
    run_experiment(tiny_spec(tmp_path, n_seeds=2), "sweep-ghost")
    with open(tmp_path / "experiment.json", encoding="utf-8") as fh:
        record = json.load(fh)
    assert record["command"] == "sweep-ghost"
    assert record["n_seeds"] == 2
    assert record["train"]["wd"]["norm_params"] is False


@pytest.mark.slow
def test_non_iid_batches_hurt_batch_inference(tmp_path):
    spec = load_spec(None, out=str(tmp_path), dataset={"n_classes": 8, "separation": 2.0},
                     model={"widths": [16]},
                     train={"batch_size": 16, "epochs": 5, "scheme": "batch"},
                     ghost_sizes=[16], batch_group="batchgroup:2:4", classes_per_batch=2,
                     alpha_grid=[0.0])
    frame = read(run_experiment(spec, "non-iid")[0])
    plain = frame[frame["scheme"] == "batch"].set_index("sampling")
    assert plain.loc["non_iid", "alpha0_test_accuracy"] < plain.loc["iid", "alpha0_test_accuracy"]


def test_full_ghost_size_matches_plain_batch(tmp_path):
    ghost = read(run_experiment(tiny_spec(tmp_path / "ghost", ghost_sizes=[8]), "sweep-ghost")[0])
    plain = tiny_spec(tmp_path / "plain", compare=[{"batch_size": 8, "schemes": ["batch"]}])
    batch = read(run_experiment(plain, "compare")[0])
    for column in ["best_alpha", "test_accuracy", "test_xent", "alpha0_test_accuracy"]:
        assert ghost[column][0] == batch[column][0]


def test_retroactive_sweep_leaves_checkpoint_untouched(tmp_path):
    run_experiment(tiny_spec(tmp_path / "train"), "sweep-alpha")
    checkpoint = tmp_path / "train" / "checkpoint"
    before = {p.name: p.read_bytes() for p in checkpoint.iterdir()}

    wide = tiny_spec(tmp_path / "wide", alpha_grid=[0.0, 0.5, 1.0, 1.25, 1.5],
                     allow_alpha_extrapolation=True, checkpoint=str(checkpoint))
    frame = read(run_experiment(wide, "sweep-alpha")[0])
    assert list(frame["alpha"]) == [0.0, 0.5, 1.0, 1.25, 1.5]
    assert frame["val_xent"].notna().all()
    assert {p.name: p.read_bytes() for p in checkpoint.iterdir()} == before


# Small spatial extent and few training examples per class: batch statistics
# carry most of the class signal and the models overfit quickly.
OVERFIT = {
    "dataset": {"n_classes": 8, "n_train_per_class": 32, "n_val_per_class": 32,
                "n_test_per_class": 64, "channels": 4, "height": 2, "width": 2,
                "separation": 2.0, "noise": 1.0, "seed": 0},
    "model": {"widths": [16]},
    "alpha_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
    "n_seeds": 3,
}


@pytest.mark.slow
def test_non_iid_example_weighing_and_batch_group(tmp_path):
    spec = load_spec(None, out=str(tmp_path), **OVERFIT,
                     train={"batch_size": 16, "epochs": 8, "scheme": "batch"},
                     ghost_sizes=[4], batch_group="batchgroup:2:4", classes_per_batch=2)
    frame = read(run_experiment(spec, "non-iid")[0]).set_index(["sampling", "scheme"])
    plain = frame.loc[("non_iid", "batch")]
    assert plain["test_accuracy"] >= plain["alpha0_test_accuracy"]

    def gap(scheme):
        return (frame.loc[("iid", scheme), "alpha0_test_accuracy"]
                - frame.loc[("non_iid", scheme), "alpha0_test_accuracy"])

    assert gap("batchgroup:2:4") < gap("batch")


@pytest.mark.slow
def test_small_ghost_batches_beat_the_full_batch(tmp_path):
    spec = load_spec(None, out=str(tmp_path), **{**OVERFIT, "dataset": {
                         **OVERFIT["dataset"], "n_train_per_class": 16, "separation": 1.0}},
                     train={"batch_size": 32, "epochs": 15, "scheme": "batch"},
                     ghost_sizes=[2, 4, 8, 32])
    frame = read(run_experiment(spec, "sweep-ghost")[0]).set_index("ghost_size")
    full = frame.loc[32, "test_accuracy"]
    assert frame.loc[[2, 4, 8], "test_accuracy"].max() > full
