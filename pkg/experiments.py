"""
Harness commands: each one plans every training run of an experiment,
validates the whole plan, runs it (optionally on a worker pool) and writes
result CSVs in grid order.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from bounds import RangeTracker, tightness_sweep
from checkpoint import load_checkpoint, read_manifest, save_checkpoint
from errors import ConfigurationError, DimensionError, InputError, SamplingError
from models import ExperimentSpec, ModelSpec, SyntheticSpec, TrainConfig, WeightDecayConfig
from partition import NormScheme, group_cells, partition_of
from training import Network, evaluate, make_dataset, norm_params_summary, train
from utils import ensure_directories, save_dataframe_to_csv, save_json

logger = logging.getLogger(__name__)

COMMANDS = ("sweep-alpha", "sweep-ghost", "compare", "non-iid", "bounds", "weight-decay")

ALPHA_COLUMNS = ["alpha", "val_accuracy", "val_xent", "test_accuracy", "test_xent"]
GHOST_COLUMNS = ["ghost_size", "best_alpha", "test_accuracy", "test_xent",
                 "alpha0_test_accuracy", "alpha0_test_xent"]
COMPARE_COLUMNS = ["batch_size", "scheme", "best_alpha", "test_accuracy", "test_xent",
                   "alpha0_test_accuracy", "alpha0_test_xent"]
NON_IID_COLUMNS = ["sampling", "scheme", "ghost_size", "alpha0_test_accuracy",
                   "test_accuracy", "best_alpha"]
BOUNDS_COLUMNS = ["ghost_size", "layer", "mode", "group_cells", "min", "max",
                  "bound_lo", "bound_hi"]
WEIGHT_DECAY_COLUMNS = ["variant", "delta", "gamma_target", "best_alpha", "test_accuracy",
                        "test_xent", "mean_gamma", "mean_beta"]


@dataclass
class RunTask:
    """One training run of an experiment grid point under one seed."""
    point: int
    labels: Dict[str, Any]
    dataset: SyntheticSpec
    model: ModelSpec
    train: TrainConfig
    alphas: List[float]
    extrapolate: bool = False
    track_ranges: bool = False
    bound_alpha: float = 0.0
    keep_model: bool = False


@dataclass
class RunResult:
    point: int
    labels: Dict[str, Any]
    alpha_rows: List[Dict[str, float]]
    summary: Dict[str, float]
    history: pd.DataFrame
    ranges: Optional[pd.DataFrame] = None
    model: Optional[Network] = field(default=None, repr=False)


def load_spec(config_path: Optional[str], **overrides) -> ExperimentSpec:
    """
    Read an ExperimentSpec from JSON and apply non-None overrides
    (command, out, seed, jobs).
    """
    data: Dict[str, Any] = {}
    if config_path:
        if not os.path.exists(config_path):
            raise InputError(f"Config file not found: {config_path}")
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config {config_path} is not valid JSON: {e}")
    data.update({key: value for key, value in overrides.items() if value is not None})
    return _validated(ExperimentSpec, data)


def _validated(model_cls, data):
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e))


def _train_config(base: TrainConfig, **updates) -> TrainConfig:
    data = base.model_dump()
    data.update(updates)
    return _validated(TrainConfig, data)


def _eval_alphas(grid: List[float]) -> List[float]:
    """The grid in its own order, with 0 prepended when missing."""
    alphas = []
    for alpha in ([0.0] if 0.0 not in grid else []) + list(grid):
        if alpha not in alphas:
            alphas.append(float(alpha))
    return alphas


def _seeds(spec: ExperimentSpec) -> List[int]:
    return [spec.seed + k for k in range(spec.n_seeds)]


def _grid_tasks(spec: ExperimentSpec, points: List[Dict[str, Any]],
                alphas: Optional[List[float]] = None, **task_options) -> List[RunTask]:
    """
    Expand grid points (labels plus TrainConfig updates under "updates") into
    one task per seed. Alpha = 0 joins the evaluation grid unless `alphas` is given.
    """
    alphas = _eval_alphas(spec.alpha_grid) if alphas is None else list(alphas)
    tasks = []
    for index, point in enumerate(points):
        for seed in _seeds(spec):
            config = _train_config(spec.train, seed=seed, **point["updates"])
            tasks.append(RunTask(point=index, labels=point["labels"], dataset=spec.dataset,
                                 model=spec.model, train=config,
                                 alphas=alphas,
                                 extrapolate=spec.allow_alpha_extrapolation,
                                 bound_alpha=spec.bound_alpha, **task_options))
    return tasks


def validate_task(task: RunTask):
    """Raise before training if the run cannot execute on its batch shapes."""
    cfg = task.train
    ds = task.dataset
    n_train = ds.n_classes * ds.n_train_per_class
    if cfg.batch_size > n_train:
        raise SamplingError(f"Batch size {cfg.batch_size} exceeds {n_train} training examples")
    if cfg.sampling == "non_iid":
        if cfg.classes_per_batch > ds.n_classes:
            raise SamplingError(
                f"{cfg.classes_per_batch} classes per batch requested, dataset has {ds.n_classes}")
        if cfg.batch_size // cfg.classes_per_batch > ds.n_train_per_class:
            raise SamplingError(
                f"Batches need {cfg.batch_size // cfg.classes_per_batch} examples per class, "
                f"dataset has {ds.n_train_per_class}")
    for alpha in list(cfg.alpha_grid) + list(task.alphas):
        if alpha > 1.0 and not task.extrapolate:
            raise ConfigurationError(
                f"alpha {alpha} > 1 needs allow_alpha_extrapolation: true")
    for width in task.model.widths:
        partition_of(cfg.scheme, (cfg.batch_size, width, ds.height, ds.width), "train")
        partition_of(cfg.scheme, (1, width, ds.height, ds.width), "infer")


def check_checkpoint(directory: str, dataset: SyntheticSpec):
    """Raise unless the checkpoint exists and fits the dataset's channels and classes."""
    manifest = read_manifest(directory)
    if manifest.get("in_channels") != dataset.channels:
        raise DimensionError(
            f"Checkpoint expects {manifest.get('in_channels')} input channels, "
            f"dataset has {dataset.channels}")
    if manifest.get("n_classes") != dataset.n_classes:
        raise DimensionError(
            f"Checkpoint predicts {manifest.get('n_classes')} classes, "
            f"dataset has {dataset.n_classes}")


def plan_runs(spec: ExperimentSpec, command: str) -> List[RunTask]:
    """Every training run of `command`, validated before any of them starts."""
    if command not in COMMANDS:
        raise ConfigurationError(f"Unknown command {command!r}")
    batch = spec.train.batch_size
    if command == "sweep-alpha":
        if spec.checkpoint is not None:
            check_checkpoint(spec.checkpoint, spec.dataset)
            return []
        points = [{"labels": {}, "updates": {}}]
        tasks = _grid_tasks(spec, points, alphas=spec.alpha_grid, keep_model=True)
    elif command in ("sweep-ghost", "bounds"):
        for size in spec.ghost_sizes:
            if batch % size != 0:
                raise ConfigurationError(f"ghost size {size} does not divide batch size {batch}")
        points = [{"labels": {"ghost_size": size},
                   "updates": {"scheme": NormScheme(kind="ghost", ghost_size=size)}}
                  for size in spec.ghost_sizes]
        tasks = _grid_tasks(spec, points, track_ranges=command == "bounds")
    elif command == "compare":
        points = [{"labels": {"batch_size": cell.batch_size, "scheme": scheme.spec_string(False)},
                   "updates": {"batch_size": cell.batch_size, "scheme": scheme}}
                  for cell in spec.compare for scheme in cell.schemes]
        tasks = _grid_tasks(spec, points)
    elif command == "non-iid":
        tasks = _grid_tasks(spec, _non_iid_points(spec))
    else:
        tasks = _grid_tasks(spec, _weight_decay_points(spec))

    for task in tasks:
        validate_task(task)
    logger.info("Planned %d training runs for %s", len(tasks), command)
    return tasks


def _non_iid_points(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    batch = spec.train.batch_size
    for size in spec.ghost_sizes:
        if batch % size != 0:
            raise ConfigurationError(f"ghost size {size} does not divide batch size {batch}")
    schemes = [(NormScheme(kind="batch"), batch)]
    schemes += [(NormScheme(kind="ghost", ghost_size=size), size)
                for size in spec.ghost_sizes if size < batch]
    schemes.append((spec.batch_group, None))
    samplings = ["non_iid", "iid"] if spec.iid_control else ["non_iid"]
    points = []
    for sampling in samplings:
        for scheme, ghost_size in schemes:
            points.append({
                "labels": {"sampling": sampling, "scheme": scheme.spec_string(False),
                           "ghost_size": ghost_size},
                "updates": {"scheme": scheme, "sampling": sampling,
                            "classes_per_batch": spec.classes_per_batch},
            })
    return points


def _weight_decay_points(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    base = spec.train.wd
    if base.delta <= 0.0:
        raise ConfigurationError("weight-decay needs wd.delta > 0")
    variants = [
        ("off", WeightDecayConfig(delta=base.delta, gamma_target=1.0, apply_to_norm_params=False,
                                  apply_to_weights=base.apply_to_weights)),
        ("gamma_to_0", WeightDecayConfig(delta=base.delta, gamma_target=0.0,
                                         apply_to_norm_params=True,
                                         apply_to_weights=base.apply_to_weights)),
        ("gamma_to_1", WeightDecayConfig(delta=base.delta, gamma_target=1.0,
                                         apply_to_norm_params=True,
                                         apply_to_weights=base.apply_to_weights)),
    ]
    return [{"labels": {"variant": name, "delta": wd.delta,
                        "gamma_target": wd.gamma_target if wd.apply_to_norm_params else np.nan},
             "updates": {"wd": wd}} for name, wd in variants]


def _alpha_rows(model: Network, data, alphas: List[float], extrapolate: bool) -> List[Dict[str, float]]:
    rows = []
    for alpha in alphas:
        val_accuracy, val_xent = evaluate(model, data.val, alpha, extrapolate)
        test_accuracy, test_xent = evaluate(model, data.test, alpha, extrapolate)
        rows.append({"alpha": alpha, "val_accuracy": val_accuracy, "val_xent": val_xent,
                     "test_accuracy": test_accuracy, "test_xent": test_xent})
    return rows


def tuned_summary(alpha_rows: List[Dict[str, float]], metric: str) -> Dict[str, float]:
    """
    Select alpha on validation (highest accuracy or lowest cross-entropy,
    earliest grid point on ties) and report test metrics there and at alpha = 0.
    """
    if metric == "accuracy":
        scores = [-row["val_accuracy"] for row in alpha_rows]
    else:
        scores = [row["val_xent"] for row in alpha_rows]
    best = alpha_rows[int(np.argmin(scores))]
    plain = next(row for row in alpha_rows if row["alpha"] == 0.0)
    return {"best_alpha": best["alpha"], "test_accuracy": best["test_accuracy"],
            "test_xent": best["test_xent"], "alpha0_test_accuracy": plain["test_accuracy"],
            "alpha0_test_xent": plain["test_xent"]}


def run_task(task: RunTask) -> RunResult:
    """Train one configuration and evaluate it over the alpha grid."""
    data = make_dataset(task.dataset)
    tracker = RangeTracker() if task.track_ranges else None
    model, history = train(task.model, data, task.train, tracker=tracker,
                           extrapolate=task.extrapolate)
    result = RunResult(point=task.point, labels=task.labels,
                       alpha_rows=_alpha_rows(model, data, task.alphas, task.extrapolate),
                       summary=norm_params_summary(model), history=history)
    if tracker is not None:
        evaluate(model, data.test, task.bound_alpha, task.extrapolate, tracker=tracker)
        batch, height, width = task.train.batch_size, task.dataset.height, task.dataset.width
        cells = {i: group_cells(task.train.scheme, (batch, w, height, width), "train")
                 for i, w in enumerate(task.model.widths)}
        ranges = tracker.to_frame(cells)
        ranges["ghost_size"] = task.labels.get("ghost_size")
        ranges["group_cells"] = ranges["layer"].map(cells)
        result.ranges = ranges[BOUNDS_COLUMNS]
    if task.keep_model:
        result.model = model
    return result


def execute(tasks: List[RunTask], jobs: int = 1) -> List[RunResult]:
    """Run tasks, in parallel when jobs > 1; results keep task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [run_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_task, tasks))


def _by_point(results: List[RunResult]) -> List[List[RunResult]]:
    grouped: Dict[int, List[RunResult]] = {}
    for result in results:
        grouped.setdefault(result.point, []).append(result)
    return [grouped[point] for point in sorted(grouped)]


def _median(rows: List[Dict[str, float]]) -> Dict[str, float]:
    """Per-key median over seeds (identity for a single seed)."""
    return {key: float(np.median([row[key] for row in rows])) for key in rows[0]}


def _summary_rows(spec: ExperimentSpec, results: List[RunResult], columns: List[str],
                  with_params: bool = False) -> pd.DataFrame:
    rows = []
    for seeds in _by_point(results):
        metrics = [tuned_summary(r.alpha_rows, spec.selection_metric) for r in seeds]
        if with_params:
            metrics = [{**m, **r.summary} for m, r in zip(metrics, seeds)]
        rows.append({**seeds[0].labels, **_median(metrics)})
    return pd.DataFrame(rows, columns=columns)


def _write(frame: pd.DataFrame, out: str, filename: str) -> str:
    ensure_directories(out)
    path = os.path.join(out, filename)
    save_dataframe_to_csv(frame, path)
    logger.info("Wrote %s", path)
    return path


def cmd_sweep_alpha(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """
    Retroactive alpha sweep of one trained model: the checkpoint named in the
    spec, or a model trained here first (saved under <out>/checkpoint).
    Evaluation never modifies the model.
    """
    tasks = plan_runs(spec, "sweep-alpha") if tasks is None else tasks
    if spec.checkpoint is not None:
        model = load_checkpoint(spec.checkpoint)
        data = make_dataset(spec.dataset)
        rows = _alpha_rows(model, data, spec.alpha_grid, spec.allow_alpha_extrapolation)
        return [_write(pd.DataFrame(rows, columns=ALPHA_COLUMNS), spec.out, "alpha_sweep.csv")]

    results = execute(tasks, spec.jobs)
    rows = [_median(list(per_seed)) for per_seed in zip(*[r.alpha_rows for r in results])]
    files = [_write(pd.DataFrame(rows, columns=ALPHA_COLUMNS), spec.out, "alpha_sweep.csv"),
             _write(results[0].history, spec.out, "history.csv")]
    save_checkpoint(results[0].model, os.path.join(spec.out, "checkpoint"))
    return files


def cmd_sweep_ghost(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """One training run per ghost batch size; tuned-alpha and alpha = 0 test metrics."""
    tasks = plan_runs(spec, "sweep-ghost") if tasks is None else tasks
    results = execute(tasks, spec.jobs)
    return [_write(_summary_rows(spec, results, GHOST_COLUMNS), spec.out, "ghost_sweep.csv")]


def cmd_compare_schemes(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """Tuned-alpha test accuracy over the (batch size, scheme) grid."""
    tasks = plan_runs(spec, "compare") if tasks is None else tasks
    results = execute(tasks, spec.jobs)
    return [_write(_summary_rows(spec, results, COMPARE_COLUMNS), spec.out, "compare.csv")]


def cmd_non_iid(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """Batch, ghost and batch-group schemes trained on class-restricted batches."""
    tasks = plan_runs(spec, "non-iid") if tasks is None else tasks
    results = execute(tasks, spec.jobs)
    return [_write(_summary_rows(spec, results, NON_IID_COLUMNS), spec.out, "non_iid.csv")]


def cmd_bounds(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """Observed normalized ranges against the train-mode bound, plus the tightness sweep."""
    tasks = plan_runs(spec, "bounds") if tasks is None else tasks
    results = execute(tasks, spec.jobs)
    keys = ["ghost_size", "layer", "mode", "group_cells", "bound_lo", "bound_hi"]
    frames = []
    for seeds in _by_point(results):
        stacked = pd.concat([r.ranges for r in seeds], ignore_index=True)
        envelope = stacked.groupby(keys, sort=False, as_index=False).agg(
            min=("min", "min"), max=("max", "max"))
        frames.append(envelope[BOUNDS_COLUMNS])
    tightness = tightness_sweep(spec.tightness_B, spec.tightness_a, spec.train.epsilon)
    return [_write(pd.concat(frames, ignore_index=True), spec.out, "bounds.csv"),
            _write(tightness, spec.out, "tightness.csv")]


def cmd_weight_decay(spec: ExperimentSpec, tasks: Optional[List[RunTask]] = None) -> List[str]:
    """Scale/shift decay off, toward gamma = 0 and toward gamma = 1."""
    tasks = plan_runs(spec, "weight-decay") if tasks is None else tasks
    results = execute(tasks, spec.jobs)
    frame = _summary_rows(spec, results, WEIGHT_DECAY_COLUMNS, with_params=True)
    return [_write(frame, spec.out, "weight_decay.csv")]


HANDLERS = {
    "sweep-alpha": cmd_sweep_alpha,
    "sweep-ghost": cmd_sweep_ghost,
    "compare": cmd_compare_schemes,
    "non-iid": cmd_non_iid,
    "bounds": cmd_bounds,
    "weight-decay": cmd_weight_decay,
}


def run_experiment(spec: ExperimentSpec, command: Optional[str] = None) -> List[str]:
    """
    Validate the full plan, then run one harness command. Returns the paths of
    the files written; nothing is written when validation fails.
    """
    command = command or spec.command
    if command not in HANDLERS:
        raise ConfigurationError(f"Unknown command {command!r}; expected one of {COMMANDS}")
    spec = spec.model_copy(update={"command": command})
    tasks = plan_runs(spec, command)
    ensure_directories(spec.out)
    save_json(spec.model_dump(mode="json", by_alias=True), os.path.join(spec.out, "experiment.json"))
    logger.info("Running %s into %s", command, spec.out)
    return HANDLERS[command](spec, tasks)
