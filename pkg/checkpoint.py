"""
Model checkpoints: a directory with a manifest, one CSV per weight array and
per-layer NormParams and MovingMoments CSVs.
"""

import json
import logging
import os
from typing import Dict

import numpy as np
import pandas as pd

from errors import DimensionError, InputError
from layers import NormParams
from models import ModelSpec
from moments import MovingMoments, from_mean_var
from partition import NormScheme
from training import Network
from utils import ensure_directories, save_json

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def _params_file(layer: int) -> str:
    return f"norm{layer}_params.csv"


def _moving_file(layer: int) -> str:
    return f"norm{layer}_moving.csv"


def save_checkpoint(model: Network, directory: str) -> str:
    """Write the model to `directory` and return the manifest path."""
    ensure_directories(directory)
    weights = {f"mix{i}": w for i, w in enumerate(model.mixing)}
    weights["classifier_w"] = model.classifier_w
    weights["classifier_b"] = model.classifier_b.reshape(1, -1)

    for name, array in weights.items():
        pd.DataFrame(array).to_csv(os.path.join(directory, f"{name}.csv"), index=False,
                                   header=False, float_format="%.17g")
    for i, norm in enumerate(model.norms):
        frame = pd.DataFrame({"channel": np.arange(norm.n_channels),
                              "gamma": norm.params.gamma,
                              "beta": norm.params.beta})
        frame.to_csv(os.path.join(directory, _params_file(i)), index=False, float_format="%.17g")
        norm.moving.to_csv(os.path.join(directory, _moving_file(i)))

    manifest = {
        "scheme": model.scheme.spec_string(),
        "model": model.spec.model_dump(),
        "in_channels": model.in_channels,
        "n_classes": model.n_classes,
        "epsilon": model.epsilon,
        "rho": model.rho,
        "shapes": {name: list(array.shape) for name, array in weights.items()},
    }
    path = os.path.join(directory, MANIFEST)
    save_json(manifest, path)
    logger.info("Checkpoint written to %s", directory)
    return path


def _read_matrix(directory: str, name: str, shape) -> np.ndarray:
    path = os.path.join(directory, f"{name}.csv")
    if not os.path.exists(path):
        raise InputError(f"Checkpoint weight file not found: {path}")
    array = pd.read_csv(path, header=None, float_precision="round_trip").to_numpy(dtype=np.float64)
    if list(array.shape) != list(shape):
        raise DimensionError(f"{name} has shape {array.shape}, manifest says {tuple(shape)}")
    return array


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise InputError(f"Checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise InputError(f"Checkpoint manifest {path} is not valid JSON: {e}")


def load_checkpoint(directory: str) -> Network:
    """Rebuild a Network from a checkpoint directory."""
    manifest = read_manifest(directory)

    model = Network(ModelSpec.model_validate(manifest["model"]), manifest["in_channels"],
                    manifest["n_classes"], NormScheme.model_validate(manifest["scheme"]),
                    epsilon=manifest["epsilon"], rho=manifest["rho"])
    shapes = manifest["shapes"]
    model.mixing = [_read_matrix(directory, f"mix{i}", shapes[f"mix{i}"])
                    for i in range(len(model.mixing))]
    model.classifier_w = _read_matrix(directory, "classifier_w", shapes["classifier_w"])
    model.classifier_b = _read_matrix(directory, "classifier_b", shapes["classifier_b"]).ravel()

    for i, (norm, width) in enumerate(zip(model.norms, model.spec.widths)):
        params_path = os.path.join(directory, _params_file(i))
        if not os.path.exists(params_path):
            raise InputError(f"Checkpoint parameter file not found: {params_path}")
        frame = pd.read_csv(params_path, float_precision="round_trip").sort_values("channel")
        norm.params = NormParams(frame["gamma"].to_numpy(), frame["beta"].to_numpy(),
                                 manifest["epsilon"])
        norm.moving = MovingMoments.read_csv(os.path.join(directory, _moving_file(i)))
        if norm.params.n_channels != width or norm.moving.n_channels != width:
            raise DimensionError(f"Layer {i} files do not match its width {width}")
    logger.info("Checkpoint loaded from %s", directory)
    return model


def import_statistics(model: Network, statistics: Dict[int, tuple]) -> Network:
    """
    Replace moving moments with conventional (mean, var) statistics per layer,
    e.g. running averages exported from another framework.
    """
    for layer, (mean, var) in statistics.items():
        norm = model.norms[layer]
        moving = from_mean_var(mean, var, norm.moving.rho)
        if moving.n_channels != norm.n_channels:
            raise DimensionError(
                f"Layer {layer} has {norm.n_channels} channels, statistics cover {moving.n_channels}")
        norm.moving = moving
    return model
