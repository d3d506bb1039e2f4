"""Model and config documents (JSON), CSV emission and atomic writes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .mdp import KlqModel

MODEL_FIELDS = ("kernels", "nominal_policies", "output", "initial_marginal", "horizon")


class ConfigError(ValueError):
    """Malformed config or model document (a usage error, not a domain error)."""


def model_to_dict(model: KlqModel) -> dict:
    phi0 = model.nominal_policies
    # store a single table when the nominal policy is time-invariant
    if np.all(phi0 == phi0[0]):
        phi0 = phi0[0]
    return {
        "kernels": model.kernels.tolist(),
        "nominal_policies": phi0.tolist(),
        "output": model.output.tolist(),
        "initial_marginal": model.initial_marginal.tolist(),
        "horizon": model.horizon,
    }


def model_from_dict(doc: dict) -> KlqModel:
    missing = [f for f in MODEL_FIELDS if f not in doc]
    if missing:
        raise ConfigError(f"model document lacks {', '.join(missing)}")
    try:
        horizon = int(doc["horizon"])
        arrays = {f: np.array(doc[f], dtype=float) for f in MODEL_FIELDS[:-1]}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model document has a malformed field: {exc}") from None
    nd = {"kernels": 3, "output": 2, "initial_marginal": 2}
    for name, want in nd.items():
        if arrays[name].ndim != want:
            raise ConfigError(f"{name} must be a {want}-D array, got {arrays[name].ndim}-D")
    if arrays["nominal_policies"].ndim not in (2, 3):
        raise ConfigError("nominal_policies must be a 2-D table or a 3-D sequence")
    return KlqModel(horizon=horizon, **arrays)


def load_model(path) -> KlqModel:
    return model_from_dict(load_json(path))


def save_model(model: KlqModel, path):
    atomic_write_text(path, json.dumps(model_to_dict(model)) + "\n")


def load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def atomic_write_text(path, text: str):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_series(path) -> np.ndarray:
    """One number per line, or the last column of a CSV with an optional header."""
    try:
        with open(path) as f:
            rows = [r for r in csv.reader(f) if r and r[0].strip()]
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    values = []
    for i, r in enumerate(rows):
        try:
            values.append(float(r[-1]))
        except ValueError:
            if i == 0:
                continue  # header
            raise ConfigError(f"{path}: non-numeric value {r[-1]!r} on line {i + 1}") from None
    return np.array(values)
