"""Error metrics, dataset partitioning and report serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "EvalReport",
    "type": "object",
    "required": ["rmse", "fit_percent", "fit_percent_channels", "n_samples", "metadata"],
    "properties": {
        "rmse": {"type": "number", "minimum": 0},
        "fit_percent": {"type": "number", "maximum": 100},
        "fit_percent_channels": {"type": "array", "items": {"type": ["number", "null"], "maximum": 100}},
        "rmse_channels": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "n_samples": {"type": "integer", "minimum": 1},
        "error_csv": {"type": ["string", "null"]},
        "metadata": {
            "type": "object",
            "required": ["model_id", "dataset_id", "seeds"],
            "properties": {
                "model_id": {"type": "string"},
                "dataset_id": {"type": "string"},
                "seeds": {"type": "object"},
            },
        },
    },
}


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=float)
    b = np.asarray(y_pred, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("metrics need at least one sample")
    return a, b


def rmse(y_true, y_pred) -> float:
    """Root-mean-squared error over all samples and channels."""
    a, b = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def fit_percent(y_true, y_pred) -> float:
    """Normalized fit ``100 (1 - |y - yhat| / |y - mean(y)|)``.

    For multi-channel data the mean is taken per channel (axis 0) and the
    norms over the flattened residual.
    """
    a, b = _pair(y_true, y_pred)
    centre = a.mean(axis=0) if a.ndim > 1 else a.mean()
    denom = np.linalg.norm((a - centre).ravel())
    if denom == 0.0:
        raise ValueError("fit_percent is undefined for a constant reference signal")
    return float(100.0 * (1.0 - np.linalg.norm((a - b).ravel()) / denom))


def fit_percent_channels(y_true, y_pred) -> list[float | None]:
    """Per-channel fit; ``None`` for channels whose reference is constant."""
    a, b = _pair(y_true, y_pred)
    a2, b2 = a.reshape(len(a), -1), b.reshape(len(b), -1)
    out = []
    for j in range(a2.shape[1]):
        try:
            out.append(fit_percent(a2[:, j], b2[:, j]))
        except ValueError:
            out.append(None)
    return out


def split_source_target(items: Sequence, fractions=(0.6, 0.2, 0.2), seed: int = 0,
                        target_fraction: float = 0.2):
    """Shuffle ``items`` and split into source train/val/test and a target set.

    ``target_fraction`` of the items go to the target set; the remaining
    source items are split by ``fractions`` (train, val, test), which must
    sum to one. Rounding remainders go to the training split.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    if not 0.0 <= target_fraction < 1.0:
        raise ValueError("target_fraction must lie in [0, 1)")
    n = len(items)
    n_target = int(round(target_fraction * n))
    n_source = n - n_target
    n_val = int(round(fr[1] * n_source))
    n_test = int(round(fr[2] * n_source))
    n_train = n_source - n_val - n_test
    needed = [(n_train, fr[0]), (n_val, fr[1]), (n_test, fr[2]), (n_target, target_fraction)]
    if n == 0 or any(count < 1 for count, f in needed if f > 0) or n_train < 0:
        raise ValueError(f"{n} items are not enough for fractions {tuple(fr)} and target {target_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    train = pick(order[:n_train])
    val = pick(order[n_train:n_train + n_val])
    test = pick(order[n_train + n_val:n_source])
    target = pick(order[n_source:])
    return (train, val, test), target


@dataclass
class EvalReport:
    rmse: float
    fit_percent: float
    fit_percent_channels: list
    rmse_channels: list
    errors: np.ndarray = field(repr=False)
    model_id: str = ""
    dataset_id: str = ""
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    error_csv: str | None = None

    @classmethod
    def from_predictions(cls, y_true, y_pred, model_id="", dataset_id="", seeds=None, **extra):
        a, b = _pair(y_true, y_pred)
        a2, b2 = a.reshape(len(a), -1), b.reshape(len(b), -1)
        err = b2 - a2
        return cls(rmse(a2, b2), fit_percent(a2, b2), fit_percent_channels(a2, b2),
                   [float(v) for v in np.sqrt(np.mean(err ** 2, axis=0))], err,
                   model_id, dataset_id, dict(seeds or {}), extra)

    def to_dict(self) -> dict:
        d = {
            "rmse": self.rmse,
            "fit_percent": self.fit_percent,
            "fit_percent_channels": self.fit_percent_channels,
            "rmse_channels": self.rmse_channels,
            "n_samples": int(len(self.errors)),
            "error_csv": self.error_csv,
            "metadata": {"model_id": self.model_id, "dataset_id": self.dataset_id, "seeds": self.seeds},
        }
        d.update(self.extra)
        return d

    def validate(self):
        import jsonschema

        jsonschema.validate(self.to_dict(), REPORT_SCHEMA)

    def save(self, path: str | Path, with_errors: bool = True) -> Path:
        """Write the report JSON and, optionally, the error series CSV beside it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if with_errors:
            csv_path = path.with_name(path.stem + "_errors.csv")
            write_error_series(csv_path, self.errors)
            self.error_csv = csv_path.name
        self.validate()
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def write_error_series(path: str | Path, errors, dt: float | None = None):
    errors = np.asarray(errors, dtype=float).reshape(len(errors), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + ([] if dt is None else ["t"]) + [f"e{j}" for j in range(errors.shape[1])])
        for k, row in enumerate(errors):
            w.writerow([k] + ([] if dt is None else [k * dt]) + [repr(float(v)) for v in row])


def load_report(path: str | Path) -> dict:
    import jsonschema

    d = json.loads(Path(path).read_text())
    jsonschema.validate(d, REPORT_SCHEMA)
    return d
