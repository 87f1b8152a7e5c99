"""
Artifact persistence
JSON and CSV writers/readers for trajectories, experiment results, drift
samples and calibrations. Every table goes through pandas.
"""

import json
import logging
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd

from dynamics import Trajectory
from observer import ObserverCalibration, samples_from_frame, samples_to_frame

logger = logging.getLogger(__name__)

TABLE_FORMATS = ("csv", "json")


def make_json_safe(obj):
    """Recursively convert NumPy and enum values to JSON-native types; non-finite floats become None"""
    if isinstance(obj, np.ndarray):
        return make_json_safe(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return make_json_safe(obj.item())
    if isinstance(obj, dict):
        return {str(key): make_json_safe(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [make_json_safe(item) for item in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def ensure_dir(path: Union[str, Path]) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_json(path: Union[str, Path], payload) -> Path:
    p = Path(path)
    ensure_dir(p.parent)
    p.write_text(json.dumps(make_json_safe(payload), indent=2, sort_keys=True, ensure_ascii=False))
    logger.info(f"Wrote {p}")
    return p


def read_json(path: Union[str, Path]):
    return json.loads(Path(path).read_text())


def write_table(frame: pd.DataFrame, path: Union[str, Path], fmt: str = "csv") -> Path:
    """Write ``frame`` as CSV or JSON records; the suffix of ``path`` follows ``fmt``"""
    if fmt not in TABLE_FORMATS:
        raise ValueError(f"Unknown table format {fmt!r}; expected one of {TABLE_FORMATS}")
    p = Path(path).with_suffix(f".{fmt}")
    ensure_dir(p.parent)
    if fmt == "csv":
        frame.to_csv(p, index=False, float_format="%.17g")
    else:
        frame.to_json(p, orient="records", double_precision=15, indent=2)
    logger.info(f"Wrote {p} ({len(frame)} rows)")
    return p


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    p = Path(path)
    if p.suffix == ".json":
        return pd.read_json(p, orient="records")
    return pd.read_csv(p)


def save_trajectory(traj, out_dir: Union[str, Path], name: str = "trajectory", fmt: str = "json") -> Path:
    if fmt == "json":
        return write_json(Path(out_dir) / f"{name}.json", traj.to_dict())
    return write_table(traj.to_frame(), Path(out_dir) / name, fmt)


def load_trajectory(path: Union[str, Path]):
    return Trajectory.from_dict(read_json(path))


def save_samples(samples, path: Union[str, Path]) -> Path:
    return write_table(samples_to_frame(samples), path, "csv")


def load_samples(path: Union[str, Path]) -> List:
    return samples_from_frame(read_table(path))


def save_calibration(cal, path: Union[str, Path]) -> Path:
    return write_json(path, cal.to_dict())


def load_calibration(path: Union[str, Path]):
    return ObserverCalibration.from_dict(read_json(path))
