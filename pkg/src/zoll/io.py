"""Metric descriptors and JSON helpers shared by the command line.

A metric is stored as a small JSON record with a ``kind`` field:

    {"kind": "round"}
    {"kind": "anisotropic", "matrix": [1, 1, 1.3]}
    {"kind": "frame-quadratic", "a": 1, "b": 4}
    {"kind": "enveloping", "center": [...], "radius": ..., "bumps": [...], ...}
    {"kind": "crofton", "family": "family.json", "config": {...}}

Relative family paths are resolved against the descriptor's directory.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .crofton import GeodesicFamily, ReconstructionConfig, reconstruct_metric
from .enveloping import EnvelopingFamily, EnvelopingMetric, build_metric
from .finsler import AnisotropicMetric, FinslerMetric, FrameQuadraticMetric, RoundMetric

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent input record."""


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
    return path


def check_fields(record: dict, allowed, where: str) -> None:
    if not isinstance(record, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(record) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")


def metric_from_descriptor(d: dict, base_dir=None, audit: bool = True) -> FinslerMetric:
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "round":
            check_fields(d, {"kind"}, "round metric")
            return RoundMetric()
        if kind == "anisotropic":
            check_fields(d, {"kind", "matrix"}, "anisotropic metric")
            return AnisotropicMetric(tuple(d.get("matrix", (1.0, 1.0, 1.3))))
        if kind == "frame-quadratic":
            check_fields(d, {"kind", "a", "b"}, "frame-quadratic metric")
            return FrameQuadraticMetric(float(d.get("a", 1.0)), float(d.get("b", 4.0)))
        if kind == "enveloping":
            fam = EnvelopingFamily.from_dict(d)
            return build_metric(fam) if audit else EnvelopingMetric(fam)
        if kind == "crofton":
            check_fields(d, {"kind", "family", "config"}, "crofton metric")
            if "family" not in d:
                raise ConfigError("crofton metric needs a family path")
            path = Path(d["family"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            cfg = d.get("config", {})
            check_fields(cfg, ReconstructionConfig.__dataclass_fields__, "reconstruction config")
            return reconstruct_metric(GeodesicFamily.load(path), ReconstructionConfig(**cfg), audit=audit)
    except (KeyError, TypeError) as err:
        raise ConfigError(f"{kind} metric: {err}") from None
    raise ConfigError(f"unknown metric kind {kind!r}")


def load_metric(path, audit: bool = True) -> FinslerMetric:
    path = Path(path)
    return metric_from_descriptor(read_json(path), path.parent, audit)


def metric_descriptor(metric: FinslerMetric, family_path=None) -> dict:
    if metric.kind == "crofton":
        if family_path is None:
            raise ValueError("a reconstructed metric is stored through its family file")
        cfg = metric.cfg
        return {
            "kind": "crofton",
            "family": str(family_path),
            "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        }
    if metric.kind == "frame-quadratic":
        return {"kind": metric.kind, "a": metric.a, "b": metric.b}
    return metric.describe()


def save_metric(metric: FinslerMetric, path, family_path=None) -> Path:
    return write_json(metric_descriptor(metric, family_path), path)
