"""Run configuration shared by every pipeline command.

One JSON file describes a full run: dataset generation ranges, the two
physiological regimes, network sizes, loss weights, seeds, and output
paths.  Sections mirror the library dataclasses one to one, every seed
is an explicit value (nothing is drawn from the clock), and unknown
keys anywhere in the tree are rejected with their dotted path so typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .meshdeform import MdConfig
from .oracle import CarreauParams, PhysioParams
from .pipeline.dataset import DatasetConfig
from .pipeline.training import TrainConfig
from .pointnet import PnConfig, SetAbstraction
from .segnet import SegConfig


@dataclass
class Paths:
    """Where a run reads its dataset and writes its artifacts."""

    data_dir: str = "data"
    run_dir: str = "run"

    def __post_init__(self):
        if not self.data_dir or not self.run_dir:
            raise ValidationError("paths must be non-empty strings")


def _check_keys(data, allowed, path):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {path!r} must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValidationError(
            f"unknown config key {path + '.' + unknown[0]!r}"
            + (f" (+{len(unknown) - 1} more)" if len(unknown) > 1 else ""))


def _build(cls, data, path, nested=()):
    """Construct dataclass cls from a plain dict, rejecting unknown keys."""
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(data, names, path)
    kwargs = dict(data)
    for key, sub_cls in nested:
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = _build(sub_cls, kwargs[key], f"{path}.{key}")
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad config section {path!r}: {exc}") from exc


def _physio(regime, data, path):
    names = [f.name for f in dataclasses.fields(PhysioParams)
             if f.name != "regime"]
    _check_keys(data, names, path)
    kwargs = dict(data)
    if "carreau" in kwargs and kwargs["carreau"] is not None:
        kwargs["carreau"] = _build(CarreauParams, kwargs["carreau"],
                                   f"{path}.carreau")
    return PhysioParams(regime=regime, **kwargs)


def _plain(obj):
    """Dataclass tree to JSON-ready primitives."""
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class RunConfig:
    """Everything a reproducible run needs, in one validated object."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    segnet: SegConfig = field(default_factory=SegConfig)
    meshdeform: MdConfig = field(default_factory=MdConfig)
    pointnet: PnConfig = field(default_factory=PnConfig)
    physio_rest: PhysioParams = field(default_factory=PhysioParams.rest)
    physio_hyperemic: PhysioParams = field(
        default_factory=PhysioParams.hyperemic)
    paths: Paths = field(default_factory=Paths)

    @classmethod
    def default(cls):
        return cls()

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, ["dataset", "training", "segnet", "meshdeform",
                           "pointnet", "physio", "paths"], "config")
        kwargs = {}
        if "dataset" in data:
            kwargs["dataset"] = _build(DatasetConfig, data["dataset"],
                                       "dataset")
        if "training" in data:
            kwargs["training"] = _build(TrainConfig, data["training"],
                                        "training")
        if "segnet" in data:
            kwargs["segnet"] = _build(SegConfig, data["segnet"], "segnet")
        if "meshdeform" in data:
            kwargs["meshdeform"] = _build(MdConfig, data["meshdeform"],
                                          "meshdeform")
        if "pointnet" in data:
            kwargs["pointnet"] = _build(
                PnConfig, data["pointnet"], "pointnet",
                nested=(("sa1", SetAbstraction), ("sa2", SetAbstraction)))
        if "physio" in data:
            _check_keys(data["physio"], ["rest", "hyperemic"], "physio")
            for regime in ("rest", "hyperemic"):
                if regime in data["physio"]:
                    kwargs[f"physio_{regime}"] = _physio(
                        regime, data["physio"][regime], f"physio.{regime}")
        if "paths" in data:
            kwargs["paths"] = _build(Paths, data["paths"], "paths")
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        out = {
            "dataset": _plain(self.dataset),
            "training": _plain(self.training),
            "segnet": _plain(self.segnet),
            "meshdeform": _plain(self.meshdeform),
            "pointnet": _plain(self.pointnet),
            "physio": {"rest": _plain(self.physio_rest),
                       "hyperemic": _plain(self.physio_hyperemic)},
            "paths": _plain(self.paths),
        }
        for regime in ("rest", "hyperemic"):
            out["physio"][regime].pop("regime")
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def physio(self, regime):
        if regime == "rest":
            return self.physio_rest
        if regime == "hyperemic":
            return self.physio_hyperemic
        raise ValidationError(f"unknown regime {regime!r}")
