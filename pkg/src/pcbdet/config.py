"""Run configuration: a flat, commented key = value file.

Keys mirror the method's symbols (pi, delta, tau_max, alpha, restarts, phi)
so a run can be audited at a glance. Unknown keys are errors; every seed is
explicit, never wall-clock derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from pcbdet.classifier import TrainConfig
from pcbdet.estimation import EstimationParams

__all__ = ["DataConfig", "AttackSection", "RunConfig", "load_config", "save_config", "default_config"]


@dataclass
class DataConfig:
    classes: int = 8
    train_per_class: int = 100
    test_per_class: int = 20
    clean_per_class: int = 10
    reserve_per_class: int = 10
    points_per_cloud: int = 256
    seed: int = 1


@dataclass
class AttackSection:
    source: int = 2
    target: int = 4
    poison_count: int = 15
    pattern_points: int = 3
    pattern_radius: float = 0.05
    seed: int = 3
    standoff: float = 0.2
    candidates: int = 64


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    estimation: EstimationParams = field(default_factory=EstimationParams)
    detect_seed: int = 5
    phi: float = 0.05
    out_dir: str = "runs/default"


# key -> (section attribute path, type)
_SCHEMA = {
    "classes": ("data.classes", int),
    "train_per_class": ("data.train_per_class", int),
    "test_per_class": ("data.test_per_class", int),
    "clean_per_class": ("data.clean_per_class", int),
    "reserve_per_class": ("data.reserve_per_class", int),
    "points_per_cloud": ("data.points_per_cloud", int),
    "data_seed": ("data.seed", int),
    "epochs": ("train.epochs", int),
    "batch_size": ("train.batch_size", int),
    "learning_rate": ("train.learning_rate", float),
    "train_seed": ("train.seed", int),
    "outlier_points": ("train.outlier_points", int),
    "outlier_radius": ("train.outlier_radius", float),
    "logit_scale": ("train.logit_scale", float),
    "attack_source": ("attack.source", int),
    "attack_target": ("attack.target", int),
    "poison_count": ("attack.poison_count", int),
    "pattern_points": ("attack.pattern_points", int),
    "pattern_radius": ("attack.pattern_radius", float),
    "attack_seed": ("attack.seed", int),
    "standoff": ("attack.standoff", float),
    "center_candidates": ("attack.candidates", int),
    "pi": ("estimation.pi", float),
    "delta": ("estimation.delta", float),
    "tau_max": ("estimation.tau_max", int),
    "alpha": ("estimation.alpha", float),
    "lambda0": ("estimation.lambda0", float),
    "restarts": ("estimation.n_restarts", int),
    "detect_seed": ("detect_seed", int),
    "phi": ("phi", float),
    "out_dir": ("out_dir", str),
}

_COMMENTS = {
    "classes": "dataset",
    "epochs": "training",
    "attack_source": "attack",
    "pi": "trigger estimation",
    "detect_seed": "detection inference",
}


def load_config(path) -> RunConfig:
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _SCHEMA:
                raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
            attr_path, typ = _SCHEMA[key]
            try:
                parsed = typ(value)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad {typ.__name__} value {value!r}") from None
            _assign(cfg, attr_path, parsed)
    _revalidate(cfg)
    return cfg


def _assign(cfg, attr_path: str, value) -> None:
    obj = cfg
    parts = attr_path.split(".")
    for name in parts[:-1]:
        obj = getattr(obj, name)
    setattr(obj, parts[-1], value)


def _revalidate(cfg: RunConfig) -> None:
    # Dataclass validators only run in __post_init__; re-run them on the
    # mutated sections.
    cfg.train.__post_init__()
    cfg.estimation.__post_init__()
    if cfg.attack.source == cfg.attack.target:
        raise ValueError("attack_source and attack_target must differ")
    if not 0.0 < cfg.phi < 1.0:
        raise ValueError("phi must be in (0, 1)")
    if cfg.data.classes < 2:
        raise ValueError("need at least two classes")


def save_config(cfg: RunConfig, path) -> None:
    lines = []
    for key, (attr_path, _) in _SCHEMA.items():
        if key in _COMMENTS:
            if lines:
                lines.append("")
            lines.append(f"# {_COMMENTS[key]}")
        obj = cfg
        parts = attr_path.split(".")
        for name in parts[:-1]:
            obj = getattr(obj, name)
        value = getattr(obj, parts[-1])
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_config() -> RunConfig:
    return RunConfig()
