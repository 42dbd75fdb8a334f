"""Flat INI run configuration with strict validation.

Sections map onto dataclasses: ``[run]`` -> :class:`RunSettings`, ``[task]`` ->
:class:`SyntheticTask`, ``[method]`` -> :class:`MethodSpec`, ``[train]`` ->
:class:`TrainConfig`, ``[hpo]`` -> :class:`HpoSettings`. Omitted keys take the
shipped defaults. Unknown sections or keys and malformed values are all
collected and reported together.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .elbo import TrainConfig
from .models import MethodSpec
from .toybench import SyntheticTask

MODES = ("train", "eval", "sweep-samples", "hpo", "map-recovery", "ablate-flow", "ablate-rank")


class ConfigError(ValueError):
    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class RunSettings:
    mode: str = ""
    seeds: Tuple[int, ...] = (0,)
    out: str = "runs/out"
    checkpoint: str = ""
    workers: int = 1
    sweep_samples: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    sweep_repeats: int = 3
    flow_depths: Tuple[int, ...] = (0, 1, 2, 4)
    inducing_dims: Tuple[int, ...] = (4, 9, 16)


@dataclass
class HpoSettings:
    rounds: int = 10
    n_init: int = 4
    candidates: int = 512
    t_samples: int = 32
    ref_margin: float = 0.0
    acc_tolerance: float = 0.02
    lr_min: float = 1e-5
    lr_max: float = 2e-3
    wd_min: float = 1e-2
    wd_max: float = 5e-1
    epochs: int = 0  # 0 keeps [train] epochs


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    method: MethodSpec = field(default_factory=MethodSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    hpo: HpoSettings = field(default_factory=HpoSettings)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {"run": RunSettings, "task": SyntheticTask, "method": MethodSpec, "train": TrainConfig,
            "hpo": HpoSettings}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, tp: Any):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0])
    if origin in (tuple, Tuple):
        elem = args[0] if args else str
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        return tuple(_coerce(p, elem) for p in parts)
    if tp is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _build(section: str, cls, items: Dict[str, str], violations: List[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            violations.append(f"[{section}] unknown key {key!r}")
            continue
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except (TypeError, ValueError) as err:
            violations.append(f"[{section}] {key}: {err}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        violations.append(f"[{section}] {err}")
        return cls()


def parse_config(text: str, overrides: Optional[Dict[str, Dict[str, str]]] = None) -> RunConfig:
    """Parse INI text; ``overrides`` maps section -> key -> raw string and wins over the file."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    violations: List[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError([f"unparseable config: {err}"]) from err
    for sec in parser.sections():
        if sec not in SECTIONS:
            violations.append(f"unknown section [{sec}]")
    built = {}
    for sec, cls in SECTIONS.items():
        items = dict(parser.items(sec)) if parser.has_section(sec) else {}
        items.update((overrides or {}).get(sec, {}))
        built[sec] = _build(sec, cls, items, violations)
    cfg = RunConfig(**built)
    violations.extend(validate(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def validate(cfg: RunConfig) -> List[str]:
    """Mode-specific checks run before any compute."""
    out = []
    r = cfg.run
    if not r.mode:
        out.append("[run] mode is required (or pass --mode)")
    elif r.mode not in MODES:
        out.append(f"[run] mode {r.mode!r} not in {', '.join(MODES)}")
    if not r.seeds:
        out.append("[run] seeds must list at least one seed")
    if r.workers < 1:
        out.append("[run] workers must be >= 1")
    if r.mode == "sweep-samples" and (not r.sweep_samples or min(r.sweep_samples) < 1):
        out.append("[run] sweep_samples must be positive integers")
    if r.mode == "ablate-flow" and (not r.flow_depths or min(r.flow_depths) < 0):
        out.append("[run] flow_depths must be non-negative integers")
    if r.mode == "ablate-rank" and (not r.inducing_dims or min(r.inducing_dims) < 1):
        out.append("[run] inducing_dims must be positive integers")
    if r.mode in ("sweep-samples", "ablate-flow", "ablate-rank") and not cfg.method.bayesian:
        out.append(f"[method] mode {r.mode} needs a Bayesian method kind")
    h = cfg.hpo
    if r.mode == "hpo":
        if h.rounds < 0 or h.n_init < 1 or h.candidates < 1 or h.t_samples < 1:
            out.append("[hpo] rounds >= 0, n_init >= 1, candidates >= 1 and t_samples >= 1 are required")
        if not (0 < h.lr_min < h.lr_max) or not (0 < h.wd_min < h.wd_max):
            out.append("[hpo] bounds must satisfy 0 < min < max")
    if cfg.train.epochs < 0:
        out.append("[train] epochs must be >= 0")
    if cfg.method.rank < 1 or cfg.method.inducing_rows < 1 or cfg.method.inducing_cols < 1:
        out.append("[method] rank and inducing dims must be >= 1")
    try:
        cfg.task.validate()
    except ValueError as err:
        out.append(f"[task] {err}")
    return out


def load_config(path: str, overrides=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable INI text with every resolved value."""
    lines = []
    for sec, values in cfg.as_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
