"""Run configuration: UTF-8 ``section.key = value`` lines with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from .detectors import DETECTOR_NAMES, LaeqSpec, MetaConfig, SifSpec
from .interrogation import CLIP_GRID, LR_GRID, STEP_GRID, InterrogationConfig
from .model_zoo import ARCHITECTURES, GROUP_NAMES
from .seeds import derive_seed
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("auto", "none", "") else float(s)


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    return lambda s: tuple(item(p.strip()) for p in s.split(",") if p.strip())


def _choice(options) -> Callable[[str], str]:
    def parse(s):
        if s not in options:
            raise ValueError(f"{s!r} not in {list(options)}")
        return s
    return parse


def _dets(s):
    names = _list(str)(s)
    for n in names:
        if n not in DETECTOR_NAMES:
            raise ValueError(f"unknown detector {n!r}")
    return names


def _groups(s):
    names = _list(str)(s)
    for n in names:
        if n not in GROUP_NAMES:
            raise ValueError(f"unknown layer group {n!r}")
    return names


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "run.seed": (int, 0),
    "run.arch": (_choice(ARCHITECTURES), "TinyCNN"),
    "data.source": (str, "synth"),
    "data.classes": (int, 10),
    "data.per_class": (int, 200),
    "data.shape": (_list(int), (1, 8, 8)),
    "data.spread": (float, 3.0),
    "data.separation": (float, 1.0),
    "split.attack_val": (int, 200),
    "split.attack_test": (int, 500),
    "split.validation_fraction": (float, 0.05),
    "split.aux_fraction": (float, 0.2),
    "train.lr": (float, 0.05),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 40),
    "train.warmup_epochs": (int, 2),
    "train.patience": (int, 40),
    "train.flip": (_bool, False),
    "interrogation.group": (_choice(GROUP_NAMES), "Late"),
    "interrogation.steps": (int, 80),
    "interrogation.lr": (float, 0.05),
    "interrogation.clip": (_bool, True),
    "sweep.steps": (_list(int), STEP_GRID),
    "sweep.lr": (_list(float), LR_GRID),
    "sweep.clip": (_list(_bool), CLIP_GRID),
    "sweep.groups": (_groups, GROUP_NAMES),
    "sweep.detector": (_choice(DETECTOR_NAMES), "GLiR"),
    "detectors.list": (_dets, DETECTOR_NAMES),
    "glir.d_sub": (int, 5000),
    "glir.tau": (_opt_float, None),
    "glir.mode": (_choice(("closed_form", "chi2")), "closed_form"),
    "laeq.step": (float, 0.05),
    "laeq.budget": (int, 100),
    "laeq.eps_cap": (_opt_float, None),
    "sif.damping": (float, 0.01),
    "sif.scale": (float, 10.0),
    "sif.d_sub": (int, 5000),
    "ia.shadows": (int, 5),
    "ia.hidden": (int, 64),
    "ia.lr": (float, 1e-3),
    "ia.lr_final": (float, 1e-4),
    "ia.batch_size": (int, 128),
    "ia.patience": (int, 5),
    "ia.max_epochs": (int, 30),
    "defense.sigma": (float, 0.0),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **updates) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise KeyError(key)
            vals[key] = v
        return RunConfig(vals)

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def derived(self, role: str, *extra: int) -> int:
        return derive_seed(self.seed, role, *extra)

    def train_config(self, role: str = "train", *extra: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["train.lr"], momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            batch_size=v["train.batch_size"], max_epochs=v["train.max_epochs"],
            warmup_epochs=v["train.warmup_epochs"], patience=v["train.patience"], flip=v["train.flip"],
            seed=self.derived(role, *extra),
        )

    def interrogation_config(self) -> InterrogationConfig:
        v = self.values
        return InterrogationConfig(
            group=v["interrogation.group"], steps=v["interrogation.steps"], lr=v["interrogation.lr"],
            clip=v["interrogation.clip"], seed=self.derived("interrogation"),
        )

    def sweep_grid(self) -> List[InterrogationConfig]:
        v = self.values
        seed = self.derived("interrogation")
        return [
            InterrogationConfig(group=g, steps=t, lr=lr, clip=c, seed=seed)
            for g in v["sweep.groups"] for c in v["sweep.clip"] for lr in v["sweep.lr"] for t in v["sweep.steps"]
        ]

    def laeq_spec(self) -> LaeqSpec:
        v = self.values
        return LaeqSpec(step=v["laeq.step"], budget=v["laeq.budget"], eps_cap=v["laeq.eps_cap"])

    def sif_spec(self) -> SifSpec:
        v = self.values
        return SifSpec(damping=v["sif.damping"], scale=v["sif.scale"], d_sub=v["sif.d_sub"], seed=self.derived("sif"))

    def meta_config(self) -> MetaConfig:
        v = self.values
        return MetaConfig(hidden=v["ia.hidden"], lr=v["ia.lr"], lr_final=v["ia.lr_final"],
                          batch_size=v["ia.batch_size"], patience=v["ia.patience"],
                          max_epochs=v["ia.max_epochs"], seed=self.derived("meta"))

    def to_text(self) -> str:
        lines = []
        section = None
        for key in SCHEMA:
            sec = key.split(".")[0]
            if sec != section and section is not None:
                lines.append("")
            section = sec
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        self.train_config()
        self.interrogation_config()
        self.laeq_spec()
        self.sif_spec()
        if self.values["defense.sigma"] < 0:
            raise ConfigError("defense.sigma must be non-negative")
        if self.values["ia.shadows"] < 2:
            raise ConfigError("ia.shadows must be at least 2")


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        parser, _ = SCHEMA[key]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
