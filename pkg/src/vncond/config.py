"""Experiment configuration: flat ``key = value`` files with one section per experiment.

Every section maps onto a frozen dataclass. Unknown sections and keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; maps to exit code 2."""


@dataclass(frozen=True)
class DivergenceSection:
    file_a: str = ""
    file_b: str = ""
    response: str = "y"


@dataclass(frozen=True)
class MddSection:
    n_per_domain: int = 2000
    n_seeds: int = 1
    epochs: int = 30
    batch_size: int = 300
    lr: float = 1e-3
    weight_lr: float = 1e-2
    loss: str = "jvn_sqrt"
    disc_weight: float = 1.0
    simplex: str = "euclidean"
    grad_mode: str = "daleckii_krein"
    hidden: tuple[int, ...] = (64,)
    features: int = 16
    head_hidden: tuple[int, ...] = ()
    dropout: float = 0.0
    baseline: bool = False
    # csv mode
    sources: tuple[str, ...] = ()
    target: str = ""
    response: str = "y"


@dataclass(frozen=True)
class RobustnessSection:
    lambdas: tuple[float, ...] = (0.0, 4.0, 8.0)
    losses: tuple[str, ...] = ("jvn_sqrt", "mse")
    n_seeds: int = 5
    n_train: int = 2000
    n_test: int = 2000
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    mixture: str = "2dplanes"


@dataclass(frozen=True)
class ClSection:
    manifest: str = ""
    methods: tuple[str, ...] = ("sgd", "ewc", "rsp")
    n_seeds: int = 1
    lam: float = 10.0
    lr: float = 0.05
    batch_size: int = 10
    memory_budget: int = 10
    k_groups: int = 20
    hidden: tuple[int, ...] = (100, 100)
    covariance_source: str = "task"


@dataclass(frozen=True)
class DatagenSection:
    kind: str = "friedman"
    n: int = 2000
    noise_scale: float = 0.0
    mixture: str = "2dplanes"


SECTIONS = {
    "divergence": DivergenceSection,
    "mdd": MddSection,
    "robustness": RobustnessSection,
    "cl": ClSection,
    "datagen": DatagenSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    divergence: DivergenceSection = DivergenceSection()
    mdd: MddSection = MddSection()
    robustness: RobustnessSection = RobustnessSection()
    cl: ClSection = ClSection()
    datagen: DatagenSection = DatagenSection()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_value(raw: str, annotation, where: str):
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    try:
        if origin is tuple:
            (item, _) = typing.get_args(annotation)
            if raw == "":
                return ()
            return tuple(_parse_value(p, item, where) for p in raw.split(","))
        if annotation is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {annotation}") from None


def _section(cls, items: dict, name: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        kwargs[key] = _parse_value(raw, hints[key], f"[{name}] {key}")
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        # keys above the first section header are top-level
        cp.read_string("[DEFAULT]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    kwargs: dict = {}
    defaults = dict(cp.defaults())
    for key, raw in defaults.items():
        if key != "seed":
            raise ConfigError(f"unknown top-level key {key!r}")
        kwargs["seed"] = _parse_value(raw, int, "seed")
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        items = {k: v for k, v in cp.items(name) if k not in defaults}
        kwargs[name] = _section(SECTIONS[name], items, name)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Read ``path`` (defaults only if ``None``); ``seed`` overrides the file's seed."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(encoding="utf-8"), str(p))
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def read_manifest(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    for i, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{i}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or key in out:
            raise ConfigError(f"{p}:{i}: empty or duplicate key {key!r}")
        out[key] = value
    return out
