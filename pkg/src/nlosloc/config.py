"""Experiment configuration: flat ``key = value`` files with section headers.

Every section maps onto a small dataclass. Unknown sections or keys are
errors, so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigInvalid

DENOISERS = ("oracle", "ridge", "none")
ESTIMATORS = ("argmax", "topk_wc", "trc", "lbc", "ls", "awls", "mbe", "nls")
MAP_ESTIMATORS = ("argmax", "topk_wc", "trc", "lbc")
BASE_STRATEGIES = ("random", "edge", "vertex", "hybrid")


def _csv_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def check_strategy(tag: str) -> None:
    """``edge``, ``vertex``, ``hybrid``, ``random`` or ``budget_matched_random@<ref>``."""
    if "@" in tag:
        base, ref = tag.split("@", 1)
        if base != "budget_matched_random" or ref not in BASE_STRATEGIES:
            raise ConfigInvalid(f"bad strategy {tag!r}")
    elif tag not in BASE_STRATEGIES:
        raise ConfigInvalid(f"unknown strategy {tag!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    timing: bool = False


@dataclass(frozen=True)
class ScenesSection:
    source: str = "synthetic"  # or a directory holding manifest.csv + scenes/
    grid_size: int = 64
    buildings_min: int = 3
    buildings_max: int = 10
    train_count: int = 200
    test_count: int = 50
    split: str = "lower"


@dataclass(frozen=True)
class SamplingSection:
    strategies: tuple[str, ...] = ("edge", "vertex", "budget_matched_random@edge",
                                   "budget_matched_random@vertex")
    budget: int = 40
    random_fraction: float = 0.2895
    noise_std: float = 0.0


@dataclass(frozen=True)
class ModelSection:
    denoiser: str = "ridge"
    steps: int = 50
    ensemble: int = 1
    patch_radius: int = 2
    ridge_lambda: float = 1e-3
    pixels_per_sample: int = 256
    draws: int = 1
    train_masks: tuple[str, ...] = ("edge", "vertex", "budget_matched_random@edge",
                                    "budget_matched_random@vertex")
    path: str = ""  # pre-trained blob; defaults to <out>/model/ridge.bin


@dataclass(frozen=True)
class LocalizeSection:
    estimators: tuple[str, ...] = ESTIMATORS
    topk: int = 10
    percentile: float = 99.0
    alpha: float = 0.9


@dataclass(frozen=True)
class EvaluateSection:
    le_estimator: str = "argmax"


@dataclass(frozen=True)
class AnalysisSection:
    budget: int = 4
    max_faces: int = 3
    depth: int = 3
    sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    scenes: ScenesSection = field(default_factory=ScenesSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    model: ModelSection = field(default_factory=ModelSection)
    localize: LocalizeSection = field(default_factory=LocalizeSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def validate(self) -> "ExperimentConfig":
        s, m = self.scenes, self.model
        if self.run.seed < 0 or self.run.workers < 1:
            raise ConfigInvalid("seed must be >= 0 and workers >= 1")
        if s.source != "synthetic" and not (Path(s.source) / "manifest.csv").exists():
            raise ConfigInvalid(f"scene source {s.source!r} has no manifest.csv")
        if s.grid_size < 16 or not 0 <= s.buildings_min <= s.buildings_max:
            raise ConfigInvalid("need grid_size >= 16 and 0 <= buildings_min <= buildings_max")
        if s.train_count < 0 or s.test_count < 1:
            raise ConfigInvalid("need train_count >= 0 and test_count >= 1")
        if s.split not in ("lower", "upper", "none"):
            raise ConfigInvalid(f"unknown split {s.split!r}")
        for tag in self.sampling.strategies + m.train_masks:
            check_strategy(tag)
        if not self.sampling.strategies:
            raise ConfigInvalid("no sampling strategies")
        if not 0 <= self.sampling.random_fraction < 1 or self.sampling.noise_std < 0:
            raise ConfigInvalid("random_fraction must lie in [0, 1) and noise_std >= 0")
        if m.denoiser not in DENOISERS:
            raise ConfigInvalid(f"denoiser must be one of {DENOISERS}")
        if m.steps < 1 or m.ensemble < 1 or m.patch_radius < 0 or m.ridge_lambda <= 0:
            raise ConfigInvalid("bad model settings")
        if m.path and not Path(m.path).exists():
            raise ConfigInvalid(f"model path {m.path!r} does not exist")
        bad = [e for e in self.localize.estimators if e not in ESTIMATORS]
        if bad or not self.localize.estimators:
            raise ConfigInvalid(f"unknown estimators {bad}")
        if self.evaluate.le_estimator not in self.localize.estimators:
            raise ConfigInvalid("le_estimator must be one of the configured estimators")
        if not 0 < self.localize.percentile < 100 or not 0 < self.localize.alpha <= 1:
            raise ConfigInvalid("percentile must lie in (0, 100) and alpha in (0, 1]")
        if self.localize.topk < 1 or self.analysis.budget < 1:
            raise ConfigInvalid("topk and analysis budget must be positive")
        return self

    def to_text(self, include_run: bool = True) -> str:
        lines = []
        for sec in fields(self):
            if sec.name == "run" and not include_run:
                continue
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = ", ".join(v)
                elif isinstance(v, bool):
                    v = str(v).lower()
                lines.append(f"{f.name} = {v}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        """Hash of everything that can change outputs (worker count excluded)."""
        text = self.to_text(include_run=False) + f"seed={self.run.seed}\ntiming={self.run.timing}\n"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _convert(section: str, f, raw: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            return _csv_list(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigInvalid(f"[{section}] {f.name}: cannot parse {raw!r}") from exc


def apply_overrides(cfg: ExperimentConfig, items: dict[str, dict[str, str]]) -> ExperimentConfig:
    updates = {}
    for section, values in items.items():
        if section not in {f.name for f in fields(cfg)}:
            raise ConfigInvalid(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name: f for f in fields(obj)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigInvalid(f"unknown key {key!r} in [{section}]")
            changes[key] = _convert(section, known[key], raw)
        updates[section] = replace(obj, **changes)
    return replace(cfg, **updates)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(f"malformed config: {exc}") from exc
    items = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(ExperimentConfig(), items)


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Read ``path`` (defaults only if None) then apply ``overrides`` (flags win)."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigInvalid(f"config file {p} does not exist")
        cfg = parse_config(p.read_text())
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
