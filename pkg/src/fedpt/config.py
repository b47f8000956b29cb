"""Experiment configuration: one JSON document with model, data, pretrain, federation and eval sections.

Every section has defaults, unknown keys are rejected and each out-of-range
value raises :class:`ConfigurationError` naming the offending field, all before
any compute starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CATEGORIES, DEFAULT_SIZES, SPLITS
from .errors import ConfigurationError, FedPTError
from .federation import FedConfig
from .model import LARGE, SMALL, ModelConfig
from .rng import child_seed, substream


def _check(section: str, checks) -> None:
    for name, ok in checks:
        if not ok:
            raise ConfigurationError(f"invalid value for {section}.{name}")


def _reject_unknown(section: str, d: dict, cls) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown keys in {section}: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    num_categories: int = 6
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    partition: str = "pathological"
    concentration: float = 0.5
    general_size: int = 8000
    heldout_size: int = 256

    def __post_init__(self) -> None:
        _check("data", [
            ("num_categories", 2 <= self.num_categories <= len(CATEGORIES)),
            ("sizes", set(self.sizes) <= set(SPLITS)
             and all(isinstance(v, int) and v >= 0 for v in self.sizes.values())),
            ("partition", self.partition in ("pathological", "dirichlet")),
            ("concentration", self.concentration > 0),
            ("general_size", self.general_size >= 1),
            ("heldout_size", self.heldout_size >= 1),
        ])

    @property
    def categories(self) -> tuple[str, ...]:
        return CATEGORIES[:self.num_categories]


@dataclass(frozen=True)
class PretrainConfig:
    token_budget: int = 4_000_000
    lr: float = 1e-2
    large_lr: float = 3e-3  # the wider model diverges or lags at the small model's rate
    batch_size: int = 8
    warmup: float = 0.1
    clip: float = 1.0

    def __post_init__(self) -> None:
        _check("pretrain", [
            ("token_budget", self.token_budget >= 0),
            ("lr", self.lr > 0),
            ("large_lr", self.large_lr > 0),
            ("batch_size", self.batch_size >= 1),
            ("warmup", 0 <= self.warmup < 1),
            ("clip", self.clip >= 0),
        ])


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    seeds: tuple[int, ...] = (0, 1, 2)
    max_len: int = 64
    alpha_sweep: tuple[float, ...] = (1.5,)
    sample: bool = False
    temperature: float = 1.0
    top_p: float = 1.0
    limit: int | None = None

    def __post_init__(self) -> None:
        _check("eval", [
            ("split", self.split in SPLITS),
            ("seeds", len(self.seeds) >= 1),
            ("max_len", self.max_len >= 1),
            ("alpha_sweep", len(self.alpha_sweep) >= 1 and all(a >= 0 for a in self.alpha_sweep)),
            ("temperature", self.temperature > 0),
            ("top_p", 0 < self.top_p <= 1),
            ("limit", self.limit is None or self.limit >= 1),
        ])


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    small: ModelConfig = SMALL
    large: ModelConfig = LARGE
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    federation: FedConfig = field(default_factory=FedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.small.vocab != self.large.vocab:
            raise ConfigurationError("small and large models must share a vocabulary")
        if self.federation.seed != self.seed:
            object.__setattr__(self, "federation", replace(self.federation, seed=self.seed))

    # Derived seeds: every component draws from a named sub-stream of ``seed``.
    def component_seed(self, *names) -> int:
        return child_seed(substream(self.seed, *names))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "small": self.small.to_dict(),
            "large": self.large.to_dict(),
            "data": asdict(self.data),
            "pretrain": asdict(self.pretrain),
            "federation": self.federation.to_dict(),
            "eval": {**asdict(self.eval), "seeds": list(self.eval.seeds),
                     "alpha_sweep": list(self.eval.alpha_sweep)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        _reject_unknown("config", d, cls)
        try:
            kw: dict = {}
            if "seed" in d:
                kw["seed"] = int(d["seed"])
            for key in ("small", "large"):
                if key in d:
                    kw[key] = ModelConfig.from_dict(d[key])
            for key, sub in (("data", DataConfig), ("pretrain", PretrainConfig)):
                if key in d:
                    _reject_unknown(key, d[key], sub)
                    kw[key] = sub(**d[key])
            if "eval" in d:
                e = dict(d["eval"])
                _reject_unknown("eval", e, EvalConfig)
                for k in ("seeds", "alpha_sweep"):
                    if k in e:
                        e[k] = tuple(e[k])
                kw["eval"] = EvalConfig(**e)
            if "federation" in d:
                fed = dict(d["federation"])
                fed.setdefault("seed", kw.get("seed", 0))
                kw["federation"] = FedConfig.from_dict(fed)
        except FedPTError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        return cls(**kw)

    def with_overrides(self, *, mode=None, alpha=None, seed=None, rounds=None,
                       workers=None) -> ExperimentConfig:
        fed = self.federation
        changes = {k: v for k, v in (("mode", mode), ("alpha", alpha), ("rounds", rounds),
                                     ("workers", workers)) if v is not None}
        if changes:
            fed = replace(fed, **changes)
        return replace(self, federation=fed, seed=self.seed if seed is None else seed)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment config, or the config snapshot inside a run manifest."""
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if isinstance(d, dict) and "manifest_version" in d:
        d = d["config"]
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a JSON object")
    return ExperimentConfig.from_dict(d)
