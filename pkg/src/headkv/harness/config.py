"""Experiment configuration, loaded from a single JSON document."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Union

from ..allocation import AllocationConfig
from ..errors import ConfigError, HeadKVError
from ..importance import ESTIMATORS
from ..kvstore import HeadId
from ..selection import PoolingConfig
from ..toymodel import ModelSpec, PlantedOracleSpec, planted_oracle

DEFAULT_LENGTHS = [128, 256, 512, 1024, 2048]
DEFAULT_DEPTHS = [0.0, 0.25, 0.5, 0.75, 1.0]


@dataclass(frozen=True)
class OracleModel:
    """Planted oracle plus the vocabulary its probe corpora are drawn from."""

    spec: PlantedOracleSpec
    vocab_size: int = 512

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape


ModelConfig = Union[ModelSpec, OracleModel]


@dataclass(frozen=True)
class GridConfig:
    lengths: list[int] = field(default_factory=lambda: list(DEFAULT_LENGTHS))
    depths: list[float] = field(default_factory=lambda: list(DEFAULT_DEPTHS))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    estimator: str = "R2"
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    corpus_seed: int = 0
    n_examples: int = 32
    success_threshold: float = 1.0
    n_eval_examples: int = 8
    budgets: list = field(default_factory=list)
    betas: list[float] = field(default_factory=list)
    needle_len: int = 4
    n_facts: int = 8

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.allocation.alpha != self.pooling.alpha:
            raise ConfigError("allocation.alpha and pooling.alpha must match")
        if not self.grid.lengths or not self.grid.depths:
            raise ConfigError("grid needs at least one length and one depth")
        if self.n_examples < 1 or self.n_eval_examples < 1:
            raise ConfigError("n_examples and n_eval_examples must be >= 1")
        if not 0 < self.success_threshold <= 1:
            raise ConfigError("success_threshold must lie in (0, 1]")
        if any(not 0 <= d <= 1 for d in self.grid.depths):
            raise ConfigError("depths must lie in [0, 1]")
        if isinstance(self.model, ModelSpec):
            too_long = [n for n in self.grid.lengths if n + 64 > self.model.max_context]
            if too_long:
                raise ConfigError(f"lengths {too_long} leave no room under max_context")
        for b in self.budgets:
            if b != "full" and (not isinstance(b, int) or b < 1):
                raise ConfigError(f"bad budget {b!r}; use a positive int or 'full'")

    @property
    def shape(self) -> tuple[int, int]:
        return self.model.shape

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size

    @property
    def alpha(self) -> int:
        return self.allocation.alpha

    def with_overrides(self, *, seed=None, policy=None, budget=None, beta=None, alpha=None,
                       estimator=None) -> "ExperimentConfig":
        try:
            alloc = self.allocation
            if policy is not None:
                alloc = replace(alloc, policy=policy)
            if budget is not None:
                alloc = replace(alloc, b=budget)
            if beta is not None:
                alloc = replace(alloc, beta=beta)
            pooling = self.pooling
            if alpha is not None:
                alloc = replace(alloc, alpha=alpha)
                pooling = replace(pooling, alpha=alpha)
            return replace(
                self,
                allocation=alloc,
                pooling=pooling,
                corpus_seed=self.corpus_seed if seed is None else seed,
                estimator=self.estimator if estimator is None else estimator,
                budgets=[budget] if budget is not None else self.budgets,
                betas=[beta] if beta is not None else self.betas,
            )
        except ConfigError:
            raise
        except HeadKVError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        if isinstance(self.model, ModelSpec):
            model = {"kind": "toy", **asdict(self.model)}
        else:
            model = {**self.model.spec.to_dict(), "vocab_size": self.model.vocab_size}
        return {
            "model": model,
            "estimator": self.estimator,
            "allocation": asdict(self.allocation),
            "pooling": asdict(self.pooling),
            "grid": asdict(self.grid),
            "corpus_seed": self.corpus_seed,
            "n_examples": self.n_examples,
            "success_threshold": self.success_threshold,
            "n_eval_examples": self.n_eval_examples,
            "budgets": list(self.budgets),
            "betas": list(self.betas),
            "needle_len": self.needle_len,
            "n_facts": self.n_facts,
        }


def _model_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    kind = d.pop("kind", "toy")
    if kind == "toy":
        return ModelSpec(**d)
    if kind != "oracle":
        raise ConfigError(f"unknown model kind {kind!r}")
    L, H = d.pop("model_shape")
    vocab = int(d.pop("vocab_size", 512))
    noise_seed = int(d.pop("noise_seed", 0))
    amplitude = float(d.pop("noise_amplitude", 0.5))
    if "planted" in d:
        planted = {HeadId(int(l), int(h)): float(w) for l, h, w in d.pop("planted")}
        spec = PlantedOracleSpec((L, H), planted, noise_seed, amplitude)
    else:
        spec = planted_oracle(L, H, float(d.pop("planted_fraction", 0.2)),
                              float(d.pop("plant_weight", 0.9)), int(d.pop("plant_seed", 0)),
                              noise_seed)
        spec = replace(spec, noise_amplitude=amplitude)
    if d:
        raise ConfigError(f"unknown oracle fields {sorted(d)}")
    return OracleModel(spec, vocab)


def config_from_dict(d: dict) -> ExperimentConfig:
    try:
        d = dict(d)
        if "model" not in d:
            raise ConfigError("config needs a 'model' section")
        model = _model_from_dict(d.pop("model"))
        alloc = AllocationConfig(**d.pop("allocation", {}))
        pooling = PoolingConfig(**d.pop("pooling", {"alpha": alloc.alpha}))
        grid = GridConfig(**d.pop("grid", {}))
        return ExperimentConfig(model=model, allocation=alloc, pooling=pooling, grid=grid, **d)
    except ConfigError:
        raise
    except (HeadKVError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
        return config_from_dict(json.loads(text))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def default_config(kind: str = "oracle", seed: int = 0) -> ExperimentConfig:
    """Desk-scale defaults: 8x8 heads, five lengths up to 2048, five depths."""
    if kind == "oracle":
        model = OracleModel(planted_oracle(8, 8, 0.2, 0.9, seed=seed))
    else:
        model = ModelSpec(n_layers=8, n_heads=8, d_model=128, d_head=16, seed=seed)
    return ExperimentConfig(model=model, corpus_seed=seed)
