"""Experiment configuration: schema, loading and conversion to runtime objects.

Configs are YAML files (JSON is accepted too, being a YAML subset). Every
section is optional and every unknown key is rejected before anything runs.

Example::

    seed: 7
    test: {M: 3000, max_resamples: 1}
    choices: {n: 4, sets: 30}
    horizons:
      - {id: ctr, delay: 0, weight: 1.0}
      - {id: retention, delay: 7, weight: 0.5, correlation: 0.6}
    fusion: {outer: normalize}
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rlsf.abtest import TestConfig
from rlsf.ant import FusionSpec, HorizonSpec, Transform
from rlsf.policy import GenerationEnv, PPOConfig, PretrainConfig
from rlsf.reward import BLOCKS, TrainConfig


class ConfigError(ValueError):
    """The experiment config is missing, malformed or fails validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="strings")


class PopulationSection(_Section):
    size: int = Field(100_000, ge=2)
    trait_std: float = Field(0.5, ge=0)


class GroundTruthSection(_Section):
    kind: Literal["proportion", "mean"] = "proportion"
    base_rate: float = 0.12
    unigram_scale: float = Field(0.3, ge=0)
    bigram_scale: float = Field(0.1, ge=0)
    noise_std: float = Field(0.0, ge=0)
    seed: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _rate_in_range(self):
        if self.kind == "proportion" and not 0 < self.base_rate < 1:
            raise ValueError("base_rate of a proportion indicator must lie in (0, 1)")
        return self


class EnvSection(_Section):
    vocab_size: int = Field(16, ge=2)
    seq_len: int = Field(6, ge=1)
    n_prompts: int = Field(4, ge=1)


class PretrainSection(_Section):
    corpus_size: int = Field(20_000, ge=1)
    fluency_scale: float = Field(1.5, ge=0)
    pseudocount: float = Field(0.1, gt=0)
    temperature: float = Field(1.0, gt=0)


class TestSection(_Section):
    __test__ = False

    alpha: float = Field(0.05, gt=0, lt=1)
    beta: float = Field(0.2, gt=0, lt=1)
    delta0: float = Field(0.01, gt=0)
    M: int = Field(3000, ge=2)
    k_ratio: float = Field(1.0, gt=0)
    max_resamples: int = Field(1, ge=0)
    invalid_rate: float = Field(0.0, ge=0, lt=1)


class ChoicesSection(_Section):
    n: int = Field(4, ge=2)
    sets: int = Field(30, ge=1)
    variant_position: int = Field(0, ge=0)
    flow_length: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _position_in_flow(self):
        if self.variant_position >= self.flow_length:
            raise ValueError("variant_position must be smaller than flow_length")
        return self


class EloSection(_Section):
    passes: int = Field(50, ge=1)
    k_factor: float = Field(32.0, gt=0)
    initial: float = 1000.0


class RewardSection(_Section):
    learning_rate: float = Field(0.5, gt=0)
    epochs: int = Field(300, ge=0)
    init_scale: float = Field(0.0, ge=0)
    train_on: Literal["ranking", "outcomes"] = "ranking"
    blocks: list[Literal[BLOCKS]] = Field(default_factory=lambda: list(BLOCKS), min_length=1)


class PPOSection(_Section):
    clip: float = Field(0.2, gt=0)
    kl_coef: float = Field(0.05, ge=0)
    learning_rate: float = Field(2.0, gt=0)
    iterations: int = Field(40, ge=0)
    episodes: int = Field(256, ge=1)
    update_epochs: int = Field(4, ge=1)
    refresh_every: int = Field(0, ge=0)


class EvaluationSection(_Section):
    episodes: int = Field(20_000, ge=1)


class TransformSection(_Section):
    kind: Literal["identity", "affine", "clamp"] = "identity"
    a: float = 1.0
    b: float = 0.0
    lo: float = -math.inf
    hi: float = math.inf


class HorizonSection(_Section):
    id: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    delay: float = Field(0.0, ge=0)
    weight: float = Field(1.0, ge=0, allow_inf_nan=False)
    transform: TransformSection = TransformSection()
    correlation: float = Field(1.0, ge=-1, le=1)
    decay: float = Field(0.9, gt=0)
    base_rate: Optional[float] = None


class FusionSection(_Section):
    outer: Literal["identity", "normalize", "clip"] = "identity"
    lo: float = -math.inf
    hi: float = math.inf


class PredictionSection(_Section):
    gamma: float = Field(0.9, ge=0, lt=1)
    ticks: int = Field(12, ge=2)
    users_per_tick: int = Field(2000, ge=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    population: PopulationSection = PopulationSection()
    ground_truth: GroundTruthSection = GroundTruthSection()
    env: EnvSection = EnvSection()
    pretrain: PretrainSection = PretrainSection()
    test: TestSection = TestSection()
    choices: ChoicesSection = ChoicesSection()
    elo: EloSection = EloSection()
    reward: RewardSection = RewardSection()
    ppo: PPOSection = PPOSection()
    evaluation: EvaluationSection = EvaluationSection()
    horizons: Optional[list[HorizonSection]] = None
    fusion: FusionSection = FusionSection()
    prediction: PredictionSection = PredictionSection()

    @model_validator(mode="after")
    def _horizons_consistent(self):
        if self.horizons is not None:
            if not self.horizons:
                raise ValueError("horizons, when given, must list at least one horizon")
            # Reuse the runtime checks (unique ids, one unobserved horizon).
            self.fusion_spec()
            if all(math.isinf(h.delay) for h in self.horizons):
                raise ValueError("at least one horizon must be observed")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identical configs hash equal."""
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def horizon_sections(self) -> list[HorizonSection]:
        """Configured horizons, or the single immediate horizon of a plain run."""
        return list(self.horizons) if self.horizons is not None else [HorizonSection(id="primary")]

    def fusion_spec(self) -> FusionSpec:
        specs = tuple(
            HorizonSpec(h.id, h.delay, h.weight, Transform(**h.transform.model_dump()))
            for h in self.horizon_sections()
        )
        return FusionSpec(specs, self.fusion.outer, self.fusion.lo, self.fusion.hi)

    def env_obj(self) -> GenerationEnv:
        return GenerationEnv(**self.env.model_dump())

    def pretrain_obj(self) -> PretrainConfig:
        return PretrainConfig(**self.pretrain.model_dump())

    def test_obj(self) -> TestConfig:
        return TestConfig(**self.test.model_dump())

    def reward_obj(self, seed: int) -> TrainConfig:
        r = self.reward
        return TrainConfig(r.learning_rate, r.epochs, seed, r.init_scale)

    def ppo_obj(self, seed: int) -> PPOConfig:
        p = self.ppo.model_dump()
        p.pop("refresh_every")
        return PPOConfig(**p, seed=seed)


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load and validate a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
