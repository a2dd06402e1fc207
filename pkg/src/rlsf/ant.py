"""Multi-horizon feedback: per-horizon rewards, gradual and one-time fine-tuning.

Each horizon delivers its preferences after a delay in simulation ticks. At
most one horizon is never observed; its value is extrapolated from a short
per-tick history. Horizons are combined either one after another (gradual)
or through a single fused reward

    r_target = F(sum_k w_k * f_k(r_k))

with ``f_k`` in {identity, affine, clamp} and ``F`` in {identity, normalize,
clip}.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from rlsf.abtest import TestConfig
from rlsf.policy import (
    GenerationEnv,
    IterationRecord,
    PolicyModel,
    PPOConfig,
    RewardSource,
    finetune,
)
from rlsf.population import GroundTruthModel, UserPool, observe, sample_groups, true_indicator
from rlsf.reward import FeatureMap, RewardModel, TrainConfig, train
from rlsf.seeding import derive_seed, make_rng
from rlsf.stats import DomainError
from rlsf.tournament import ChoiceSet, TournamentBatch, run_choice_sets
from rlsf.trajectory import Label, PreferenceRecord, Trajectory


@dataclass(frozen=True)
class Transform:
    kind: str = "identity"
    a: float = 1.0
    b: float = 0.0
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "affine", "clamp"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "clamp" and not self.lo <= self.hi:
            raise ValueError("clamp needs lo <= hi")

    @property
    def linear(self) -> tuple[float, float] | None:
        """(slope, intercept) when the transform is affine, else None."""
        if self.kind == "identity":
            return 1.0, 0.0
        if self.kind == "affine":
            return self.a, self.b
        return None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return x
        if self.kind == "affine":
            return self.a * x + self.b
        return np.clip(x, self.lo, self.hi)


@dataclass(frozen=True)
class HorizonSpec:
    id: str
    delay: float = 0.0
    weight: float = 1.0
    transform: Transform = Transform()

    def __post_init__(self) -> None:
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise ValueError("weights must be finite and >= 0")

    @property
    def predicted(self) -> bool:
        return math.isinf(self.delay)


@dataclass(frozen=True)
class FusionSpec:
    horizons: tuple[HorizonSpec, ...]
    outer: str = "identity"
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self) -> None:
        object.__setattr__(self, "horizons", tuple(self.horizons))
        if self.outer not in ("identity", "normalize", "clip"):
            raise ValueError(f"unknown fusion functional {self.outer!r}")
        if not self.horizons:
            raise ValueError("need at least one horizon")
        if sum(h.predicted for h in self.horizons) > 1:
            raise ValueError("at most one horizon may be unobserved")
        ids = [h.id for h in self.horizons]
        if len(set(ids)) != len(ids):
            raise ValueError("horizon ids must be unique")

    @property
    def total_weight(self) -> float:
        return float(sum(h.weight for h in self.horizons))

    def sorted_by_delay(self) -> list[HorizonSpec]:
        return sorted(self.horizons, key=lambda h: h.delay)

    def _outer(self, x: np.ndarray) -> np.ndarray:
        if self.outer == "normalize":
            w = self.total_weight
            if w == 0.0:
                raise DomainError("normalized fusion needs a positive total weight")
            return x / w
        if self.outer == "clip":
            return np.clip(x, self.lo, self.hi)
        return x


RewardLike = RewardSource | Callable[[], RewardSource]


class FusedReward:
    """Reward source for ``F(sum_k w_k f_k(r_k))``.

    Horizons with weight 0 are skipped and their models never resolved, so a
    zero-weight predicted horizon costs nothing. ``models`` values may be
    zero-argument callables that build the model on first use.
    """

    def __init__(self, fusion: FusionSpec, models: Mapping[str, RewardLike]):
        missing = [h.id for h in fusion.horizons if h.weight > 0 and h.id not in models]
        if missing:
            raise ValueError(f"no reward model for horizons {missing}")
        self.fusion = fusion
        self._models = dict(models)
        self._resolved: dict[str, RewardSource] = {}

    def model(self, horizon_id: str) -> RewardSource:
        if horizon_id not in self._resolved:
            m = self._models[horizon_id]
            self._resolved[horizon_id] = m if hasattr(m, "step_rewards") else m()
        return self._resolved[horizon_id]

    def _active(self) -> list[HorizonSpec]:
        return [h for h in self.fusion.horizons if h.weight > 0]

    def fuse_scores(self, scores: Mapping[str, np.ndarray]) -> np.ndarray:
        total = None
        for h in self._active():
            term = h.weight * h.transform(np.asarray(scores[h.id], dtype=float))
            total = term if total is None else total + term
        if total is None:
            total = np.zeros_like(next(iter(scores.values()), np.zeros(0)), dtype=float)
        return self.fusion._outer(total)

    def scores(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        per = {h.id: self.model(h.id).step_rewards(prompts, tokens).sum(axis=1) for h in self._active()}
        if not per:
            return self.fusion._outer(np.zeros(len(prompts)))
        return self.fuse_scores(per)

    def step_rewards(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Per-step fused rewards.

        When every transform and the outer functional are linear the fused
        reward decomposes exactly over steps. Otherwise the fused trajectory
        score is paid at the final step.
        """
        active = self._active()
        linear = self.fusion.outer in ("identity", "normalize") and all(h.transform.linear for h in active)
        if not linear or not active:
            out = np.zeros(np.shape(tokens), dtype=float)
            out[:, -1] = self.scores(prompts, tokens)
            return out
        total, const = None, 0.0
        for h in active:
            slope, intercept = h.transform.linear
            term = (h.weight * slope) * self.model(h.id).step_rewards(prompts, tokens)
            total = term if total is None else total + term
            const += h.weight * intercept
        if const != 0.0:
            total = total.copy()
            total[:, -1] += const
        if self.fusion.outer == "normalize":
            total = self.fusion._outer(total)
        return total


def fuse_rewards(models: Mapping[str, RewardLike], fusion: FusionSpec, sigma: Trajectory) -> float:
    """Fused score of one trajectory."""
    fused = FusedReward(fusion, models)
    return float(fused.scores(np.array([sigma.prompt]), np.array([sigma.tokens]))[0])


@dataclass
class FeedbackStream:
    horizon: HorizonSpec
    records: list[PreferenceRecord] = field(default_factory=list)
    batch: TournamentBatch | None = None

    def available(self, tick: float) -> list[PreferenceRecord]:
        return list(self.records) if tick >= self.horizon.delay else []


def simulate_delayed_feedback(
    choice_sets: list[ChoiceSet],
    horizons: Sequence[HorizonSpec],
    pool: UserPool,
    models: Mapping[str, GroundTruthModel],
    cfg: TestConfig,
    seed: int,
    **tournament_kwargs,
) -> dict[str, FeedbackStream]:
    """Preference streams per horizon, each released at its delay tick.

    Horizon ``i`` (in the given order) runs its tournaments on the stream
    ``make_rng(seed, "preferences", i)``, the same stream a single-horizon
    pipeline uses for index 0. Unobserved horizons yield empty streams.
    """
    out = {}
    for idx, h in enumerate(horizons):
        stream = FeedbackStream(h)
        if not h.predicted:
            if h.id not in models:
                raise ValueError(f"no ground-truth model for horizon {h.id!r}")
            rng = make_rng(seed, "preferences", idx)
            stream.batch = run_choice_sets(choice_sets, cfg, pool, models[h.id], rng, **tournament_kwargs)
            stream.records = stream.batch.records
        out[h.id] = stream
    return out


def correlated_model(
    base: GroundTruthModel, correlation: float, rng: np.random.Generator, bias: float | None = None
) -> GroundTruthModel:
    """A ground truth whose coefficients have the given correlation with ``base``'s."""
    if not -1.0 <= correlation <= 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    rest = math.sqrt(1.0 - correlation * correlation)
    uni_scale = float(base.unigram.std()) or 1.0
    bi_scale = float(base.bigram.std()) or 1.0
    uni = correlation * base.unigram + rest * rng.normal(0.0, uni_scale, base.unigram.shape)
    bi = correlation * base.bigram + rest * rng.normal(0.0, bi_scale, base.bigram.shape)
    return GroundTruthModel(base.kind, base.bias if bias is None else bias, uni, bi, base.trait_std, base.noise_std)


def simulate_tick_history(
    model: GroundTruthModel,
    flow: Trajectory,
    users: int,
    ticks: int,
    decay: float,
    rng: np.random.Generator,
    pool: UserPool | None = None,
) -> np.ndarray:
    """Observed per-tick indicator of one cohort whose value decays by ``decay`` per tick."""
    cohort = (
        sample_groups(pool, 1, users, rng)[0] if pool is not None else np.zeros(users, dtype=np.intp)
    )
    return np.array([
        decay**t * observe(model, flow, cohort, 0.0, rng, pool).values.mean() for t in range(ticks)
    ])


def long_run_value(model: GroundTruthModel, flow: Trajectory, decay: float, gamma: float) -> float:
    """Discounted infinite-horizon value of a cohort decaying geometrically."""
    return true_indicator(model, flow) / (1.0 - gamma * decay)


def predict_long_run(history: Sequence[float], gamma: float) -> float:
    """Discounted infinite sum extrapolated from a per-tick history.

    Fits ``x_t ~ level * rate**t`` by least squares on log values, anchored at
    the first tick, and returns ``level / (1 - gamma * rate)``. A constant
    history ``c`` gives exactly ``c / (1 - gamma)``.

    Raises:
        ValueError: with fewer than two ticks, non-positive values, or a
            fitted ``gamma * rate`` of 1 or more.
    """
    x = np.asarray(history, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 ticks of history to extrapolate")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if np.any(x <= 0):
        raise ValueError("per-tick indicators must be positive for the geometric fit")
    t = np.arange(x.size, dtype=float)
    tc = t - t.mean()
    resid0 = np.log(x) - np.log(x[0])
    slope = float(tc @ resid0 / (tc @ tc))
    rate = math.exp(slope)
    offset = float(np.mean(resid0 - slope * t))
    level = float(x[0]) * math.exp(offset)
    if gamma * rate >= 1.0:
        raise ValueError(f"fitted growth rate {rate:.4g} makes the discounted sum diverge")
    return level / (1.0 - gamma * rate)


@dataclass
class PredictedHorizon:
    model: RewardModel
    predictions: list[list[float]]
    relative_errors: list[float] = field(default_factory=list)
    records: list[PreferenceRecord] = field(default_factory=list)


def predict_unobserved(
    choice_sets: Sequence[ChoiceSet],
    histories: Sequence[Sequence[Sequence[float]]],
    gamma: float,
    features: FeatureMap,
    train_cfg: TrainConfig = TrainConfig(),
    true_values: Sequence[Sequence[float]] | None = None,
) -> PredictedHorizon:
    """Reward model for an unobserved horizon from extrapolated histories.

    ``histories[s][i]`` is the per-tick history of variant ``i`` in choice
    set ``s``. Variants are ordered by their predicted long-run value and the
    implied pairwise preferences train a fresh reward model.
    """
    if not histories:
        raise ValueError("history is empty")
    predictions = [[predict_long_run(h, gamma) for h in per_set] for per_set in histories]
    records: list[PreferenceRecord] = []
    for s, (cs, preds) in enumerate(zip(choice_sets, predictions)):
        for i, j in itertools.combinations(range(len(cs)), 2):
            a, b = cs.variants[i], cs.variants[j]
            if preds[i] == preds[j]:
                label = Label.TIE
            elif a == b:
                continue
            else:
                label = Label.FIRST if preds[i] > preds[j] else Label.SECOND
            records.append(PreferenceRecord(a, b, label, f"predicted/set{s}"))
    model, _ = train(RewardModel(features), records, train_cfg)
    errors = []
    if true_values is not None:
        for preds, truth in zip(predictions, true_values):
            errors.extend(abs(p - v) / abs(v) for p, v in zip(preds, truth))
    return PredictedHorizon(model, predictions, errors, records)


def _phase_seed(cfg: PPOConfig, phase: int) -> PPOConfig:
    if phase == 0:
        return cfg
    return PPOConfig(cfg.clip, cfg.kl_coef, cfg.learning_rate, cfg.iterations, cfg.episodes,
                     cfg.update_epochs, derive_seed(cfg.seed, "phase", phase))


def run_gradual(
    schedule: Sequence[tuple[HorizonSpec, RewardLike]],
    env: GenerationEnv,
    policy: PolicyModel,
    cfg: PPOConfig | Sequence[PPOConfig],
    truth: GroundTruthModel | None = None,
) -> tuple[PolicyModel, list[IterationRecord]]:
    """Fine-tune phase by phase, in order of delay, one horizon's reward per phase.

    Each phase starts from the previous phase's policy and re-anchors the KL
    reference there. Phase 0 uses ``cfg.seed`` itself, so one horizon is
    exactly a plain fine-tune.
    """
    schedule = sorted(schedule, key=lambda item: item[0].delay)
    cfgs = [cfg] * len(schedule) if isinstance(cfg, PPOConfig) else list(cfg)
    if len(cfgs) != len(schedule):
        raise ValueError("need one PPO config per phase")
    records: list[IterationRecord] = []
    for phase, ((_, reward), phase_cfg) in enumerate(zip(schedule, cfgs)):
        source = reward if hasattr(reward, "step_rewards") else reward()
        policy, recs = finetune(policy.reanchored(), source, _phase_seed(phase_cfg, phase), env, truth, phase)
        records.extend(recs)
    return policy, records


def run_onetime(
    fusion: FusionSpec,
    models: Mapping[str, RewardLike],
    env: GenerationEnv,
    policy: PolicyModel,
    cfg: PPOConfig,
    truth: GroundTruthModel | None = None,
) -> tuple[PolicyModel, list[IterationRecord]]:
    """One fine-tune against the fused reward of all horizons."""
    return finetune(policy, FusedReward(fusion, models), cfg, env, truth, 0)
