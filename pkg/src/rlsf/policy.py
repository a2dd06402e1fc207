"""Toy token-generation policy, maximum-likelihood pretraining and PPO fine-tuning.

The policy is a table of logits indexed by the state ``(prompt, position,
previous token)``. Fine-tuning maximizes the clipped surrogate objective
minus a KL penalty toward a frozen reference copy.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from rlsf.population import GroundTruthModel
from rlsf.trajectory import Trajectory

log = logging.getLogger(__name__)


class PolicyDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationEnv:
    vocab_size: int = 16
    seq_len: int = 6
    n_prompts: int = 4

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.seq_len, self.n_prompts) < 1:
            raise ValueError("vocab_size, seq_len and n_prompts must be >= 1")

    @property
    def n_states(self) -> int:
        return self.n_prompts * self.seq_len * (self.vocab_size + 1)

    def state_index(self, prompts: np.ndarray, position: int | np.ndarray, prev: np.ndarray) -> np.ndarray:
        """``prev`` uses ``vocab_size`` for the start-of-sequence context."""
        return (np.asarray(prompts) * self.seq_len + position) * (self.vocab_size + 1) + np.asarray(prev)

    def states(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        n, k = tokens.shape
        prev = np.concatenate([np.full((n, 1), self.vocab_size), tokens[:, :-1]], axis=1)
        return self.state_index(np.asarray(prompts)[:, None], np.arange(k)[None, :], prev)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyModel:
    logits: np.ndarray  # (n_states, V)
    reference: np.ndarray  # frozen copy the KL penalty anchors to
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.logits.shape != self.reference.shape:
            raise ValueError("logits and reference must share shape")

    def probs(self, states: np.ndarray | slice = slice(None)) -> np.ndarray:
        if math.isinf(self.temperature):
            shape = self.logits[states].shape
            return np.full(shape, 1.0 / shape[-1])
        return _softmax(self.logits[states] / self.temperature)

    def reference_probs(self, states: np.ndarray | slice = slice(None)) -> np.ndarray:
        if math.isinf(self.temperature):
            shape = self.reference[states].shape
            return np.full(shape, 1.0 / shape[-1])
        return _softmax(self.reference[states] / self.temperature)

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.logits.copy(), self.reference.copy(), self.temperature)

    def reanchored(self) -> "PolicyModel":
        """A copy whose reference is its current parameters."""
        return PolicyModel(self.logits.copy(), self.logits.copy(), self.temperature)

    def kl_to_reference(self, states: np.ndarray) -> np.ndarray:
        p = self.probs(states)
        logq = np.log(self.reference_probs(states))
        return (p * (np.log(p) - logq)).sum(axis=-1)


@dataclass(frozen=True)
class PretrainConfig:
    corpus_size: int = 20000
    fluency_scale: float = 1.5
    pseudocount: float = 0.1
    temperature: float = 1.0


def fluency_logits(env: GenerationEnv, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Planted next-token logits the synthetic corpus is drawn from."""
    return scale * rng.standard_normal((env.n_states, env.vocab_size))


def pretrain(
    env: GenerationEnv,
    corpus_cfg: PretrainConfig,
    seed: int,
    corpus: Sequence[Trajectory] | None = None,
) -> PolicyModel:
    """Fit the tabular policy by maximum likelihood.

    Without an explicit ``corpus`` one is sampled from planted fluency logits.
    The fit is the smoothed count ratio per state, which is the exact
    likelihood maximizer once ``pseudocount`` goes to zero.
    """
    rng = np.random.default_rng(seed)
    if corpus is None:
        planted = fluency_logits(env, corpus_cfg.fluency_scale, rng)
        teacher = PolicyModel(planted, planted, 1.0)
        prompts, tokens = sample(teacher, env, corpus_cfg.corpus_size, rng)
    else:
        prompts = np.array([t.prompt for t in corpus], dtype=np.intp)
        tokens = np.array([t.tokens for t in corpus], dtype=np.intp)
    counts = np.zeros((env.n_states, env.vocab_size))
    np.add.at(counts, (env.states(prompts, tokens), tokens), 1.0)
    probs = (counts + corpus_cfg.pseudocount) / (
        counts.sum(axis=1, keepdims=True) + corpus_cfg.pseudocount * env.vocab_size
    )
    logits = np.log(probs) * corpus_cfg.temperature
    return PolicyModel(logits, logits.copy(), corpus_cfg.temperature)


def sample(
    policy: PolicyModel,
    env: GenerationEnv,
    count: int,
    rng: np.random.Generator,
    prompts: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``count`` episodes; returns (prompts (n,), tokens (n, k))."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if prompts is None:
        prompts = rng.integers(0, env.n_prompts, count)
    prompts = np.asarray(prompts, dtype=np.intp)
    tokens = np.empty((count, env.seq_len), dtype=np.intp)
    prev = np.full(count, env.vocab_size)
    for t in range(env.seq_len):
        cdf = np.cumsum(policy.probs(env.state_index(prompts, t, prev)), axis=1)
        u = rng.random(count)[:, None]
        tokens[:, t] = np.minimum((u >= cdf).sum(axis=1), env.vocab_size - 1)
        prev = tokens[:, t]
    return prompts, tokens


def generate(
    policy: PolicyModel, env: GenerationEnv, count: int, rng: np.random.Generator
) -> list[Trajectory]:
    prompts, tokens = sample(policy, env, count, rng)
    return [Trajectory(int(p), tuple(row)) for p, row in zip(prompts, tokens)]


def token_marginals(policy: PolicyModel, env: GenerationEnv, prompt: int) -> np.ndarray:
    """Exact P(token at position t) under ``policy`` for one prompt, shape (k, V)."""
    v = env.vocab_size
    prev_dist = np.zeros(v + 1)
    prev_dist[v] = 1.0
    out = np.empty((env.seq_len, v))
    for t in range(env.seq_len):
        p = policy.probs(env.state_index(prompt, t, np.arange(v + 1)))
        out[t] = prev_dist @ p
        prev_dist = np.append(out[t], 0.0)
    return out


class RewardSource(Protocol):
    def step_rewards(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    kl_coef: float = 0.05
    learning_rate: float = 2.0
    iterations: int = 40
    episodes: int = 256
    update_epochs: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.kl_coef < 0 or self.learning_rate <= 0:
            raise ValueError("kl_coef must be >= 0 and learning_rate > 0")
        if self.iterations < 0 or self.episodes < 1 or self.update_epochs < 1:
            raise ValueError("iterations >= 0, episodes >= 1 and update_epochs >= 1 required")


@dataclass(frozen=True)
class PPODiagnostics:
    mean_reward: float
    kl: float
    clip_fraction: float


def advantages(step_rewards: np.ndarray) -> np.ndarray:
    """Reward-to-go minus its batch mean at each position."""
    to_go = np.cumsum(step_rewards[:, ::-1], axis=1)[:, ::-1]
    return to_go - to_go.mean(axis=0, keepdims=True)


def ppo_update(
    policy: PolicyModel,
    reward: RewardSource,
    cfg: PPOConfig,
    env: GenerationEnv,
    rng: np.random.Generator,
) -> tuple[PolicyModel, PPODiagnostics]:
    """One PPO iteration: sample a batch, then ``update_epochs`` full-batch ascent steps.

    The step size is ``learning_rate / (1 + kl_coef)`` so a dominant KL
    penalty contracts toward the reference instead of overshooting.

    Raises:
        PolicyDivergedError: if the logits stop being finite.
    """
    new, diag, _ = _ppo_step(policy, reward, cfg, env, rng)
    return new, diag


def _ppo_step(policy, reward, cfg, env, rng):
    prompts, tokens = sample(policy, env, cfg.episodes, rng)
    rewards = reward.step_rewards(prompts, tokens)
    adv = advantages(rewards).reshape(-1)
    states = env.states(prompts, tokens).reshape(-1)
    actions = tokens.reshape(-1)
    n = states.size
    rows = np.arange(n)
    old_logp = np.log(policy.probs(states)[rows, actions])

    new = policy.copy()
    step = cfg.learning_rate / (1.0 + cfg.kl_coef)
    inv_t = 0.0 if math.isinf(new.temperature) else 1.0 / new.temperature
    clipped = np.zeros(n, dtype=bool)
    for _ in range(cfg.update_epochs):
        p = new.probs(states)
        ratio = np.exp(np.log(p[rows, actions]) - old_logp)
        clipped = ((adv > 0) & (ratio > 1 + cfg.clip)) | ((adv < 0) & (ratio < 1 - cfg.clip))
        coef = np.where(clipped, 0.0, adv * ratio) / n
        # d/dz log pi(a|s) = (onehot(a) - pi(.|s)) / T
        g = -coef[:, None] * p
        g[rows, actions] += coef
        grad = np.zeros_like(new.logits)
        np.add.at(grad, states, g * inv_t)
        if cfg.kl_coef > 0:
            q = new.reference_probs(states)
            logratio = np.log(p) - np.log(q)
            kl_s = (p * logratio).sum(axis=1, keepdims=True)
            g_kl = p * (logratio - kl_s) / n
            kl_grad = np.zeros_like(new.logits)
            np.add.at(kl_grad, states, g_kl * inv_t)
            grad -= cfg.kl_coef * kl_grad
        new.logits += step * grad
        if not np.all(np.isfinite(new.logits)):
            raise PolicyDivergedError("policy logits became non-finite; lower the PPO learning rate")
    diag = PPODiagnostics(
        mean_reward=float(rewards.sum(axis=1).mean()),
        kl=float(new.kl_to_reference(states).mean()),
        clip_fraction=float(clipped.mean()),
    )
    return new, diag, (prompts, tokens)


@dataclass(frozen=True)
class IterationRecord:
    phase: int
    iteration: int
    mean_reward: float
    true_indicator: float
    kl: float
    clip_fraction: float


def finetune(
    policy: PolicyModel,
    reward: RewardSource,
    cfg: PPOConfig,
    env: GenerationEnv,
    truth: GroundTruthModel | None = None,
    phase: int = 0,
) -> tuple[PolicyModel, list[IterationRecord]]:
    """Run ``cfg.iterations`` PPO iterations from ``policy``.

    With ``truth`` given, each record carries the mean true indicator of the
    batch that iteration sampled.
    """
    rng = np.random.default_rng(cfg.seed)
    records = []
    for it in range(cfg.iterations):
        policy, diag, (prompts, tokens) = _ppo_step(policy, reward, cfg, env, rng)
        eta = float(np.mean(true_indicators(truth, prompts, tokens))) if truth is not None else math.nan
        records.append(IterationRecord(phase, it, diag.mean_reward, eta, diag.kl, diag.clip_fraction))
    return policy, records


def true_indicators(truth: GroundTruthModel, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    q = truth.bias + truth.segment_quality(tokens)
    return np.asarray(truth.indicator_from_quality(q), dtype=float)


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    ci_low: float
    ci_high: float
    episodes: int
    degenerate: bool = False

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2.0


def evaluate_business_value(
    policy: PolicyModel,
    env: GenerationEnv,
    truth: GroundTruthModel,
    episodes: int,
    rng: np.random.Generator,
    z: float = 1.959963984540054,
) -> ValueEstimate:
    """Monte Carlo mean of the true indicator of sampled trajectories, with a normal CI.

    A single episode gives no spread estimate; the CI is then NaN and
    ``degenerate`` is set.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    prompts, tokens = sample(policy, env, episodes, rng)
    vals = true_indicators(truth, prompts, tokens)
    mean = float(vals.mean())
    if episodes == 1:
        return ValueEstimate(mean, math.nan, math.nan, 1, degenerate=True)
    half = z * float(vals.std(ddof=1)) / math.sqrt(episodes)
    return ValueEstimate(mean, mean - half, mean + half, episodes)
