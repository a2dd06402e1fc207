"""Linear per-step reward model fit to pairwise preferences.

The step score is ``theta . phi(s, a)`` where ``phi`` one-hot encodes the
token, the (position, token) pair, the (previous token, token) pair and the
(prompt, token) pair. A trajectory's score is the sum of its step scores, and
the model prefers ``a`` over ``b`` with probability ``logistic(R(a) - R(b))``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlsf.stats import DomainError
from rlsf.trajectory import PreferenceRecord, Trajectory

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rlsf-reward"
CHECKPOINT_VERSION = 1
BLOCKS = ("token", "position", "bigram", "prompt")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    vocab_size: int
    seq_len: int
    n_prompts: int
    blocks: tuple[str, ...] = BLOCKS

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown or not self.blocks:
            raise ValueError(f"unknown or empty feature blocks: {sorted(unknown)}")

    def _block_sizes(self) -> dict[str, int]:
        v = self.vocab_size
        return {
            "token": v,
            "position": self.seq_len * v,
            "bigram": (v + 1) * v,
            "prompt": self.n_prompts * v,
        }

    @property
    def dim(self) -> int:
        sizes = self._block_sizes()
        return sum(sizes[b] for b in self.blocks)

    def digest(self) -> str:
        spec = json.dumps(
            {"vocab_size": self.vocab_size, "seq_len": self.seq_len, "n_prompts": self.n_prompts,
             "blocks": list(self.blocks)},
            sort_keys=True,
        )
        return hashlib.sha256(spec.encode()).hexdigest()

    def step_indices(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Active feature index per block for every step: (n, k) -> (n, k, blocks)."""
        prompts = np.asarray(prompts, dtype=np.intp)
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 2 or tokens.shape[1] != self.seq_len:
            raise ValueError(f"expected tokens of shape (n, {self.seq_len}), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValueError("token id outside the vocabulary")
        if prompts.size and (prompts.min() < 0 or prompts.max() >= self.n_prompts):
            raise ValueError("prompt id outside the prompt set")
        v = self.vocab_size
        n, k = tokens.shape
        prev = np.concatenate([np.full((n, 1), v), tokens[:, :-1]], axis=1)
        pos = np.broadcast_to(np.arange(k), (n, k))
        sizes = self._block_sizes()
        cols, offset = [], 0
        for block in self.blocks:
            if block == "token":
                idx = tokens
            elif block == "position":
                idx = pos * v + tokens
            elif block == "bigram":
                idx = prev * v + tokens
            else:
                idx = prompts[:, None] * v + tokens
            cols.append(idx + offset)
            offset += sizes[block]
        return np.stack(cols, axis=-1)

    def trajectory_features(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Summed step features, shape (n, dim)."""
        idx = self.step_indices(prompts, tokens)
        n = idx.shape[0]
        out = np.zeros((n, self.dim))
        rows = np.repeat(np.arange(n), idx.shape[1] * idx.shape[2])
        np.add.at(out, (rows, idx.reshape(-1)), 1.0)
        return out

    def features_of(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        prompts, tokens = stack(trajs)
        return self.trajectory_features(prompts, tokens)


def stack(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    prompts = np.array([t.prompt for t in trajs], dtype=np.intp)
    tokens = np.array([t.tokens for t in trajs], dtype=np.intp)
    return prompts, tokens


@dataclass
class RewardModel:
    features: FeatureMap
    theta: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.theta is None:
            self.theta = np.zeros(self.features.dim)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.features.dim,):
            raise ValueError(f"theta must have shape ({self.features.dim},)")

    def copy(self) -> "RewardModel":
        return RewardModel(self.features, self.theta.copy())

    def step_rewards(self, prompts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Per-step scores r(s_t, a_t), shape (n, k)."""
        return self.theta[self.features.step_indices(prompts, tokens)].sum(axis=-1)

    def scores(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        prompts, tokens = stack(trajs)
        return self.step_rewards(prompts, tokens).sum(axis=1)

    def score(self, traj: Trajectory) -> float:
        return float(self.scores([traj])[0])


def _prefer_first(d: np.ndarray | float) -> np.ndarray:
    """logistic(d), evaluated so that p(d) + p(-d) == 1 exactly."""
    d = np.asarray(d, dtype=float)
    big = 1.0 / (1.0 + np.exp(-np.abs(d)))  # >= 0.5, no overflow
    return np.where(d >= 0, big, 1.0 - big)


def preference_probability(m: RewardModel, a: Trajectory, b: Trajectory) -> float:
    """Modelled probability that ``a`` is preferred to ``b``."""
    ra, rb = m.scores([a, b])
    return float(_prefer_first(ra - rb))


@dataclass(frozen=True)
class _Batch:
    diff: np.ndarray  # (n, dim) feature difference a - b
    kappa: np.ndarray  # (n, 2)


def _batch(m: RewardModel, records: Sequence[PreferenceRecord]) -> _Batch:
    if not records:
        raise DomainError("preference dataset is empty")
    fa = m.features.features_of([r.a for r in records])
    fb = m.features.features_of([r.b for r in records])
    kappa = np.array([r.label.kappa for r in records])
    return _Batch(fa - fb, kappa)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _loss_grad(theta: np.ndarray, batch: _Batch) -> tuple[float, np.ndarray]:
    d = batch.diff @ theta
    k1, k2 = batch.kappa[:, 0], batch.kappa[:, 1]
    # -log P(a > b) = softplus(-d), -log P(b > a) = softplus(d)
    losses = k1 * _softplus(-d) + k2 * _softplus(d)
    p = _prefer_first(d)
    dl_dd = -k1 * (1.0 - p) + k2 * p
    n = d.size
    return float(losses.sum() / n), batch.diff.T @ dl_dd / n


def loss(m: RewardModel, dataset: Sequence[PreferenceRecord]) -> float:
    """Mean cross-entropy between modelled and labelled preferences.

    Labels put weight (1, 0), (0, 1) or (1/2, 1/2) on (a preferred, b
    preferred). The mean equals the summed form divided by the record count.
    """
    return _loss_grad(m.theta, _batch(m, dataset))[0]


def loss_gradient(m: RewardModel, dataset: Sequence[PreferenceRecord]) -> np.ndarray:
    return _loss_grad(m.theta, _batch(m, dataset))[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 300
    seed: int = 0
    init_scale: float = 0.0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def train(
    m: RewardModel, dataset: Sequence[PreferenceRecord], cfg: TrainConfig = TrainConfig()
) -> tuple[RewardModel, list[float]]:
    """Full-batch gradient descent on :func:`loss`.

    Returns the trained copy and the loss trace; ``trace[0]`` is the loss
    before the first step and ``trace[e]`` the loss after ``e`` steps.

    Raises:
        TrainingDivergedError: if the loss or parameters stop being finite.
    """
    model = m.copy()
    if cfg.init_scale > 0:
        rng = np.random.default_rng(cfg.seed)
        model.theta = model.theta + cfg.init_scale * rng.standard_normal(model.theta.shape)
    batch = _batch(model, dataset)
    theta = model.theta
    value, grad = _loss_grad(theta, batch)
    trace = [value]
    for epoch in range(cfg.epochs):
        theta = theta - cfg.learning_rate * grad
        value, grad = _loss_grad(theta, batch)
        if not (np.isfinite(value) and np.all(np.isfinite(theta))):
            raise TrainingDivergedError(
                f"reward training diverged at epoch {epoch + 1} (last finite loss {trace[-1]:.6g}); "
                "lower the learning rate"
            )
        trace.append(value)
    model.theta = theta
    log.debug("reward training: loss %.6f -> %.6f over %d epochs", trace[0], trace[-1], cfg.epochs)
    return model, trace


def gradient_check(m: RewardModel, dataset: Sequence[PreferenceRecord], epsilon: float = 1e-5) -> float:
    """Max coordinate-wise relative error of the analytic gradient vs central differences."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    batch = _batch(m, dataset)
    _, analytic = _loss_grad(m.theta, batch)
    worst = 0.0
    theta = m.theta.copy()
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + epsilon
        up = _loss_grad(theta, batch)[0]
        theta[i] = orig - epsilon
        down = _loss_grad(theta, batch)[0]
        theta[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        scale = max(abs(numeric), abs(analytic[i]), 1e-6)
        worst = max(worst, abs(numeric - analytic[i]) / scale)
    return worst


def agreement(m: RewardModel, dataset: Sequence[PreferenceRecord]) -> float:
    """Fraction of strict records whose label matches the sign of the score gap."""
    strict = [r for r in dataset if r.label.kappa[0] != 0.5]
    if not strict:
        return float("nan")
    d = m.scores([r.a for r in strict]) - m.scores([r.b for r in strict])
    want = np.array([1.0 if r.label.kappa[0] == 1.0 else -1.0 for r in strict])
    return float(np.mean(np.sign(d) == want))


def save_checkpoint(m: RewardModel, path: str | os.PathLike) -> None:
    fm = m.features
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "feature_map": {"vocab_size": fm.vocab_size, "seq_len": fm.seq_len,
                        "n_prompts": fm.n_prompts, "blocks": list(fm.blocks)},
        "feature_map_hash": fm.digest(),
        "theta": m.theta.tolist(),
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path: str | os.PathLike) -> RewardModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} reward checkpoint")
    fm_spec = payload["feature_map"]
    fm = FeatureMap(fm_spec["vocab_size"], fm_spec["seq_len"], fm_spec["n_prompts"], tuple(fm_spec["blocks"]))
    if fm.digest() != payload["feature_map_hash"]:
        raise ValueError(f"{path}: feature map hash mismatch")
    return RewardModel(fm, np.array(payload["theta"], dtype=float))
