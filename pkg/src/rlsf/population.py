"""Simulated user pool and ground-truth business-indicator model.

Each user carries a latent responsiveness trait ~ Normal(0, trait_std^2).
A flow's quality ``q`` is linear in token-occurrence and token-pair
features. Proportion indicators respond with probability
``logistic(q + trait)``; mean indicators respond with
``q + trait + Normal(0, noise_std^2)``.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from rlsf.stats import IndicatorEstimate, IndicatorKind
from rlsf.trajectory import Flow, Trajectory, as_flow

GAUSS_HERMITE_NODES = 64
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(GAUSS_HERMITE_NODES)


class InsufficientUsersError(RuntimeError):
    """The pool has too few eligible users for the requested groups."""


@dataclass(frozen=True)
class UserPool:
    traits: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return int(self.traits.size)

    @classmethod
    def create(cls, size: int, trait_std: float, seed: int) -> "UserPool":
        if size < 0 or trait_std < 0:
            raise ValueError("pool size and trait_std must be non-negative")
        rng = np.random.default_rng(seed)
        traits = rng.normal(0.0, trait_std, size) if trait_std > 0 else np.zeros(size)
        traits.setflags(write=False)
        return cls(traits=traits, seed=seed)


def sample_groups(
    pool: UserPool,
    group_count: int,
    group_size: int | Sequence[int],
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Draw disjoint groups of user indices uniformly without replacement.

    ``group_size`` is either one size for every group or one size per group.
    Users listed in ``exclude`` are not eligible.

    Raises:
        InsufficientUsersError: if fewer eligible users exist than requested.
    """
    sizes = [int(group_size)] * group_count if np.isscalar(group_size) else [int(s) for s in group_size]
    if len(sizes) != group_count or any(s < 0 for s in sizes):
        raise ValueError("need one non-negative size per group")
    total = sum(sizes)
    if exclude is not None and len(exclude):
        eligible = np.setdiff1d(np.arange(pool.size), exclude, assume_unique=False)
    else:
        eligible = None
    available = pool.size if eligible is None else eligible.size
    if total > available:
        raise InsufficientUsersError(f"insufficient users: need {total}, {available} eligible")
    if eligible is None:
        drawn = rng.choice(pool.size, size=total, replace=False)
    else:
        drawn = eligible[rng.choice(eligible.size, size=total, replace=False)]
    return np.split(drawn, np.cumsum(sizes)[:-1])


@dataclass(frozen=True)
class IndicatorSample:
    user: int
    value: float
    valid: bool


@dataclass(frozen=True)
class Observations:
    """Per-user feedback for one group, stored column-wise."""

    kind: IndicatorKind
    users: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)

    def __iter__(self) -> Iterator[IndicatorSample]:
        for u, v, ok in zip(self.users, self.values, self.valid):
            yield IndicatorSample(int(u), float(v), bool(ok))

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid]

    def estimate(self) -> IndicatorEstimate:
        return IndicatorEstimate.from_values(self.kind, self.valid_values())


@dataclass(frozen=True)
class GroundTruthModel:
    """Quality function and response mechanism for one business indicator.

    ``unigram`` has shape (V,), ``bigram`` has shape (V + 1, V) where the last
    row scores the first token of a segment. ``trait_std`` must match the
    pool the model is observed on; it defines the population for
    :func:`true_indicator`.
    """

    kind: IndicatorKind
    bias: float
    unigram: np.ndarray
    bigram: np.ndarray
    trait_std: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", IndicatorKind(self.kind))
        uni = np.asarray(self.unigram, dtype=float)
        bi = np.asarray(self.bigram, dtype=float)
        if uni.ndim != 1 or bi.shape != (uni.size + 1, uni.size):
            raise ValueError("bigram must have shape (V + 1, V) for unigram of shape (V,)")
        if self.trait_std < 0 or self.noise_std < 0:
            raise ValueError("trait_std and noise_std must be non-negative")
        object.__setattr__(self, "unigram", uni)
        object.__setattr__(self, "bigram", bi)

    @property
    def vocab_size(self) -> int:
        return int(self.unigram.size)

    @classmethod
    def random(
        cls,
        kind: IndicatorKind | str,
        vocab_size: int,
        rng: np.random.Generator,
        bias: float = 0.0,
        unigram_scale: float = 0.3,
        bigram_scale: float = 0.1,
        trait_std: float = 0.0,
        noise_std: float = 0.0,
    ) -> "GroundTruthModel":
        uni = rng.normal(0.0, unigram_scale, vocab_size)
        bi = rng.normal(0.0, bigram_scale, (vocab_size + 1, vocab_size))
        return cls(IndicatorKind(kind), bias, uni, bi, trait_std, noise_std)

    def segment_quality(self, tokens: np.ndarray) -> np.ndarray:
        """Quality contribution of token rows, shape (n, k) -> (n,)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.intp))
        prev = np.concatenate([np.full((tokens.shape[0], 1), self.vocab_size), tokens[:, :-1]], axis=1)
        return self.unigram[tokens].sum(axis=1) + self.bigram[prev, tokens].sum(axis=1)

    def quality(self, flow: Trajectory | Sequence[Trajectory]) -> float:
        segs = as_flow(flow)
        return self.bias + float(sum(self.segment_quality(np.array([s.tokens]))[0] for s in segs))

    def indicator_from_quality(self, q: np.ndarray | float) -> np.ndarray | float:
        """Population indicator for quality value(s) ``q``."""
        if self.kind is IndicatorKind.MEAN:
            return q
        if self.trait_std == 0.0:
            return expit(q)
        q_arr = np.asarray(q, dtype=float)
        # E[logistic(q + tau Z)] with Gauss-Hermite: Z = sqrt(2) x.
        vals = expit(q_arr[..., None] + np.sqrt(2.0) * self.trait_std * _GH_X) @ _GH_W / np.sqrt(np.pi)
        return float(vals) if np.ndim(q) == 0 else vals

    def with_bias(self, bias: float) -> "GroundTruthModel":
        return GroundTruthModel(self.kind, bias, self.unigram, self.bigram, self.trait_std, self.noise_std)


def true_indicator(model: GroundTruthModel, flow: Trajectory | Sequence[Trajectory]) -> float:
    """Population-mean response for ``flow`` (exact for mean kind, 64-node quadrature otherwise)."""
    return float(model.indicator_from_quality(model.quality(flow)))


def quality_for_indicator(target: float, kind: IndicatorKind | str, trait_std: float = 0.0) -> float:
    """Invert the link: the quality value whose population indicator is ``target``."""
    kind = IndicatorKind(kind)
    if kind is IndicatorKind.MEAN:
        return float(target)
    if not 0.0 < target < 1.0:
        raise ValueError("a proportion target must lie in (0, 1)")
    if trait_std == 0.0:
        return float(np.log(target) - np.log1p(-target))
    probe = GroundTruthModel(kind, 0.0, np.zeros(1), np.zeros((2, 1)), trait_std)
    return float(brentq(lambda q: probe.indicator_from_quality(q) - target, -60.0, 60.0, xtol=1e-14))


def observe(
    model: GroundTruthModel,
    flow: Trajectory | Sequence[Trajectory] | Flow,
    users: np.ndarray,
    invalid_rate: float,
    rng: np.random.Generator,
    pool: UserPool | None = None,
) -> Observations:
    """Collect one response per user under ``flow``.

    Each user is independently marked invalid with probability
    ``invalid_rate``. Traits come from ``pool``; without a pool all traits
    are taken as zero.
    """
    if not 0.0 <= invalid_rate < 1.0:
        raise ValueError(f"invalid_rate must be in [0, 1), got {invalid_rate}")
    users = np.asarray(users, dtype=np.intp)
    n = users.size
    traits = pool.traits[users] if pool is not None else np.zeros(n)
    valid = rng.random(n) >= invalid_rate if invalid_rate > 0 else np.ones(n, dtype=bool)
    q = model.quality(flow)
    if model.kind is IndicatorKind.PROPORTION:
        values = (rng.random(n) < expit(q + traits)).astype(float)
    else:
        values = q + traits
        if model.noise_std > 0:
            values = values + model.noise_std * rng.standard_normal(n)
        else:
            values = values.astype(float)
    return Observations(model.kind, users, values, valid)
