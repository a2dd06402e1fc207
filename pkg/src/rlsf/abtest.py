"""Two-stage A/B testing of flow variants, producing preference labels.

Stage one is a pooled t-test for any difference. When it rejects, stage two
asks whether the groups are large enough to detect the gap
``max(delta0, |observed gap|)`` with the configured power; if not, the test is
either inconclusive or, when resampling is allowed, repeated on fresh, larger
groups.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from rlsf.population import (
    GroundTruthModel,
    InsufficientUsersError,
    Observations,
    UserPool,
    observe,
    sample_groups,
)
from rlsf.stats import (
    IndicatorEstimate,
    IndicatorKind,
    SampleSizeResult,
    min_sample_size_mean,
    min_sample_size_proportion,
    pooled_t_test,
)
from rlsf.trajectory import Flow, Label, PreferenceRecord, Trajectory


@dataclass(frozen=True)
class TestConfig:
    alpha: float = 0.05
    beta: float = 0.2
    delta0: float = 0.01
    M: int = 1000
    k_ratio: float = 1.0
    max_resamples: int = 0
    invalid_rate: float = 0.0

    __test__ = False  # not a pytest class

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1 or not 0 < self.beta < 1:
            raise ValueError("alpha and beta must lie in (0, 1)")
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if not self.k_ratio > 0:
            raise ValueError("k_ratio must be positive")
        if self.max_resamples < 0:
            raise ValueError("max_resamples must be >= 0")
        if not 0 <= self.invalid_rate < 1:
            raise ValueError("invalid_rate must lie in [0, 1)")

    @property
    def group_sizes(self) -> tuple[int, int]:
        return self.M, max(2, round(self.k_ratio * self.M))


@dataclass(frozen=True)
class FlowPair:
    """Two flows identical except for the segment at position ``len(prefix)``."""

    first: Trajectory
    second: Trajectory
    prefix: tuple[Trajectory, ...] = ()
    suffix: tuple[Trajectory, ...] = ()

    def __post_init__(self) -> None:
        if len(self.first) != len(self.second):
            raise ValueError("variant segments must share length")

    @property
    def position(self) -> int:
        return len(self.prefix)

    def flows(self) -> tuple[Flow, Flow]:
        return (
            (*self.prefix, self.first, *self.suffix),
            (*self.prefix, self.second, *self.suffix),
        )

    def swapped(self) -> "FlowPair":
        return FlowPair(self.second, self.first, self.prefix, self.suffix)


class Verdict(str, enum.Enum):
    FIRST_BETTER = "first_better"
    SECOND_BETTER = "second_better"
    EQUAL = "equal"
    INCONCLUSIVE = "inconclusive"

    def mirrored(self) -> "Verdict":
        return _MIRROR.get(self, self)


_MIRROR = {Verdict.FIRST_BETTER: Verdict.SECOND_BETTER, Verdict.SECOND_BETTER: Verdict.FIRST_BETTER}


@dataclass(frozen=True)
class TestOutcome:
    verdict: Verdict
    gap: float
    t: float
    means: tuple[float, float]
    sizes: tuple[int, int]
    required: tuple[int, int] | None
    resamples: int
    reason: str = ""

    __test__ = False

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "gap": self.gap,
            "t": self.t if math.isfinite(self.t) else str(self.t),
            "means": list(self.means),
            "sizes": list(self.sizes),
            "required": list(self.required) if self.required else None,
            "resamples": self.resamples,
            "reason": self.reason,
        }


@dataclass
class _Round:
    """Group sizes and estimates of one testing round, indexed by slot."""

    slot_sizes: list[int]
    estimates: list[IndicatorEstimate]


@dataclass
class UsedUsers:
    """Users already exposed within one experiment; never re-drawn."""

    chunks: list[np.ndarray] = field(default_factory=list)

    def add(self, groups: Sequence[np.ndarray]) -> None:
        self.chunks.extend(groups)

    def array(self) -> np.ndarray | None:
        return np.concatenate(self.chunks) if self.chunks else None


def required_sizes(a: IndicatorEstimate, b: IndicatorEstimate, cfg: TestConfig) -> tuple[SampleSizeResult, float]:
    """Minimum sizes for the second-stage test and the gap they target.

    The ratio ``k`` is the realized ratio of valid group sizes.
    """
    gap = a.mean - b.mean
    delta = max(cfg.delta0, abs(gap))
    k = b.count / a.count
    if a.kind is IndicatorKind.PROPORTION:
        p1 = _clamp_rate(a.mean, a.count)
        p2 = _clamp_rate(b.mean, b.count)
        return min_sample_size_proportion(p1, p2, k, cfg.alpha, cfg.beta, delta), delta
    if a.variance == 0.0 and b.variance == 0.0:
        # Noise-free groups detect any gap with one observation.
        return SampleSizeResult(1, max(1, math.ceil(k)), math.nan, math.nan), delta
    return min_sample_size_mean(a.std, b.std, k, cfg.alpha, cfg.beta, delta), delta


def _clamp_rate(p: float, n: int) -> float:
    # Keep an all-0 or all-1 group inside (0, 1) for the variance terms.
    eps = 0.5 / n
    return min(max(p, eps), 1.0 - eps)


def _outcome(rnd: _Round, slots: tuple[int, int], verdict: Verdict, resamples: int,
             t: float, required: tuple[int, int] | None, reason: str = "") -> TestOutcome:
    a, b = (rnd.estimates[s] for s in slots)
    return TestOutcome(
        verdict=verdict,
        gap=a.mean - b.mean,
        t=t,
        means=(a.mean, b.mean),
        sizes=(a.count, b.count),
        required=required,
        resamples=resamples,
        reason=reason,
    )


def _decide_rounds(
    flows: tuple[Flow, Flow],
    slots: tuple[int, int],
    first: _Round,
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    rng: np.random.Generator,
    used: UsedUsers,
) -> TestOutcome:
    """Decide on ``first`` and keep resampling while the policy allows.

    ``slots[i]`` is the slot whose users saw ``flows[i]``.
    """
    rnd, resamples = first, 0
    while True:
        a, b = (rnd.estimates[s] for s in slots)
        if a.count < 1 or b.count < 1 or a.count + b.count < 3:
            return _outcome(rnd, slots, Verdict.INCONCLUSIVE, resamples, math.nan, None,
                            "too few valid samples")
        tt = pooled_t_test(a, b, cfg.alpha)
        if not tt.reject:
            return _outcome(rnd, slots, Verdict.EQUAL, resamples, tt.t, None)
        need, _ = required_sizes(a, b, cfg)
        if need.n1 <= a.count and need.n2 <= b.count:
            verdict = Verdict.FIRST_BETTER if a.mean > b.mean else Verdict.SECOND_BETTER
            return _outcome(rnd, slots, verdict, resamples, tt.t, (need.n1, need.n2))
        if resamples >= cfg.max_resamples:
            return _outcome(rnd, slots, Verdict.INCONCLUSIVE, resamples, tt.t, (need.n1, need.n2),
                            "sample size below required minimum")
        keep = 1.0 - cfg.invalid_rate
        new_sizes = [0, 0]
        for pos, n in enumerate((need.n1, need.n2)):
            s = slots[pos]
            new_sizes[s] = max(math.ceil(n / keep), 2 * rnd.slot_sizes[s])
        try:
            groups = sample_groups(pool, 2, new_sizes, rng, exclude=used.array())
        except InsufficientUsersError as exc:
            return _outcome(rnd, slots, Verdict.INCONCLUSIVE, resamples, tt.t, (need.n1, need.n2),
                            f"resample failed: {exc}")
        used.add(groups)
        resamples += 1
        slot_flows = _slot_flows(flows, slots)
        rnd = _Round(new_sizes, [
            observe(model, slot_flows[s], groups[s], cfg.invalid_rate, r, pool).estimate()
            for s, r in enumerate(rng.spawn(2))
        ])


def _slot_flows(flows: tuple[Flow, Flow], slots: tuple[int, int]) -> list[Flow]:
    out: list[Flow] = [(), ()]
    for pos, s in enumerate(slots):
        out[s] = flows[pos]
    return out


def run_ab_test(
    pair: FlowPair,
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    rng: np.random.Generator,
    *,
    mirror: bool = False,
    used: UsedUsers | None = None,
) -> TestOutcome:
    """Run one A/B test of ``pair.first`` against ``pair.second``.

    Two disjoint groups of sizes ``cfg.group_sizes`` are drawn; by default
    the first flow goes to the first group. ``mirror=True`` hands the first
    flow to the second group instead, which is how a swapped pair reproduces
    the original experiment exactly.

    Raises:
        InsufficientUsersError: if the pool cannot supply the initial groups.
    """
    used = used if used is not None else UsedUsers()
    flows = pair.flows()
    slots = (1, 0) if mirror else (0, 1)
    sizes = list(cfg.group_sizes)
    groups = sample_groups(pool, 2, sizes, rng, exclude=used.array())
    used.add(groups)
    slot_flows = _slot_flows(flows, slots)
    first = _Round(sizes, [
        observe(model, slot_flows[s], groups[s], cfg.invalid_rate, r, pool).estimate()
        for s, r in enumerate(rng.spawn(2))
    ])
    return _decide_rounds(flows, slots, first, cfg, pool, model, rng, used)


def decide_from_observations(
    flows: tuple[Flow, Flow],
    observations: tuple[Observations, Observations],
    group_sizes: tuple[int, int],
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    rng: np.random.Generator,
    used: UsedUsers,
) -> TestOutcome:
    """Finish an A/B test whose first-round feedback was already collected."""
    first = _Round(list(group_sizes), [o.estimate() for o in observations])
    return _decide_rounds(flows, (0, 1), first, cfg, pool, model, rng, used)


def swap_invariance_check(
    pair: FlowPair,
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    seed: int,
) -> bool:
    """True iff swapping the variants mirrors the verdict at a fixed seed."""
    original = run_ab_test(pair, cfg, pool, model, np.random.default_rng(seed))
    swapped = run_ab_test(pair.swapped(), cfg, pool, model, np.random.default_rng(seed), mirror=True)
    return swapped.verdict is original.verdict.mirrored()


def outcome_to_preferences(outcome: TestOutcome, pair: FlowPair, run_id: str = "") -> PreferenceRecord | None:
    """Map a verdict to a training record; inconclusive tests yield none.

    A directional verdict between identical variants (a false positive) has no
    expressible preference and is dropped as well.
    """
    label = {
        Verdict.FIRST_BETTER: Label.FIRST,
        Verdict.SECOND_BETTER: Label.SECOND,
        Verdict.EQUAL: Label.TIE,
    }.get(outcome.verdict)
    if label is None or (pair.first == pair.second and label is not Label.TIE):
        return None
    return PreferenceRecord(pair.first, pair.second, label, run_id)
