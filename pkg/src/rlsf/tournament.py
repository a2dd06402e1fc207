"""N-way testing: all pairwise A/B tests among N choices, ranked with Elo."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from rlsf.abtest import (
    FlowPair,
    TestConfig,
    TestOutcome,
    UsedUsers,
    Verdict,
    decide_from_observations,
)
from rlsf.population import (
    GroundTruthModel,
    InsufficientUsersError,
    UserPool,
    observe,
    sample_groups,
    true_indicator,
)
from rlsf.trajectory import Flow, Label, PreferenceRecord, Trajectory


@dataclass(frozen=True)
class ChoiceSet:
    """N candidate segments for the same position of an otherwise fixed flow."""

    variants: tuple[Trajectory, ...]
    prefix: tuple[Trajectory, ...] = ()
    suffix: tuple[Trajectory, ...] = ()

    def __post_init__(self) -> None:
        if len(self.variants) < 2:
            raise ValueError("a choice set needs at least two variants")
        if len({len(v) for v in self.variants}) != 1:
            raise ValueError("variants must share length")

    def __len__(self) -> int:
        return len(self.variants)

    @property
    def position(self) -> int:
        return len(self.prefix)

    def flow(self, i: int) -> Flow:
        return (*self.prefix, self.variants[i], *self.suffix)

    def pair(self, i: int, j: int) -> FlowPair:
        return FlowPair(self.variants[i], self.variants[j], self.prefix, self.suffix)


class Edge(str, enum.Enum):
    FIRST_WINS = "first_wins"
    SECOND_WINS = "second_wins"
    DRAW = "draw"
    ABSENT = "absent"


_EDGE_OF = {
    Verdict.FIRST_BETTER: Edge.FIRST_WINS,
    Verdict.SECOND_BETTER: Edge.SECOND_WINS,
    Verdict.EQUAL: Edge.DRAW,
    Verdict.INCONCLUSIVE: Edge.ABSENT,
}


@dataclass
class PreferenceGraph:
    """One labeled edge per unordered pair ``(i, j)`` with ``i < j``."""

    n: int
    edges: dict[tuple[int, int], Edge] = field(default_factory=dict)
    outcomes: dict[tuple[int, int], TestOutcome | None] = field(default_factory=dict)

    def labeled(self) -> list[tuple[int, int, Edge]]:
        return [(i, j, e) for (i, j), e in sorted(self.edges.items()) if e is not Edge.ABSENT]

    def to_json_lines(self) -> list[dict[str, Any]]:
        rows = []
        for (i, j), e in sorted(self.edges.items()):
            out = self.outcomes.get((i, j))
            rows.append({"i": i, "j": j, "edge": e.value, "outcome": out.to_json() if out else None})
        return rows


def run_tournament(
    choices: ChoiceSet,
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    rng: np.random.Generator,
) -> PreferenceGraph:
    """Expose N disjoint groups of ``cfg.M`` users to the N choices and test every pair.

    Each pair is decided by the two-stage rule on its two groups; resamples
    draw users not exposed anywhere else in the tournament. If the pool cannot
    supply the initial groups every edge is absent.
    """
    n = len(choices)
    pairs = list(itertools.combinations(range(n), 2))
    graph = PreferenceGraph(n)
    used = UsedUsers()
    try:
        groups = sample_groups(pool, n, cfg.M, rng, exclude=None)
    except InsufficientUsersError:
        for p in pairs:
            graph.edges[p], graph.outcomes[p] = Edge.ABSENT, None
        return graph
    used.add(groups)
    obs = [
        observe(model, choices.flow(i), groups[i], cfg.invalid_rate, r, pool)
        for i, r in enumerate(rng.spawn(n))
    ]
    for (i, j), pair_rng in zip(pairs, rng.spawn(len(pairs))):
        outcome = decide_from_observations(
            (choices.flow(i), choices.flow(j)), (obs[i], obs[j]), (cfg.M, cfg.M),
            cfg, pool, model, pair_rng, used,
        )
        graph.edges[(i, j)] = _EDGE_OF[outcome.verdict]
        graph.outcomes[(i, j)] = outcome
    return graph


@dataclass
class EloState:
    ratings: np.ndarray
    k_factor: float = 32.0
    rounds: int = 0

    @classmethod
    def fresh(cls, n: int, initial: float = 1000.0, k_factor: float = 32.0) -> "EloState":
        if k_factor <= 0:
            raise ValueError("k_factor must be positive")
        return cls(np.full(n, float(initial)), k_factor)

    def expected(self, a: int, b: int) -> float:
        return 1.0 / (1.0 + 10.0 ** ((self.ratings[b] - self.ratings[a]) / 400.0))

    def update(self, a: int, b: int, score_a: float) -> None:
        # One signed exchange keeps the rating total fixed.
        delta = self.k_factor * (score_a - self.expected(a, b))
        self.ratings[a] += delta
        self.ratings[b] -= delta


@dataclass(frozen=True)
class Ranking:
    order: tuple[int, ...]
    ratings: tuple[float, ...]
    history: tuple[tuple[int, int, float], ...] = ()  # (round, choice, rating)


_SCORE = {Edge.FIRST_WINS: 1.0, Edge.SECOND_WINS: 0.0, Edge.DRAW: 0.5}


def elo_rank(
    graph: PreferenceGraph,
    elo: EloState | None = None,
    passes: int = 50,
    rng: np.random.Generator | None = None,
    on_update=None,
) -> Ranking:
    """Rank choices by Elo over ``passes`` shuffled sweeps of the labeled edges.

    Absent edges never produce a match. Ties in the final rating are broken by
    choice index. ``on_update(state)`` is called after every single match.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    elo = elo if elo is not None else EloState.fresh(graph.n)
    rng = rng if rng is not None else np.random.default_rng(0)
    matches = graph.labeled()
    history = [(0, c, float(r)) for c, r in enumerate(elo.ratings)]
    for _ in range(passes):
        for idx in rng.permutation(len(matches)):
            i, j, edge = matches[idx]
            elo.update(i, j, _SCORE[edge])
            if on_update is not None:
                on_update(elo)
        elo.rounds += 1
        history.extend((elo.rounds, c, float(r)) for c, r in enumerate(elo.ratings))
    ratings = tuple(float(r) for r in elo.ratings)
    order = tuple(sorted(range(graph.n), key=lambda c: (-ratings[c], c)))
    return Ranking(order, ratings, tuple(history))


def ranking_to_preferences(
    ranking: Ranking, choices: ChoiceSet, run_id: str = "", tie_tol: float = 1e-9
) -> list[PreferenceRecord]:
    """All C(N, 2) pairwise records implied by the ranking.

    Records are emitted for ``i < j`` in index order; equal ratings (within
    ``tie_tol``) give tie records.
    """
    if sorted(ranking.order) != list(range(len(choices))):
        raise ValueError("ranking must cover every choice exactly once")
    out = []
    for i, j in itertools.combinations(range(len(choices)), 2):
        ri, rj = ranking.ratings[i], ranking.ratings[j]
        if math.isclose(ri, rj, rel_tol=0.0, abs_tol=tie_tol):
            label = Label.TIE
        else:
            label = Label.FIRST if ri > rj else Label.SECOND
        a, b = choices.variants[i], choices.variants[j]
        if a == b and label is not Label.TIE:
            continue
        out.append(PreferenceRecord(a, b, label, run_id))
    return out


def graph_to_preferences(graph: PreferenceGraph, choices: ChoiceSet, run_id: str = "") -> list[PreferenceRecord]:
    """One record per conclusive pairwise test, without ranking."""
    label_of = {Edge.FIRST_WINS: Label.FIRST, Edge.SECOND_WINS: Label.SECOND, Edge.DRAW: Label.TIE}
    out = []
    for i, j, edge in graph.labeled():
        a, b = choices.variants[i], choices.variants[j]
        if a == b and edge is not Edge.DRAW:
            continue
        out.append(PreferenceRecord(a, b, label_of[edge], run_id))
    return out


def true_order(choices: ChoiceSet, model: GroundTruthModel) -> tuple[int, ...]:
    eta = [true_indicator(model, choices.flow(i)) for i in range(len(choices))]
    return tuple(sorted(range(len(choices)), key=lambda c: (-eta[c], c)))


def pair_count(n: int) -> int:
    return math.comb(n, 2)


@dataclass
class TournamentBatch:
    records: list[PreferenceRecord] = field(default_factory=list)
    graphs: list[PreferenceGraph] = field(default_factory=list)
    rankings: list[Ranking] = field(default_factory=list)


def run_choice_sets(
    choice_sets: list[ChoiceSet],
    cfg: TestConfig,
    pool: UserPool,
    model: GroundTruthModel,
    rng: np.random.Generator,
    passes: int = 50,
    k_factor: float = 32.0,
    initial_rating: float = 1000.0,
    train_on: str = "ranking",
) -> TournamentBatch:
    """Tournament plus Elo for every choice set, collected into training records.

    ``train_on="ranking"`` emits the records implied by each Elo ranking;
    ``"outcomes"`` emits one record per conclusive pairwise test instead. A
    set whose tests were all inconclusive contributes no records.
    """
    if train_on not in ("ranking", "outcomes"):
        raise ValueError(f"train_on must be 'ranking' or 'outcomes', got {train_on!r}")
    batch = TournamentBatch()
    for idx, (cs, set_rng) in enumerate(zip(choice_sets, rng.spawn(len(choice_sets)))):
        test_rng, elo_rng = set_rng.spawn(2)
        graph = run_tournament(cs, cfg, pool, model, test_rng)
        ranking = elo_rank(graph, EloState.fresh(len(cs), initial_rating, k_factor), passes, elo_rng)
        run_id = f"set{idx}"
        if graph.labeled():
            if train_on == "ranking":
                batch.records.extend(ranking_to_preferences(ranking, cs, run_id))
            else:
                batch.records.extend(graph_to_preferences(graph, cs, run_id))
        batch.graphs.append(graph)
        batch.rankings.append(ranking)
    return batch
