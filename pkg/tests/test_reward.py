import itertools
import json
import math

import numpy as np
import pytest

from rlsf.reward import (
    FeatureMap,
    RewardModel,
    TrainConfig,
    TrainingDivergedError,
    agreement,
    gradient_check,
    load_checkpoint,
    loss,
    loss_gradient,
    preference_probability,
    save_checkpoint,
    train,
)
from rlsf.stats import DomainError
from rlsf.trajectory import Label, PreferenceRecord, Trajectory

TINY = FeatureMap(4, 1, 1, ("token",))
A, B = Trajectory(0, (1,)), Trajectory(0, (2,))


def tiny(theta):
    return RewardModel(TINY, np.array(theta, dtype=float))


def random_trajs(rng, n, fm):
    return [Trajectory(int(rng.integers(fm.n_prompts)), tuple(rng.integers(0, fm.vocab_size, fm.seq_len)))
            for _ in range(n)]


def random_dataset(rng, n, fm):
    trajs = random_trajs(rng, 2 * n, fm)
    out = []
    for a, b in zip(trajs[::2], trajs[1::2]):
        label = Label.TIE if a == b else Label(rng.choice(["first", "second", "tie"]))
        out.append(PreferenceRecord(a, b, label))
    return out


# -- features -----------------------------------------------------------------


def test_default_feature_dimension():
    assert FeatureMap(16, 6, 4).dim == 16 + 6 * 16 + 17 * 16 + 4 * 16 == 448


def test_each_step_activates_one_feature_per_block():
    fm = FeatureMap(5, 3, 2)
    x = fm.features_of([Trajectory(1, (0, 4, 4))])
    assert x.sum() == 3 * 4
    assert x.max() == 2.0  # token 4 appears twice


def test_feature_bounds_checked():
    with pytest.raises(ValueError):
        FeatureMap(4, 2, 1).features_of([Trajectory(0, (1, 4))])
    with pytest.raises(ValueError):
        FeatureMap(4, 2, 1, ("token", "trigram"))


def test_score_is_sum_of_step_scores():
    fm = FeatureMap(6, 4, 3)
    m = RewardModel(fm, np.random.default_rng(0).normal(size=fm.dim))
    t = Trajectory(2, (5, 0, 3, 3))
    steps = m.step_rewards(np.array([2]), np.array([t.tokens]))
    assert m.score(t) == pytest.approx(steps.sum(), rel=1e-14)
    assert m.score(t) == pytest.approx(fm.features_of([t])[0] @ m.theta, rel=1e-12)


# -- preference probability ---------------------------------------------------


def test_equal_scores_half():
    assert preference_probability(tiny([0, 1, 1, 0]), A, B) == 0.5
    assert preference_probability(tiny([0, 0, 0, 0]), A, B) == 0.5


def test_log_three_gap_gives_three_quarters():
    assert preference_probability(tiny([0, math.log(3), 0, 0]), A, B) == pytest.approx(0.75, abs=1e-15)


@pytest.mark.parametrize("gap", [0.0, 1e-12, 0.3, 7.0, 40.0, 800.0, 1e6])
def test_probabilities_sum_to_one_exactly(gap):
    m = tiny([0, gap, 0, 0])
    p, q = preference_probability(m, A, B), preference_probability(m, B, A)
    assert p + q == 1.0
    assert np.isfinite(p)


def test_random_pairs_normalized():
    rng = np.random.default_rng(1)
    fm = FeatureMap(8, 5, 2)
    for _ in range(200):
        m = RewardModel(fm, rng.normal(scale=rng.choice([0.1, 10, 1e4]), size=fm.dim))
        a, b = random_trajs(rng, 2, fm)
        assert preference_probability(m, a, b) + preference_probability(m, b, a) == 1.0


def test_only_score_difference_matters():
    fm = FeatureMap(8, 5, 2)
    rng = np.random.default_rng(2)
    m = RewardModel(fm, rng.normal(size=fm.dim))
    shifted = m.copy()
    shifted.theta[:8] += 3.7  # token block: one active feature per step
    data = random_dataset(rng, 30, fm)
    for r in data:
        assert preference_probability(m, r.a, r.b) == pytest.approx(preference_probability(shifted, r.a, r.b),
                                                                     abs=1e-12)
    assert loss(m, data) == pytest.approx(loss(shifted, data), rel=1e-12)


# -- loss ---------------------------------------------------------------------


def test_tie_at_zero_is_log_two():
    assert loss(tiny([0, 0, 0, 0]), [PreferenceRecord(A, B, Label.TIE)]) == pytest.approx(math.log(2))


def test_first_record_closed_form():
    value = loss(tiny([0, math.log(3), 0, 0]), [PreferenceRecord(A, B, Label.FIRST)])
    assert value == pytest.approx(-math.log(0.75), rel=1e-14)


def test_loss_is_mean_of_record_losses():
    m = tiny([0, 0.4, -0.2, 0])
    recs = [PreferenceRecord(A, B, Label.FIRST), PreferenceRecord(A, B, Label.SECOND), PreferenceRecord(A, B, "tie")]
    p = 1 / (1 + math.exp(-0.6))
    expected = (-math.log(p) - math.log(1 - p) - 0.5 * math.log(p) - 0.5 * math.log(1 - p)) / 3
    assert loss(m, recs) == pytest.approx(expected, rel=1e-14)


def test_loss_nonnegative_and_huge_gaps_finite():
    rng = np.random.default_rng(4)
    fm = FeatureMap(8, 5, 2)
    data = random_dataset(rng, 40, fm)
    for scale in (0, 1, 1e3, 1e6):
        value = loss(RewardModel(fm, rng.normal(scale=scale, size=fm.dim)), data)
        assert 0 <= value < math.inf


def test_empty_dataset_is_domain_error():
    with pytest.raises(DomainError):
        loss(tiny([0, 0, 0, 0]), [])
    with pytest.raises(DomainError):
        gradient_check(tiny([0, 0, 0, 0]), [])


# -- gradient -----------------------------------------------------------------


def test_gradient_check_at_zero():
    fm = FeatureMap(6, 4, 2)
    data = random_dataset(np.random.default_rng(5), 25, fm)
    assert gradient_check(RewardModel(fm), data) < 1e-4


def test_gradient_check_random_draws():
    rng = np.random.default_rng(6)
    fm = FeatureMap(5, 3, 2)
    for _ in range(100):
        data = random_dataset(rng, int(rng.integers(1, 20)), fm)
        m = RewardModel(fm, rng.normal(scale=0.5, size=fm.dim))
        assert gradient_check(m, data) < 1e-4


def test_gradient_check_epsilon_bounds():
    with pytest.raises(ValueError):
        gradient_check(tiny([0, 0, 0, 0]), [PreferenceRecord(A, B, Label.TIE)], epsilon=1e-2)


def test_gradient_matches_closed_form():
    m = tiny([0, 0.2, 0.5, 0])
    g = loss_gradient(m, [PreferenceRecord(A, B, Label.FIRST)])
    p = 1 / (1 + math.exp(0.3))
    assert g[1] == pytest.approx(-(1 - p)) and g[2] == pytest.approx(1 - p)
    assert g[0] == g[3] == 0.0


# -- training -----------------------------------------------------------------


def test_single_record_loss_strictly_decreases():
    _, trace = train(tiny([0, 0, 0, 0]), [PreferenceRecord(A, B, Label.FIRST)], TrainConfig(0.1, 200))
    assert len(trace) == 201
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_ties_pull_scores_together():
    m = tiny([0, 2.0, -1.0, 0])
    trained, _ = train(m, [PreferenceRecord(A, B, Label.TIE)], TrainConfig(0.5, 100))
    before = abs(m.score(A) - m.score(B))
    assert abs(trained.score(A) - trained.score(B)) <= before
    assert abs(trained.score(A) - trained.score(B)) < 0.1 * before


def test_planted_preferences_recovered():
    rng = np.random.default_rng(7)
    fm = FeatureMap(16, 6, 4)
    planted = RewardModel(fm, rng.normal(size=fm.dim))
    trajs = random_trajs(rng, 1200, fm)
    data = []
    for a, b in zip(trajs[::2], trajs[1::2]):
        ra, rb = planted.score(a), planted.score(b)
        if a != b and ra != rb:
            data.append(PreferenceRecord(a, b, Label.FIRST if ra > rb else Label.SECOND))
    trained, _ = train(RewardModel(fm), data, TrainConfig(1.0, 2000))
    assert agreement(trained, data) >= 0.99


def test_transitive_strict_set_fit():
    fm = FeatureMap(8, 4, 2)
    rng = np.random.default_rng(8)
    items = random_trajs(rng, 12, fm)
    items = list(dict.fromkeys(items))
    data = [PreferenceRecord(a, b, Label.FIRST) for a, b in itertools.combinations(items, 2)]
    trained, _ = train(RewardModel(fm), data, TrainConfig(0.5, 1000))
    assert agreement(trained, data) >= 0.95


def test_training_deterministic():
    fm = FeatureMap(6, 3, 2)
    data = random_dataset(np.random.default_rng(9), 30, fm)
    cfg = TrainConfig(0.3, 50, seed=4, init_scale=0.1)
    a, ta = train(RewardModel(fm), data, cfg)
    b, tb = train(RewardModel(fm), data, cfg)
    assert np.array_equal(a.theta, b.theta) and ta == tb


def test_divergence_reported():
    fm = FeatureMap(4, 4, 1, ("token",))
    data = [PreferenceRecord(Trajectory(0, (1, 1, 1, 1)), Trajectory(0, (2, 2, 2, 2)), Label.FIRST)]
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDivergedError, match="diverged"):
        train(RewardModel(fm), data, TrainConfig(1e308, 5))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    fm = FeatureMap(16, 6, 4)
    m = RewardModel(fm, np.random.default_rng(0).normal(size=fm.dim))
    save_checkpoint(m, tmp_path / "rm.json")
    back = load_checkpoint(tmp_path / "rm.json")
    assert back.features == fm and np.array_equal(back.theta, m.theta)


def test_checkpoint_hash_checked(tmp_path):
    save_checkpoint(RewardModel(TINY), tmp_path / "rm.json")
    payload = json.loads((tmp_path / "rm.json").read_text())
    payload["feature_map"]["vocab_size"] = 5
    (tmp_path / "rm.json").write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "rm.json")
    payload["version"] = 99
    (tmp_path / "rm.json").write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "rm.json")
