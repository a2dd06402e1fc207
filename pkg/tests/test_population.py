import math

import numpy as np
import pytest
from scipy.special import expit

from rlsf.population import (
    GroundTruthModel,
    InsufficientUsersError,
    UserPool,
    observe,
    quality_for_indicator,
    sample_groups,
    true_indicator,
)
from rlsf.stats import IndicatorKind
from rlsf.trajectory import Trajectory

V = 8
SIGMA = Trajectory(0, (1, 2, 3, 4))


def flat_model(kind="proportion", bias=0.0, trait_std=0.0, noise_std=0.0):
    return GroundTruthModel(kind, bias, np.zeros(V), np.zeros((V + 1, V)), trait_std, noise_std)


# -- pool and groups ----------------------------------------------------------


def test_pool_reproducible():
    a, b = UserPool.create(500, 0.7, 11), UserPool.create(500, 0.7, 11)
    assert np.array_equal(a.traits, b.traits)
    assert not np.array_equal(a.traits, UserPool.create(500, 0.7, 12).traits)


def test_empty_groups():
    pool = UserPool.create(10, 0.0, 0)
    groups = sample_groups(pool, 2, 0, np.random.default_rng(0))
    assert [g.size for g in groups] == [0, 0]


def test_exhaustive_partition():
    pool = UserPool.create(100, 1.0, 0)
    a, b = sample_groups(pool, 2, 50, np.random.default_rng(1))
    assert np.array_equal(np.sort(np.concatenate([a, b])), np.arange(100))


def test_groups_disjoint_and_sized():
    pool = UserPool.create(1000, 1.0, 0)
    groups = sample_groups(pool, 3, [100, 200, 300], np.random.default_rng(2))
    assert [g.size for g in groups] == [100, 200, 300]
    assert np.unique(np.concatenate(groups)).size == 600


def test_exclusion_respected():
    pool = UserPool.create(100, 1.0, 0)
    exclude = np.arange(60)
    (g,) = sample_groups(pool, 1, 40, np.random.default_rng(0), exclude=exclude)
    assert g.min() >= 60
    with pytest.raises(InsufficientUsersError):
        sample_groups(pool, 1, 41, np.random.default_rng(0), exclude=exclude)


def test_insufficient_users():
    with pytest.raises(InsufficientUsersError, match="insufficient users"):
        sample_groups(UserPool.create(10, 0.0, 0), 2, 6, np.random.default_rng(0))


def test_group_trait_means_exchangeable():
    # Per-seed difference of group-mean traits must centre on 0.
    pool = UserPool.create(1000, 1.0, 5)
    diffs = []
    for seed in range(10_000):
        a, b = sample_groups(pool, 2, 100, np.random.default_rng(seed))
        diffs.append(pool.traits[a].mean() - pool.traits[b].mean())
    diffs = np.array(diffs)
    se = diffs.std(ddof=1) / math.sqrt(diffs.size)
    assert abs(diffs.mean()) < 3 * se


# -- responses ----------------------------------------------------------------


def test_noise_free_mean_equals_quality():
    model = GroundTruthModel("mean", 0.4, np.linspace(-1, 1, V), np.zeros((V + 1, V)))
    obs = observe(model, SIGMA, np.arange(50), 0.0, np.random.default_rng(0))
    assert np.all(obs.values == model.quality(SIGMA))
    assert obs.valid.all()


def test_invalid_rate_bounds():
    with pytest.raises(ValueError):
        observe(flat_model(), SIGMA, np.arange(5), 1.0, np.random.default_rng(0))


def test_invalid_flags_are_bernoulli():
    obs = observe(flat_model(), SIGMA, np.arange(100_000), 0.2, np.random.default_rng(0))
    assert abs((~obs.valid).mean() - 0.2) < 4 * math.sqrt(0.2 * 0.8 / 100_000)
    assert obs.estimate().count == obs.valid.sum()


def test_proportion_values_binary_and_concentrated():
    model = flat_model(bias=quality_for_indicator(0.10, "proportion"))
    obs = observe(model, SIGMA, np.arange(100_000), 0.0, np.random.default_rng(4))
    assert set(np.unique(obs.values)) <= {0.0, 1.0}
    assert 0.097 <= obs.values.mean() <= 0.103
    assert all(s.value in (0.0, 1.0) for s in list(obs)[:10])


def test_observations_reproducible():
    pool = UserPool.create(1000, 0.5, 0)
    model = flat_model(trait_std=0.5)
    a = observe(model, SIGMA, np.arange(300), 0.1, np.random.default_rng(9), pool)
    b = observe(model, SIGMA, np.arange(300), 0.1, np.random.default_rng(9), pool)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.valid, b.valid)


# -- true indicator -----------------------------------------------------------


def test_symmetric_model_gives_half():
    assert true_indicator(flat_model(trait_std=0.8), SIGMA) == pytest.approx(0.5, abs=1e-15)


def test_noise_free_mean_indicator_is_quality():
    model = GroundTruthModel("mean", 1.5, np.arange(V) / 10, np.zeros((V + 1, V)))
    assert true_indicator(model, SIGMA) == model.quality(SIGMA) == pytest.approx(1.5 + 1.0)


def test_quality_includes_bigrams_and_segments():
    bi = np.zeros((V + 1, V))
    bi[V, 1] = 0.5  # start-of-segment -> 1
    bi[1, 2] = 0.25
    model = GroundTruthModel("mean", 0.0, np.zeros(V), bi)
    assert model.quality(SIGMA) == pytest.approx(0.75)
    assert model.quality([SIGMA, SIGMA]) == pytest.approx(1.5)


def test_heterogeneous_indicator_matches_monte_carlo():
    model = flat_model(bias=-1.2, trait_std=0.9)
    eta = true_indicator(model, SIGMA)
    rng = np.random.default_rng(0)
    draws = expit(-1.2 + 0.9 * rng.standard_normal(10_000_000))
    se = draws.std() / math.sqrt(draws.size)
    assert abs(eta - draws.mean()) < 3 * se
    assert eta != pytest.approx(expit(-1.2), abs=1e-3)  # the spread matters


@pytest.mark.parametrize("target, tau", [(0.1, 0.0), (0.1, 0.5), (0.73, 1.3)])
def test_quality_for_indicator_inverts(target, tau):
    q = quality_for_indicator(target, "proportion", tau)
    assert flat_model(bias=q, trait_std=tau).indicator_from_quality(q) == pytest.approx(target, abs=1e-12)


def test_quality_for_indicator_domain():
    with pytest.raises(ValueError):
        quality_for_indicator(1.0, "proportion")
    assert quality_for_indicator(3.2, IndicatorKind.MEAN) == 3.2


def test_empirical_mean_converges_at_root_n():
    pool = UserPool.create(100_000, 0.5, 1)
    model = GroundTruthModel.random("proportion", V, np.random.default_rng(3), bias=-1.0, trait_std=0.5)
    eta = true_indicator(model, SIGMA)
    for n in (1_000, 10_000, 100_000):
        err = []
        for seed in range(40):
            (users,) = sample_groups(pool, 1, n, np.random.default_rng(seed))
            err.append(observe(model, SIGMA, users, 0.0, np.random.default_rng(seed), pool).values.mean() - eta)
        rmse = math.sqrt(np.mean(np.square(err)))
        assert rmse < 2.0 * math.sqrt(eta * (1 - eta) / n)


def test_model_shape_validation():
    with pytest.raises(ValueError):
        GroundTruthModel("mean", 0.0, np.zeros(V), np.zeros((V, V)))
