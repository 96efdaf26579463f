import math

import pytest
from runez.schema import ValidationException

from betalab.calibration import beta_factors, BetaConfig, clamp_count, effective_beta, reference_M0, RunningStats, SIGMA_MIN
from betalab.calibration import update_stats
from betalab.core import InvalidInput, StateError


def stats_from(*batches, m=0.9):
    stats = RunningStats.fresh(m=m)
    for batch in batches:
        stats = update_stats(stats, batch)

    return stats


def test_config():
    cfg = BetaConfig()
    assert cfg.beta0 == 0.1
    assert cfg.alpha == 0.6
    assert cfg.mode == "batch"
    assert cfg.rho == 0.8
    assert cfg.strategy == "gaussian"
    assert cfg.source == "implicit"
    assert cfg.fixed_M0 is None
    assert cfg.validated() is cfg
    assert BetaConfig.from_dict(cfg.to_dict()) == cfg
    assert "fixed_M0" not in cfg.to_dict()

    assert BetaConfig.from_dict(dict(alpha=0)).alpha == 0.0
    assert "beta0 must be > 0" in BetaConfig.from_dict(dict(beta0=0)).problem()
    assert "alpha must be in [0, 2]" in BetaConfig.from_dict(dict(alpha=2.5)).problem()
    assert "m must be in [0, 1)" in BetaConfig.from_dict(dict(m=1)).problem()
    assert "rho must be in (0, 1]" in BetaConfig.from_dict(dict(rho=0)).problem()
    assert "factor_min must be > 0" in BetaConfig.from_dict(dict(factor_min=0)).problem()
    assert "exclusion must be in [0, 1)" in BetaConfig.from_dict(dict(exclusion=1)).problem()
    assert "fixed_M0 must be finite" in BetaConfig.from_dict(dict(fixed_M0=math.inf)).problem()
    with pytest.raises(InvalidInput):
        BetaConfig.from_dict(dict(rho=1.5)).validated()

    with pytest.raises(ValidationException):
        BetaConfig.from_dict(dict(mode="sometimes"))

    with pytest.raises(ValidationException):
        BetaConfig.from_dict(dict(beta0="high"))

    with pytest.raises(ValidationException, match="Extra content"):
        BetaConfig.from_dict(dict(gamma=1))


def test_running_stats():
    stats = RunningStats.fresh(m=0.5)
    assert not stats.initialized
    assert stats.m == 0.5
    assert str(stats) == "uninitialized stats"

    # First update copies batch mean and (population) std verbatim
    first = update_stats(stats, [1.0, 3.0])
    assert first.initialized
    assert first.M0 == 2.0
    assert first.sigma == 1.0
    assert first.m == 0.5
    assert str(first) == "M0=2 sigma=1"
    assert not stats.initialized  # Input not modified

    second = update_stats(first, [0.0, 0.0])
    assert second.M0 == pytest.approx(1.0)
    assert second.sigma == pytest.approx(0.5)

    stats = stats_from([1.0, 3.0], [0.0, 0.0])
    assert stats.M0 == pytest.approx(1.8)
    assert stats.sigma == pytest.approx(0.9)

    assert stats_from([5.0, 5.0]).sigma == SIGMA_MIN
    assert RunningStats.from_dict(stats.to_dict()) == stats

    with pytest.raises(InvalidInput, match="empty batch"):
        update_stats(stats, [])

    with pytest.raises(InvalidInput, match="non-finite"):
        update_stats(stats, [1.0, math.nan])


def test_momentum_fixpoint():
    # Batches centered on M0 with a spread of sigma leave the stats where they are
    for m in (0.0, 0.5, 0.9, 0.99):
        stats = RunningStats.from_dict(dict(M0=-1.0, sigma=0.5, m=m, initialized=True))
        for _ in range(50):
            stats = update_stats(stats, [-1.5, -0.5])

        assert stats.M0 == pytest.approx(-1.0, abs=1e-12)
        assert stats.sigma == pytest.approx(0.5, abs=1e-12)

    # Same with constant batches, sigma stays at its floor
    stats = RunningStats.from_dict(dict(M0=3.0, sigma=SIGMA_MIN, initialized=True))
    for _ in range(50):
        stats = update_stats(stats, [3.0, 3.0, 3.0])

    assert stats.M0 == pytest.approx(3.0, abs=1e-12)
    assert stats.sigma == SIGMA_MIN


def test_effective_beta():
    cfg = BetaConfig()
    stats = stats_from([-1.0, 1.0])
    assert stats.M0 == 0
    beta, per_instance = effective_beta(cfg, stats, [1.0])
    assert beta == 0.1 * 1.6
    assert per_instance is None
    assert clamp_count(cfg, stats, [1.0]) == 0

    # Mean of designated values is what matters in batch mode
    assert effective_beta(cfg, stats, [0.5, 1.5])[0] == pytest.approx(0.16)

    # Factor clamped at factor_min
    beta, _ = effective_beta(cfg, stats, [-5.0])
    assert beta == pytest.approx(0.01)
    assert clamp_count(cfg, stats, [-5.0]) == 1
    assert clamp_count(cfg, stats, [-5.0, -6.0]) == 1

    with pytest.raises(InvalidInput):
        effective_beta(cfg, stats, [])

    flat = BetaConfig.from_dict(dict(alpha=0.0))
    assert effective_beta(flat, stats, [123.0])[0] == 0.1


def test_modes():
    stats = stats_from([-1.0, 1.0])
    population = BetaConfig.from_dict(dict(mode="population", beta0=0.2))
    assert effective_beta(population, stats, [9.0, -9.0]) == (0.2, None)
    assert clamp_count(population, stats, [-90.0]) == 0

    instance = BetaConfig.from_dict(dict(mode="instance"))
    beta, betas = effective_beta(instance, stats, [1.0, -1.0, -5.0])
    assert betas == pytest.approx([0.16, 0.04, 0.01])
    assert beta == pytest.approx(0.07)
    assert clamp_count(instance, stats, [1.0, -2.0, -5.0]) == 2
    assert beta_factors(instance, [0.0, 1.0], 1.0).tolist() == pytest.approx([0.4, 1.0])


def test_fixed_center():
    cfg = BetaConfig.from_dict(dict(fixed_M0=1.0))
    fresh = RunningStats.fresh()
    assert reference_M0(cfg, fresh) == 1.0
    assert effective_beta(cfg, fresh, [1.0])[0] == pytest.approx(0.1)
    assert effective_beta(cfg, stats_from([5.0]), [2.0])[0] == pytest.approx(0.16)

    with pytest.raises(StateError, match="not initialized"):
        reference_M0(BetaConfig(), fresh)

    with pytest.raises(StateError):
        effective_beta(BetaConfig(), fresh, [1.0])
