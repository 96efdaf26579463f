"""
Dynamic beta calibration: beta follows how far the current reward discrepancies sit from their running mean.

Running statistics are momentum averages of per-batch mean and (population) std of the discrepancies,
bootstrapped from the first batch seen.

>>> cfg = BetaConfig()
>>> stats = update_stats(RunningStats(), [0.0, 0.0])
>>> effective_beta(cfg, stats, [1.0])[0] == 0.1 * (1 + 0.6 * 1)
True
"""

import logging

import numpy as np
import runez
from runez.schema import Boolean, Enum, Float, String, ValidationException

from betalab.core import InvalidInput, StateError

LOG = logging.getLogger(__name__)
SIGMA_MIN = 1e-6
POPULATION = "population"
INSTANCE = "instance"
BATCH = "batch"


class BetaConfig(runez.Serializable, runez.serialize.with_behavior(strict=True, extras=ValidationException)):
    """How beta is calibrated, and how batches are filtered"""

    beta0 = Float(default=0.1)
    alpha = Float(default=0.6)
    mode = Enum("population instance batch", default=BATCH)
    m = Float(default=0.9)
    rho = Float(default=0.8)
    factor_min = Float(default=0.1)
    fixed_M0 = Float()
    beta_on = Enum("filtered full", default="filtered")
    strategy = Enum("gaussian head tail tail_head none", default="gaussian")
    exclusion = Float(default=0.2)
    rank_on = Enum("margin_grad param_grad_norm", default="margin_grad")
    source = Enum("implicit explicit oracle", default="implicit")
    scores_path = String()
    explicit_scale = Float(default=1.0)

    def problem(self):
        """
        Returns:
            (str | None): Explanation of why this config can't be used, if applicable
        """
        if not self.beta0 > 0:
            return "beta0 must be > 0, got %s" % self.beta0

        if not 0 <= self.alpha <= 2:
            return "alpha must be in [0, 2], got %s" % self.alpha

        if not 0 <= self.m < 1:
            return "m must be in [0, 1), got %s" % self.m

        if not 0 < self.rho <= 1:
            return "rho must be in (0, 1], got %s" % self.rho

        if not self.factor_min > 0:
            return "factor_min must be > 0, got %s" % self.factor_min

        if not 0 <= self.exclusion < 1:
            return "exclusion must be in [0, 1), got %s" % self.exclusion

        if self.fixed_M0 is not None and not np.isfinite(self.fixed_M0):
            return "fixed_M0 must be finite, got %s" % self.fixed_M0

    def validated(self):
        problem = self.problem()
        if problem:
            raise InvalidInput(problem)

        return self


class RunningStats(runez.Serializable, runez.serialize.with_behavior(strict=True, extras=ValidationException)):
    """Momentum averages of batch discrepancy mean (M0) and std (sigma)"""

    M0 = Float(default=0.0)
    sigma = Float(default=SIGMA_MIN)
    m = Float(default=0.9)
    initialized = Boolean(default=False)

    def __repr__(self):
        if not self.initialized:
            return "uninitialized stats"

        return "M0=%.4g sigma=%.4g" % (self.M0, self.sigma)

    @classmethod
    def fresh(cls, m=0.9):
        """Uninitialized stats with momentum 'm'"""
        return cls.from_dict(dict(m=m))


def _checked_values(values, what="batch"):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise InvalidInput("empty %s" % what)

    if not np.all(np.isfinite(values)):
        raise InvalidInput("%s contains non-finite discrepancies" % what)

    return values


def update_stats(stats, batch_M):
    """
    Args:
        stats (RunningStats): Current stats (not modified)
        batch_M (Sequence[float]): Discrepancies of the full batch

    Returns:
        (RunningStats): Updated stats, first update copies batch mean and std verbatim
    """
    values = _checked_values(batch_M)
    mean = float(np.mean(values))
    std = float(np.std(values))
    if stats.initialized:
        m = stats.m
        mean = m * stats.M0 + (1 - m) * mean
        std = m * stats.sigma + (1 - m) * std

    return RunningStats.from_dict(dict(M0=mean, sigma=max(std, SIGMA_MIN), m=stats.m, initialized=True))


def reference_M0(cfg, stats):
    """
    Returns:
        (float): Center used for beta and filtering, 'cfg.fixed_M0' when set, running M0 otherwise
    """
    if cfg.fixed_M0 is not None:
        return cfg.fixed_M0

    if not stats.initialized:
        raise StateError("running stats are not initialized, and no fixed M0 configured")

    return stats.M0


def beta_factors(cfg, values, M0):
    """
    Args:
        cfg (BetaConfig): Config
        values (np.ndarray): Discrepancies
        M0 (float): Center

    Returns:
        (np.ndarray): max(factor_min, 1 + alpha * (M - M0)) for each value
    """
    return np.maximum(cfg.factor_min, 1 + cfg.alpha * (np.asarray(values, dtype=np.float64) - M0))


def effective_beta(cfg, stats, batch_M):
    """
    Args:
        cfg (BetaConfig): Config
        stats (RunningStats): Stats after this batch's update
        batch_M (Sequence[float]): Discrepancies beta should be computed from (designated set)

    Returns:
        (float, list[float] | None): Batch beta, and per-instance betas in 'instance' mode
    """
    M0 = reference_M0(cfg, stats)
    values = _checked_values(batch_M)
    if cfg.mode == POPULATION:
        return cfg.beta0, None

    if cfg.mode == INSTANCE:
        betas = beta_factors(cfg, values, M0) * cfg.beta0
        return float(np.mean(betas)), [float(b) for b in betas]

    factor = max(cfg.factor_min, 1 + cfg.alpha * (float(np.mean(values)) - M0))
    return factor * cfg.beta0, None


def clamp_count(cfg, stats, batch_M):
    """
    Returns:
        (int): How many beta factors hit 'factor_min' for 'batch_M' (at most 1 in batch mode)
    """
    if cfg.mode == POPULATION:
        return 0

    M0 = reference_M0(cfg, stats)
    values = _checked_values(batch_M)
    if cfg.mode == BATCH:
        values = np.array([np.mean(values)])

    clamped = int(np.sum(1 + cfg.alpha * (values - M0) < cfg.factor_min))
    if clamped:
        LOG.debug("beta factor clamped at %s for %s value(s)", cfg.factor_min, clamped)

    return clamped
