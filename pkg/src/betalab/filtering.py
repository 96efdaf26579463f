"""
Batch filtering: keep a weighted random subset of a batch (gaussian weights centered on the running mean
discrepancy), or drop a fixed fraction of samples ranked by gradient magnitude.

>>> select_rank([10, 9, 8, 7, 6, 5, 4, 3, 2, 1], HEAD).kept_indices
[2, 3, 4, 5, 6, 7, 8, 9]
"""

import logging
import math

import numpy as np
import runez

from betalab.core import InvalidInput, round_half_up

LOG = logging.getLogger(__name__)
GAUSSIAN = "gaussian"
HEAD = "head"
TAIL = "tail"
TAIL_HEAD = "tail_head"
NONE = "none"
RANK_STRATEGIES = (HEAD, TAIL, TAIL_HEAD)
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class FilterOutcome(runez.Slotted):
    """Which samples of a batch were kept, and the weights (or ranking scores) that decided it"""

    __slots__ = ["kept_indices", "weights", "strategy", "fallback"]

    def __repr__(self):
        return "%s: kept %s of %s" % (self.strategy, len(self.kept_indices), len(self.weights))


def gaussian_weight(M, M0, sigma):
    """
    >>> round(gaussian_weight(0.0, 0.0, 1.0), 6)
    0.398942

    Args:
        M (float): Discrepancy
        M0 (float): Center
        sigma (float): Spread

    Returns:
        (float): Normal density of M, centered on M0 with std sigma
    """
    z = (M - M0) / sigma
    return math.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * sigma)


def gaussian_log_weights(values, M0, sigma):
    """Log of gaussian_weight() for each value, stays finite far in the tails"""
    z = (np.asarray(values, dtype=np.float64) - M0) / sigma
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(sigma)


def keep_count(n, rho):
    """
    Returns:
        (int): Number of samples to keep out of 'n', max(1, round(rho * n))
    """
    return min(n, max(1, round_half_up(rho * n)))


def keep_all(n, strategy=NONE):
    return FilterOutcome(kept_indices=list(range(n)), weights=[1.0] * n, strategy=strategy, fallback=False)


def select_gaussian(batch_M, stats, rho, rng, center=None):
    """
    Args:
        batch_M (Sequence[float]): Discrepancies of the batch
        stats (betalab.calibration.RunningStats): Running stats, provide center and spread
        rho (float): Fraction of the batch to keep
        rng (np.random.Generator): Source of randomness, consumed only when something gets filtered out
        center (float | None): Override for the center (default: stats.M0)

    Returns:
        (FilterOutcome): max(1, round(rho * n)) distinct sorted indices, sampled without replacement
    """
    values = np.asarray(batch_M, dtype=np.float64).reshape(-1)
    n = values.size
    if n == 0:
        raise InvalidInput("can't filter an empty batch")

    if not 0 < rho <= 1:
        raise InvalidInput("rho must be in (0, 1], got %s" % rho)

    M0 = stats.M0 if center is None else center
    log_weights = gaussian_log_weights(values, M0, stats.sigma)
    weights = [float(w) for w in np.exp(log_weights)]
    k = keep_count(n, rho)
    if k >= n:
        return FilterOutcome(kept_indices=list(range(n)), weights=weights, strategy=GAUSSIAN, fallback=False)

    fallback = not any(weights)
    if fallback:
        LOG.warning("All %s gaussian weights underflowed to 0 (M0=%.4g sigma=%.4g), sampling uniformly", n, M0, stats.sigma)
        log_weights = np.zeros(n)

    # Exponential keys: smallest E_i / w_i wins, same as successive weighted draws without replacement
    with np.errstate(divide="ignore"):
        keys = np.log(rng.standard_exponential(n)) - log_weights

    kept = np.sort(np.argsort(keys, kind="stable")[:k])
    return FilterOutcome(kept_indices=[int(i) for i in kept], weights=weights, strategy=GAUSSIAN, fallback=fallback)


def rank_order(scores):
    """Indices sorted by descending score, ties broken by lower index first"""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def select_rank(batch_grad_norms, strategy, exclusion=0.2):
    """
    Args:
        batch_grad_norms (Sequence[float]): Per-sample gradient magnitude
        strategy (str): One of 'head' (drop largest), 'tail' (drop smallest) or 'tail_head' (drop both ends)
        exclusion (float): Fraction of the batch to drop

    Returns:
        (FilterOutcome): Sorted indices of samples that survived
    """
    scores = [float(v) for v in batch_grad_norms]
    n = len(scores)
    if n == 0:
        raise InvalidInput("can't filter an empty batch")

    if strategy not in RANK_STRATEGIES:
        raise InvalidInput("unknown rank strategy '%s'" % strategy)

    removed_count = min(n - 1, round_half_up(exclusion * n))
    order = rank_order(scores)
    if strategy == HEAD:
        removed = order[:removed_count]

    elif strategy == TAIL:
        removed = order[n - removed_count:]

    else:
        head = min(removed_count, round_half_up(exclusion / 2 * n))
        removed = np.concatenate([order[:head], order[n - (removed_count - head):]])

    removed = set(int(i) for i in removed)
    kept = [i for i in range(n) if i not in removed]
    return FilterOutcome(kept_indices=kept, weights=scores, strategy=strategy, fallback=False)
