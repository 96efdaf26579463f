"""
Evaluation against the ground-truth reward: win rates of a policy over a baseline, implicit discrepancy
histograms, and dataset statistics.
"""

import logging

import numpy as np
import runez

from betalab.core import CapacityError, HIGH_GAP, InvalidInput, LOW_GAP
from betalab.policy import enumeration_budget, sample_many, sequence_log_probs, tempered
from betalab.reward import implicit_discrepancy, sequence_rewards, true_reward

LOG = logging.getLogger(__name__)
EXACT = "exact"
SEPARATE = "separate"
SPLIT = "split"
DEFAULT_MC_SAMPLES = 100000


def mc_samples():
    """Number of samples per prompt used when exact enumeration is not possible"""
    return runez.config.get_int("betalab.mc_samples", default=DEFAULT_MC_SAMPLES)


class WinRateResult(runez.Slotted):
    """Win rate of a policy against a baseline, as judged by the ground-truth reward"""

    __slots__ = ["win_rate", "tie_rate", "per_prompt", "per_prompt_ties", "method"]

    def __repr__(self):
        return "win %.4f, tie %.4f (%s)" % (self.win_rate, self.tie_rate, self.method)

    def split_ties(self):
        """Same result, with half of the ties counted as wins"""
        per_prompt = [w + t / 2 for w, t in zip(self.per_prompt, self.per_prompt_ties)]
        return WinRateResult(
            win_rate=self.win_rate + self.tie_rate / 2,
            tie_rate=self.tie_rate,
            per_prompt=per_prompt,
            per_prompt_ties=self.per_prompt_ties,
            method=self.method,
        )

    def to_dict(self):
        return dict(win_rate=self.win_rate, tie_rate=self.tie_rate, per_prompt=self.per_prompt, method=self.method)


class DiscrepancyHistogram(runez.Slotted):

    __slots__ = ["bin_edges", "counts", "mean", "std", "p05", "p95"]

    def __repr__(self):
        return "%s samples, mean %.4g, std %.4g" % (sum(self.counts), self.mean, self.std)

    def rows(self):
        """(bin_lo, bin_hi, count) for each bin"""
        return [(self.bin_edges[i], self.bin_edges[i + 1], c) for i, c in enumerate(self.counts)]


def duel(p, rewards_p, q, rewards_q):
    """
    Args:
        p (np.ndarray): Probabilities of the contender's responses
        rewards_p (np.ndarray): Reward of each contender response
        q (np.ndarray): Probabilities of the baseline's responses
        rewards_q (np.ndarray): Reward of each baseline response

    Returns:
        (float, float): Probability that contender's reward is strictly higher, probability of a tie
    """
    levels, inverse = np.unique(rewards_q, return_inverse=True)
    mass = np.bincount(inverse.reshape(-1), weights=q, minlength=levels.size)
    below = np.concatenate([[0.0], np.cumsum(mass)])
    position = np.searchsorted(levels, rewards_p, side="left")
    clipped = np.minimum(position, levels.size - 1)
    tied = np.where((position < levels.size) & (levels[clipped] == rewards_p), mass[clipped], 0.0)
    return float(np.dot(p, below[position])), float(np.dot(p, tied))


def _result(wins, ties, method, ties_mode):
    result = WinRateResult(
        win_rate=float(np.mean(wins)),
        tie_rate=float(np.mean(ties)),
        per_prompt=[float(w) for w in wins],
        per_prompt_ties=[float(t) for t in ties],
        method=method,
    )
    if ties_mode == SPLIT:
        result = result.split_ties()

    return result


def exact_win_rate(policy, baseline, gt, ties=SEPARATE, budget=None):
    """
    Args:
        policy (betalab.policy.PolicyParams): Contender
        baseline (betalab.policy.PolicyParams): Baseline (typically the SFT reference)
        gt (betalab.reward.GroundTruthReward): Judge
        ties (str): 'separate' (default) or 'split' (half of ties counted as wins)
        budget (int | None): Max sequences per prompt to enumerate (default: configured 'betalab.enumeration_budget')

    Returns:
        (WinRateResult): Exact win rate, prompts weighted uniformly (Monte-Carlo estimate if budget is exceeded)
    """
    if policy.shape != baseline.shape or policy.shape != gt.shape:
        raise InvalidInput("shapes differ: %s, %s, %s" % (policy.shape, baseline.shape, gt.shape))

    budget = enumeration_budget() if budget is None else budget
    try:
        gt.shape.check_enumerable(budget)

    except CapacityError as e:
        n = mc_samples()
        LOG.warning("%s, falling back to Monte-Carlo with %s samples per prompt", e, n)
        return monte_carlo_win_rate(policy, baseline, gt, n, np.random.default_rng(0), ties=ties)

    wins = []
    ties_rates = []
    for x in range(gt.shape.P):
        rewards = sequence_rewards(gt, x)
        p = np.exp(sequence_log_probs(policy, x, budget=budget))
        q = np.exp(sequence_log_probs(baseline, x, budget=budget))
        w, t = duel(p, rewards, q, rewards)
        wins.append(w)
        ties_rates.append(t)

    return _result(wins, ties_rates, EXACT, ties)


def _sampled_rewards(params, gt, x, n, rng):
    tokens = sample_many(params, x, n, rng)
    return np.sum(gt.weights[x, np.arange(gt.shape.T), tokens], axis=-1)


def monte_carlo_win_rate(policy, baseline, gt, n, rng, ties=SEPARATE):
    """
    Args:
        policy (betalab.policy.PolicyParams): Contender
        baseline (betalab.policy.PolicyParams): Baseline
        gt (betalab.reward.GroundTruthReward): Judge
        n (int): Number of sampled duels per prompt
        rng (np.random.Generator): Source of randomness
        ties (str): 'separate' or 'split'

    Returns:
        (WinRateResult): Win rate estimated from 'n' independent duels per prompt
    """
    if n < 1:
        raise InvalidInput("need at least 1 sample, got %s" % n)

    wins = []
    ties_rates = []
    for x in range(gt.shape.P):
        mine = _sampled_rewards(policy, gt, x, n, rng)
        theirs = _sampled_rewards(baseline, gt, x, n, rng)
        wins.append(float(np.mean(mine > theirs)))
        ties_rates.append(float(np.mean(mine == theirs)))

    return _result(wins, ties_rates, "monte_carlo(%s)" % n, ties)


def empirical_win_rate(policy, dataset, gt, ties=SEPARATE, budget=None):
    """
    Args:
        policy (betalab.policy.PolicyParams): Contender
        dataset (betalab.core.PreferenceDataset): Dataset whose chosen responses form the baseline
        gt (betalab.reward.GroundTruthReward): Judge
        ties (str): 'separate' or 'split'
        budget (int | None): Max sequences per prompt to enumerate

    Returns:
        (WinRateResult): Win rate against the empirical distribution of chosen responses, over prompts present in 'dataset'
            (policy responses are sampled if budget is exceeded)
    """
    groups = dataset.by_prompt()
    if not groups:
        raise InvalidInput("can't compare against an empty dataset")

    budget = enumeration_budget() if budget is None else budget
    n = rng = None
    method = "chosen_empirical"
    try:
        gt.shape.check_enumerable(budget)

    except CapacityError as e:
        n = mc_samples()
        LOG.warning("%s, falling back to Monte-Carlo with %s samples per prompt", e, n)
        rng = np.random.default_rng(0)
        method = "chosen_empirical_monte_carlo(%s)" % n

    wins = []
    ties_rates = []
    for x in sorted(groups):
        if rng is None:
            rewards = sequence_rewards(gt, x)
            p = np.exp(sequence_log_probs(policy, x, budget=budget))

        else:
            rewards = _sampled_rewards(policy, gt, x, n, rng)
            p = np.full(n, 1.0 / n)

        chosen = np.array([true_reward(gt, x, dataset[i].chosen) for i in groups[x]])
        q = np.full(chosen.size, 1.0 / chosen.size)
        w, t = duel(p, rewards, q, chosen)
        wins.append(w)
        ties_rates.append(t)

    return _result(wins, ties_rates, method, ties)


def temperature_sweep(policy, baseline, gt, temperatures, ties=SEPARATE):
    """
    Args:
        policy (betalab.policy.PolicyParams): Contender, evaluated at each sampling temperature
        baseline (betalab.policy.PolicyParams): Baseline, always at temperature 1
        gt (betalab.reward.GroundTruthReward): Judge
        temperatures (Iterable[float]): Temperatures to evaluate, 0 means greedy
        ties (str): 'separate' or 'split'

    Returns:
        (list[tuple[float, WinRateResult]]): Win rate at each temperature
    """
    return [(t, exact_win_rate(tempered(policy, t), baseline, gt, ties=ties)) for t in temperatures]


def discrepancy_histogram(theta, ref, dataset, beta0, bins=20):
    """
    Args:
        theta (betalab.policy.PolicyParams): Policy
        ref (betalab.policy.PolicyParams): Reference
        dataset (betalab.core.PreferenceDataset): Triplets to measure
        beta0 (float): Scale of the implicit discrepancy
        bins (int): Number of equal-width bins

    Returns:
        (DiscrepancyHistogram): Distribution of implicit discrepancies over 'dataset'
    """
    if not len(dataset):
        raise InvalidInput("can't compute histogram of an empty dataset")

    if bins < 1:
        raise InvalidInput("bins must be >= 1, got %s" % bins)

    values = np.array([implicit_discrepancy(theta, ref, t, beta0, index=i) for i, t in enumerate(dataset)])
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5

    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return DiscrepancyHistogram(
        bin_edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        p05=float(np.percentile(values, 5)),
        p95=float(np.percentile(values, 95)),
    )


def write_histogram_csv(histogram, path, logger=False):
    lines = ["bin_lo,bin_hi,count"]
    lines.extend("%r,%r,%s" % row for row in histogram.rows())
    return runez.write(path, "%s\n" % "\n".join(lines), logger=logger)


def dataset_statistics(dataset):
    """
    Returns:
        (dict): Size, high-gap and flipped fractions, mean and std of the true reward gap per gap class
    """
    result = dict(size=len(dataset), high_gap_fraction=0.0, flip_fraction=0.0)
    with_meta = [t for t in dataset if t.meta is not None]
    if with_meta:
        result["high_gap_fraction"] = sum(t.meta.gap_class == HIGH_GAP for t in with_meta) / len(with_meta)
        result["flip_fraction"] = sum(t.meta.label_flipped for t in with_meta) / len(with_meta)

    for gap_class in (LOW_GAP, HIGH_GAP):
        gaps = np.array([t.meta.reward_gap for t in with_meta if t.meta.gap_class == gap_class])
        result["%s_count" % gap_class] = int(gaps.size)
        result["%s_gap_mean" % gap_class] = float(np.mean(gaps)) if gaps.size else None
        result["%s_gap_std" % gap_class] = float(np.std(gaps)) if gaps.size else None
        result["%s_abs_gap_mean" % gap_class] = float(np.mean(np.abs(gaps))) if gaps.size else None

    return result
