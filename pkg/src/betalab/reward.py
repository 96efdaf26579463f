"""
Ground-truth reward and the three ways of measuring reward discrepancy of a triplet:

- implicit: reward implied by policy vs reference log-ratios, scaled by beta0
- explicit: externally supplied scores, keyed by dataset index
- oracle: ground-truth rewards recorded by the generator
"""

import json
import logging

import numpy as np
import runez
from runez.system import UNSET

from betalab.core import canonical_json, InvalidInput, LookupFailure, NumericError, read_json
from betalab.policy import all_sequences, log_prob, tensor_dict, tensor_from_dict

LOG = logging.getLogger(__name__)
IMPLICIT = "implicit"
EXPLICIT = "explicit"
ORACLE = "oracle"


class GroundTruthReward:
    """Additive per-(prompt, position, token) reward weights, shape (P, T, V)"""

    __slots__ = ["shape", "weights"]

    def __init__(self, shape, weights):
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != shape.validated().dims:
            raise InvalidInput("weights have shape %s, expected %s" % (weights.shape, shape.dims))

        if not np.all(np.isfinite(weights)):
            raise InvalidInput("weights contain non-finite values")

        self.shape = shape
        self.weights = weights

    def __repr__(self):
        return "ground truth %s" % self.shape

    def __eq__(self, other):
        return isinstance(other, GroundTruthReward) and self.shape == other.shape and np.array_equal(self.weights, other.weights)

    def to_dict(self):
        return tensor_dict(self.shape, "weights", self.weights)

    @classmethod
    def from_dict(cls, data):
        shape, weights = tensor_from_dict(data, "weights")
        return cls(shape, weights)


def true_reward(gt, prompt_id, response):
    """
    Returns:
        (float): r*(prompt_id, response), sum of per-position token weights
    """
    gt.shape.check_prompt(prompt_id)
    gt.shape.check_response(response)
    tokens = np.asarray(response, dtype=np.intp)
    return float(np.sum(gt.weights[prompt_id, np.arange(gt.shape.T), tokens]))


def sequence_rewards(gt, prompt_id):
    """
    Returns:
        (np.ndarray): r* of every response from all_sequences(), in the same order
    """
    gt.shape.check_prompt(prompt_id)
    sequences = all_sequences(gt.shape.T, gt.shape.V)
    return np.sum(gt.weights[prompt_id, np.arange(gt.shape.T), sequences], axis=-1)


def log_ratio_margin(theta, ref, triplet):
    """
    Returns:
        (float): h = [log pi(y_w) - log ref(y_w)] - [log pi(y_l) - log ref(y_l)]
    """
    x = triplet.prompt_id
    chosen = log_prob(theta, x, triplet.chosen) - log_prob(ref, x, triplet.chosen)
    rejected = log_prob(theta, x, triplet.rejected) - log_prob(ref, x, triplet.rejected)
    return chosen - rejected


def implicit_discrepancy(theta, ref, triplet, beta0, index=None):
    """
    Args:
        theta (betalab.policy.PolicyParams): Policy being trained
        ref (betalab.policy.PolicyParams): Frozen reference policy
        triplet (betalab.core.Triplet): Triplet to measure
        beta0 (float): Base beta, scales the log-ratio margin
        index (int | None): Position of 'triplet' in its dataset, for error reporting

    Returns:
        (float): beta0 * h, positive when the policy already prefers chosen more than the reference does
    """
    if beta0 <= 0:
        raise InvalidInput("beta0 must be > 0, got %s" % beta0)

    value = beta0 * log_ratio_margin(theta, ref, triplet)
    if not np.isfinite(value):
        raise NumericError("non-finite implicit discrepancy for triplet %s" % ("?" if index is None else index))

    return value


def oracle_discrepancy(triplet):
    """Ground-truth reward gap recorded by the generator, r*(chosen) - r*(rejected)"""
    if triplet.meta is None:
        raise InvalidInput("triplet %s has no generator meta, oracle discrepancy unavailable" % triplet)

    return triplet.meta.reward_gap


class ExplicitScores:
    """Externally supplied (score_chosen, score_rejected) pairs, keyed by triplet index in its dataset"""

    def __init__(self, scores=None, scale=1.0):
        """
        Args:
            scores (dict[int, tuple[float, float]] | None): Scores per triplet index
            scale (float): Multiplier applied to score differences
        """
        self.scores = {}
        self.scale = scale
        for index, pair in (scores or {}).items():
            self.add(index, *pair)

    def __repr__(self):
        return "%s explicit scores" % len(self.scores)

    def __len__(self):
        return len(self.scores)

    def __contains__(self, index):
        return index in self.scores

    def __eq__(self, other):
        return isinstance(other, ExplicitScores) and self.scale == other.scale and self.scores == other.scores

    def add(self, index, score_chosen, score_rejected):
        if not np.isfinite(score_chosen) or not np.isfinite(score_rejected):
            raise InvalidInput("non-finite score for triplet %s" % index)

        self.scores[int(index)] = (float(score_chosen), float(score_rejected))


def explicit_discrepancy(scores, index):
    """
    Args:
        scores (ExplicitScores): Supplied scores
        index (int): Triplet index

    Returns:
        (float): score_chosen - score_rejected (times the configured scale)
    """
    pair = scores.scores.get(index)
    if pair is None:
        raise LookupFailure("no explicit score for triplet %s" % index)

    value = pair[0] - pair[1]
    if scores.scale != 1:
        value = scores.scale * value

    return value


def write_scores(scores, path, logger=UNSET, dryrun=UNSET):
    """Save explicit scores as jsonl, one {"index", "score_chosen", "score_rejected"} object per line"""
    lines = [canonical_json(dict(index=i, score_chosen=c, score_rejected=r)) for i, (c, r) in sorted(scores.scores.items())]
    return runez.write(path, "%s\n" % "\n".join(lines), logger=logger, dryrun=dryrun)


def read_scores(path, scale=1.0):
    """
    Args:
        path (str | Path): File written by write_scores()
        scale (float): Multiplier applied to score differences

    Returns:
        (ExplicitScores): Loaded scores
    """
    scores = ExplicitScores(scale=scale)
    for line_number, line in enumerate(runez.readlines(path, fatal=InvalidInput), start=1):
        if line.strip():
            try:
                data = json.loads(line)
                scores.add(data["index"], data["score_chosen"], data["score_rejected"])

            except (KeyError, TypeError, ValueError) as e:
                raise InvalidInput("%s line %s: invalid score record (%s)" % (runez.short(path), line_number, e))

    return scores


class DiscrepancySource:
    """Computes reward discrepancies M for a batch of triplets"""

    name = None  # type: str

    def __repr__(self):
        return self.name

    def discrepancies(self, theta, ref, batch, indices=None):
        """
        Args:
            theta (betalab.policy.PolicyParams): Policy being trained
            ref (betalab.policy.PolicyParams): Frozen reference
            batch (list[betalab.core.Triplet]): Triplets
            indices (list[int] | None): Dataset index of each triplet (required by the explicit source)

        Returns:
            (np.ndarray): One discrepancy per triplet, float64
        """
        if indices is None:
            indices = [None] * len(batch)

        if len(indices) != len(batch):
            raise InvalidInput("got %s indices for a batch of %s" % (len(indices), len(batch)))

        values = np.array([self.discrepancy(theta, ref, t, i) for t, i in zip(batch, indices)], dtype=np.float64)
        return values

    def discrepancy(self, theta, ref, triplet, index):
        raise NotImplementedError


class ImplicitSource(DiscrepancySource):

    name = IMPLICIT

    def __init__(self, beta0):
        self.beta0 = beta0

    def discrepancy(self, theta, ref, triplet, index):
        return implicit_discrepancy(theta, ref, triplet, self.beta0, index=index)


class ExplicitSource(DiscrepancySource):

    name = EXPLICIT

    def __init__(self, scores):
        self.scores = scores

    def discrepancy(self, theta, ref, triplet, index):
        if index is None:
            raise InvalidInput("explicit discrepancies need dataset indices")

        return explicit_discrepancy(self.scores, index)


class OracleSource(DiscrepancySource):

    name = ORACLE

    def discrepancy(self, theta, ref, triplet, index):
        return oracle_discrepancy(triplet)


def discrepancy_source(beta_cfg, scores=None):
    """
    Args:
        beta_cfg (betalab.calibration.BetaConfig): Config, its 'source' field picks the implementation
        scores (ExplicitScores | None): Pre-loaded explicit scores (default: read from 'beta_cfg.scores_path')

    Returns:
        (DiscrepancySource): Source to use during training
    """
    if beta_cfg.source == EXPLICIT:
        if scores is None:
            if not beta_cfg.scores_path:
                raise InvalidInput("source 'explicit' requires 'scores_path'")

            scores = read_scores(beta_cfg.scores_path, scale=beta_cfg.explicit_scale)

        return ExplicitSource(scores)

    if beta_cfg.source == ORACLE:
        return OracleSource()

    return ImplicitSource(beta_cfg.beta0)


def save_ground_truth(gt, path, logger=UNSET):
    return runez.save_json(gt.to_dict(), path, logger=logger)


def load_ground_truth(path):
    return GroundTruthReward.from_dict(read_json(path))
