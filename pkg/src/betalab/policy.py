"""
Toy autoregressive policy: an independent softmax per (prompt, position), over V tokens.

Probability of a response factorizes over positions, which makes log-probabilities and their
gradients available in closed form, and full enumeration of the response space possible.
"""

import functools
import hashlib
import itertools
import logging

import numpy as np
import runez
from runez.system import UNSET

from betalab.core import InvalidInput, ModelShape, NumericError, read_json, response_seq

LOG = logging.getLogger(__name__)
LOGIT_FLOOR = -1e4  # Finite stand-in for log(0), exp() of it underflows to exactly 0
DEFAULT_ENUMERATION_BUDGET = 1 << 20


def enumeration_budget():
    """Max number of sequences per prompt we're willing to enumerate exhaustively"""
    return runez.config.get_int("betalab.enumeration_budget", default=DEFAULT_ENUMERATION_BUDGET)


def log_softmax(logits, axis=-1):
    """Numerically stable log-softmax along 'axis'"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def tensor_dict(shape, key, tensor):
    """Json-friendly representation of a (P, T, V) tensor, flattened row-major under 'key'"""
    result = shape.to_dict()
    result[key] = [float(v) for v in tensor.reshape(-1)]
    return result


def tensor_from_dict(data, key):
    """
    Returns:
        (ModelShape, np.ndarray): Shape and tensor saved by tensor_dict()
    """
    try:
        shape = ModelShape.from_dict(data).validated()
        values = np.array(data[key], dtype=np.float64)

    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInput("not a saved '%s' tensor: %s" % (key, e))

    if values.size != shape.P * shape.T * shape.V:
        raise InvalidInput("'%s' has %s values, expected %s for %s" % (key, values.size, shape.P * shape.T * shape.V, shape))

    return shape, values.reshape(shape.dims)


class PolicyParams:
    """Logits tensor of shape (P, T, V), float64, all entries finite"""

    __slots__ = ["shape", "logits"]

    def __init__(self, shape, logits=None):
        """
        Args:
            shape (ModelShape): Dimensions of the model
            logits (np.ndarray | list | None): Logits, default: all zeros (uniform policy)
        """
        shape.validated()
        if logits is None:
            logits = np.zeros(shape.dims, dtype=np.float64)

        else:
            logits = np.array(logits, dtype=np.float64)

        if logits.shape != shape.dims:
            raise InvalidInput("logits have shape %s, expected %s" % (logits.shape, shape.dims))

        if not np.all(np.isfinite(logits)):
            raise NumericError("logits contain non-finite values")

        self.shape = shape
        self.logits = logits

    def __repr__(self):
        return "policy %s" % self.shape

    def __eq__(self, other):
        return isinstance(other, PolicyParams) and self.shape == other.shape and np.array_equal(self.logits, other.logits)

    @classmethod
    def uniform(cls, shape):
        return cls(shape)

    def copy(self):
        return PolicyParams(self.shape, self.logits.copy())

    def with_logits(self, logits):
        return PolicyParams(self.shape, logits)

    def probabilities(self, prompt_id):
        """
        Returns:
            (np.ndarray): Token distributions for 'prompt_id', shape (T, V)
        """
        self.shape.check_prompt(prompt_id)
        return softmax(self.logits[prompt_id])

    def to_dict(self):
        return tensor_dict(self.shape, "logits", self.logits)

    @classmethod
    def from_dict(cls, data):
        shape, logits = tensor_from_dict(data, "logits")
        return cls(shape, logits)


def _checked_tokens(params, prompt_id, response):
    params.shape.check_prompt(prompt_id)
    params.shape.check_response(response)
    return np.asarray(response, dtype=np.intp)


def log_prob(params, prompt_id, response):
    """
    Args:
        params (PolicyParams): Policy
        prompt_id (int): Prompt
        response (Sequence[int]): Response of length T

    Returns:
        (float): log pi(response | prompt_id)
    """
    tokens = _checked_tokens(params, prompt_id, response)
    row = log_softmax(params.logits[prompt_id])
    return float(np.sum(row[np.arange(params.shape.T), tokens]))


def grad_log_prob(params, prompt_id, response):
    """
    Returns:
        (np.ndarray): d log pi(response | prompt_id) / d logits, shape (P, T, V), zero outside row 'prompt_id'
    """
    tokens = _checked_tokens(params, prompt_id, response)
    grad = np.zeros(params.shape.dims, dtype=np.float64)
    grad[prompt_id] = -softmax(params.logits[prompt_id])
    grad[prompt_id, np.arange(params.shape.T), tokens] += 1.0
    return grad


def sample(params, prompt_id, rng):
    """
    Args:
        params (PolicyParams): Policy to sample from
        prompt_id (int): Prompt
        rng (np.random.Generator): Source of randomness

    Returns:
        (tuple[int]): Response drawn from params at 'prompt_id', one token per position
    """
    return response_seq(sample_many(params, prompt_id, 1, rng)[0])


def sample_many(params, prompt_id, count, rng):
    """
    Returns:
        (np.ndarray): 'count' responses drawn independently, int array of shape (count, T)
    """
    probs = params.probabilities(prompt_id)
    cumulative = np.cumsum(probs, axis=-1)
    u = rng.random((count, params.shape.T))
    tokens = np.sum(cumulative[np.newaxis, :, :] < u[:, :, np.newaxis], axis=-1)
    return np.minimum(tokens, params.shape.V - 1)


@functools.lru_cache(maxsize=8)
def all_sequences(T, V):
    """
    Returns:
        (np.ndarray): All V**T responses in lexicographic order, int array of shape (V**T, T)
    """
    result = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.intp).reshape(-1, T)
    result.flags.writeable = False
    return result


def sequence_log_probs(params, prompt_id, budget=None):
    """
    Returns:
        (np.ndarray): log-probability of each response from all_sequences(), in the same order
    """
    params.shape.check_prompt(prompt_id)
    params.shape.check_enumerable(enumeration_budget() if budget is None else budget)
    sequences = all_sequences(params.shape.T, params.shape.V)
    row = log_softmax(params.logits[prompt_id])
    return np.sum(row[np.arange(params.shape.T), sequences], axis=-1)


def enumerate_distribution(params, prompt_id, budget=None):
    """
    Args:
        params (PolicyParams): Policy
        prompt_id (int): Prompt
        budget (int | None): Max sequences to enumerate (default: configured 'betalab.enumeration_budget')

    Returns:
        (list[tuple[tuple[int], float]]): Every response with its probability, probabilities sum to 1
    """
    logp = sequence_log_probs(params, prompt_id, budget=budget)
    sequences = all_sequences(params.shape.T, params.shape.V)
    return [(response_seq(s), float(p)) for s, p in zip(sequences, np.exp(logp))]


def fit_sft(dataset, smoothing=0.5):
    """
    Args:
        dataset (betalab.core.PreferenceDataset): Dataset whose chosen responses are imitated
        smoothing (float): Additive smoothing applied to token counts

    Returns:
        (PolicyParams): Per-position smoothed log-frequencies of chosen tokens
    """
    if smoothing < 0:
        raise InvalidInput("smoothing must be >= 0, got %s" % smoothing)

    shape = dataset.shape
    counts = np.zeros(shape.dims, dtype=np.float64)
    positions = np.arange(shape.T)
    for t in dataset:
        counts[t.prompt_id, positions, np.asarray(t.chosen, dtype=np.intp)] += 1.0

    totals = counts.sum(axis=-1, keepdims=True) + shape.V * smoothing
    smoothed = counts + smoothing
    with np.errstate(divide="ignore", invalid="ignore"):
        logits = np.where(totals > 0, np.log(smoothed) - np.log(totals), 0.0)

    logits = np.maximum(logits, LOGIT_FLOOR)
    empty = int(np.sum(totals == 0))
    if empty:
        LOG.debug("SFT fit: %s (prompt, position) cells without data, left uniform", empty)

    return PolicyParams(shape, logits)


def tempered(params, temperature):
    """
    Args:
        params (PolicyParams): Policy
        temperature (float): Sampling temperature, 0 means greedy (uniform over tied argmax tokens)

    Returns:
        (PolicyParams): Policy with logits divided by 'temperature'
    """
    if temperature < 0:
        raise InvalidInput("temperature must be >= 0, got %s" % temperature)

    if temperature == 0:
        best = params.logits == np.max(params.logits, axis=-1, keepdims=True)
        return params.with_logits(np.where(best, 0.0, LOGIT_FLOOR))

    if temperature == 1:
        return params

    return params.with_logits(params.logits / temperature)


def policy_digest(params):
    """sha256 of the raw little-endian float64 logits, changes whenever any logit changes"""
    return hashlib.sha256(params.logits.astype("<f8").tobytes()).hexdigest()


def save_policy(params, path, logger=UNSET):
    return runez.save_json(params.to_dict(), path, logger=logger)


def load_policy(path):
    return PolicyParams.from_dict(read_json(path))
