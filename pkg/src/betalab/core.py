"""
Value types shared by all betalab modules: model shape, responses, preference triplets and datasets.

>>> shape = ModelShape(P=2, T=3, V=4)
>>> shape.sequence_count
64
>>> round_half_up(2.5), round_half_up(0.49)
(3, 0)
"""

import json
import logging
import math

import runez
from runez.system import UNSET

LOG = logging.getLogger(__name__)

LOW_GAP = "low"
HIGH_GAP = "high"
GAP_CLASSES = (LOW_GAP, HIGH_GAP)
HEADER_KEYS = ("P", "T", "V", "generator_digest")
RECORD_KEYS = ("prompt_id", "chosen", "rejected", "meta")
META_KEYS = ("gap_class", "label_flipped", "r_chosen", "r_rejected")


class BetalabException(Exception):
    """Base for all errors reported by betalab"""

    def __init__(self, message):
        self.message = message

    def __str__(self):
        return self.message


class InvalidInput(BetalabException, ValueError):
    """Malformed or out-of-range input (bad shapes, ids, tokens, config values)"""


class NumericError(BetalabException, ArithmeticError):
    """A non-finite value showed up in a computation"""


class CapacityError(BetalabException):
    """Exhaustive enumeration was asked for beyond the configured budget"""


class StateError(BetalabException, RuntimeError):
    """An operation was attempted on state that is not ready for it"""


class LookupFailure(BetalabException, KeyError):
    """Requested key is not present (eg: explicit score for a triplet index)"""


def round_half_up(value):
    """
    Args:
        value (float): Value to round

    Returns:
        (int): Nearest integer, with .5 going up (unlike python's banker's rounding)
    """
    return int(math.floor(value + 0.5))


class ModelShape:
    """Dimensions of the toy model: P prompts, T positions per response, V tokens per position"""

    __slots__ = ["P", "T", "V"]

    def __init__(self, P=4, T=4, V=8):
        self.P = P
        self.T = T
        self.V = V

    def __repr__(self):
        return "%sx%sx%s" % (self.P, self.T, self.V)

    def __eq__(self, other):
        return isinstance(other, ModelShape) and self.dims == other.dims

    def __hash__(self):
        return hash(self.dims)

    @property
    def dims(self):
        return self.P, self.T, self.V

    @property
    def sequence_count(self):
        """Number of distinct responses per prompt"""
        return self.V**self.T

    def problem(self):
        """
        Returns:
            (str | None): Explanation of why this shape is not valid, if applicable
        """
        for name, value, minimum in (("P", self.P, 1), ("T", self.T, 1), ("V", self.V, 2)):
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                return "%s must be an int >= %s, got %s" % (name, minimum, runez.short(value))

    def validated(self):
        """Raise InvalidInput if shape is not valid, return self otherwise (for chaining)"""
        problem = self.problem()
        if problem:
            raise InvalidInput(problem)

        return self

    def check_prompt(self, prompt_id):
        if not isinstance(prompt_id, int) or isinstance(prompt_id, bool) or not 0 <= prompt_id < self.P:
            raise InvalidInput("prompt_id %s out of range [0, %s)" % (runez.short(prompt_id), self.P))

    def response_problem(self, response):
        """
        Args:
            response (Sequence[int]): Tokens to check

        Returns:
            (str | None): Explanation of why 'response' is not a valid response for this shape, if applicable
        """
        if len(response) != self.T:
            return "response has length %s, expected %s" % (len(response), self.T)

        for token in response:
            if not 0 <= token < self.V or int(token) != token:
                return "token %s out of range [0, %s)" % (runez.short(token), self.V)

    def check_response(self, response):
        problem = self.response_problem(response)
        if problem:
            raise InvalidInput(problem)

    def check_enumerable(self, budget):
        """Raise CapacityError if V**T exceeds 'budget'"""
        if self.sequence_count > budget:
            raise CapacityError("%s sequences per prompt exceed enumeration budget %s" % (self.sequence_count, budget))

    def to_dict(self):
        return dict(P=self.P, T=self.T, V=self.V)

    @classmethod
    def from_dict(cls, data):
        return cls(P=data["P"], T=data["T"], V=data["V"])


def response_seq(tokens):
    """
    Args:
        tokens (Iterable[int]): Tokens, possibly a numpy array

    Returns:
        (tuple[int]): Immutable, hashable response
    """
    return tuple(int(t) for t in tokens)


class TripletMeta:
    """Generator-side facts about a triplet, used for analysis only (never by training)"""

    __slots__ = ["gap_class", "label_flipped", "true_reward_chosen", "true_reward_rejected"]

    def __init__(self, gap_class=LOW_GAP, label_flipped=False, true_reward_chosen=0.0, true_reward_rejected=0.0):
        self.gap_class = gap_class
        self.label_flipped = bool(label_flipped)
        self.true_reward_chosen = float(true_reward_chosen)
        self.true_reward_rejected = float(true_reward_rejected)

    def __repr__(self):
        return "%s%s" % (self.gap_class, " (flipped)" if self.label_flipped else "")

    def __eq__(self, other):
        return isinstance(other, TripletMeta) and self.to_dict() == other.to_dict()

    @property
    def reward_gap(self):
        return self.true_reward_chosen - self.true_reward_rejected

    def to_dict(self):
        return dict(
            gap_class=self.gap_class,
            label_flipped=self.label_flipped,
            r_chosen=self.true_reward_chosen,
            r_rejected=self.true_reward_rejected,
        )

    @classmethod
    def from_dict(cls, data):
        missing = [k for k in META_KEYS if k not in data]
        if missing:
            raise InvalidInput("meta is missing keys: %s" % ", ".join(missing))

        return cls(data["gap_class"], data["label_flipped"], data["r_chosen"], data["r_rejected"])


class Triplet:
    """One preference record: for 'prompt_id', response 'chosen' was preferred over 'rejected'"""

    __slots__ = ["prompt_id", "chosen", "rejected", "meta"]

    def __init__(self, prompt_id, chosen, rejected, meta=None):
        self.prompt_id = prompt_id
        self.chosen = response_seq(chosen)
        self.rejected = response_seq(rejected)
        self.meta = meta

    def __repr__(self):
        return "x%s: %s > %s" % (self.prompt_id, self.chosen, self.rejected)

    def __eq__(self, other):
        return isinstance(other, Triplet) and self.to_dict() == other.to_dict()

    def swapped(self):
        """Same triplet with chosen and rejected exchanged"""
        meta = self.meta
        if meta is not None:
            meta = TripletMeta(meta.gap_class, meta.label_flipped, meta.true_reward_rejected, meta.true_reward_chosen)

        return Triplet(self.prompt_id, self.rejected, self.chosen, meta)

    def problem(self, shape):
        if not isinstance(self.prompt_id, int) or isinstance(self.prompt_id, bool) or not 0 <= self.prompt_id < shape.P:
            return "prompt_id %s out of range [0, %s)" % (runez.short(self.prompt_id), shape.P)

        return shape.response_problem(self.chosen) or shape.response_problem(self.rejected)

    def to_dict(self):
        result = dict(prompt_id=self.prompt_id, chosen=list(self.chosen), rejected=list(self.rejected))
        if self.meta is not None:
            result["meta"] = self.meta.to_dict()

        return result

    @classmethod
    def from_dict(cls, data):
        missing = [k for k in RECORD_KEYS if k != "meta" and k not in data]
        if missing:
            raise InvalidInput("record is missing keys: %s" % ", ".join(missing))

        meta = data.get("meta")
        if meta is not None:
            meta = TripletMeta.from_dict(meta)

        return cls(data["prompt_id"], data["chosen"], data["rejected"], meta)


class PreferenceDataset:
    """Ordered, immutable collection of triplets sharing one ModelShape"""

    def __init__(self, shape, triplets, generator_config_digest=None):
        """
        Args:
            shape (ModelShape): Shape all triplets conform to
            triplets (Iterable[Triplet]): Preference records
            generator_config_digest (str | None): Digest of the GenConfig that produced this dataset, if synthetic
        """
        self.shape = shape
        self.triplets = tuple(triplets)
        self.generator_config_digest = generator_config_digest

    def __repr__(self):
        return "%s triplets over %s" % (len(self.triplets), self.shape)

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def __getitem__(self, index):
        return self.triplets[index]

    def __eq__(self, other):
        return (
            isinstance(other, PreferenceDataset)
            and self.shape == other.shape
            and self.generator_config_digest == other.generator_config_digest
            and self.triplets == other.triplets
        )

    def subset(self, indices):
        """
        Args:
            indices (Iterable[int]): Positions to keep, in the order given

        Returns:
            (PreferenceDataset): Dataset with only triplets at 'indices'
        """
        return PreferenceDataset(self.shape, [self.triplets[i] for i in indices], self.generator_config_digest)

    def by_prompt(self):
        """
        Returns:
            (dict[int, list[int]]): Triplet indices grouped by prompt id, in dataset order
        """
        result = {}
        for i, t in enumerate(self.triplets):
            result.setdefault(t.prompt_id, []).append(i)

        return result

    def header(self):
        return dict(P=self.shape.P, T=self.shape.T, V=self.shape.V, generator_digest=self.generator_config_digest)


def validate_dataset(dataset):
    """
    Args:
        dataset (PreferenceDataset): Dataset to check

    Returns:
        (list[str]): Human readable problems, empty if dataset is valid
    """
    shape_problem = dataset.shape.problem()
    if shape_problem:
        return [shape_problem]

    problems = []
    for i, t in enumerate(dataset.triplets):
        problem = t.problem(dataset.shape)
        if problem:
            problems.append("triplet %s: %s" % (i, problem))

        elif t.meta is not None:
            if t.meta.gap_class not in GAP_CLASSES:
                problems.append("triplet %s: invalid gap_class '%s'" % (i, t.meta.gap_class))

            elif not (math.isfinite(t.meta.true_reward_chosen) and math.isfinite(t.meta.true_reward_rejected)):
                problems.append("triplet %s: non-finite true reward" % i)

    return problems


def checked_dataset(dataset):
    """Raise InvalidInput if 'dataset' has problems, return it otherwise"""
    problems = validate_dataset(dataset)
    if problems:
        more = " (and %s more)" % (len(problems) - 1) if len(problems) > 1 else ""
        raise InvalidInput("%s%s" % (problems[0], more))

    return dataset


def canonical_json(data):
    """Compact, key-sorted json representation, stable across runs"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def read_json(path):
    """
    Args:
        path (str | Path): Path to .json file to read

    Returns:
        (dict): Deserialized object, InvalidInput is raised if file is missing, unreadable or not a json object
    """
    text = "\n".join(runez.readlines(path, fatal=InvalidInput))
    try:
        data = json.loads(text)

    except ValueError as e:
        raise InvalidInput("%s: invalid json (%s)" % (runez.short(path), e))

    if not isinstance(data, dict):
        raise InvalidInput("%s: expecting an object" % runez.short(path))

    return data


def write_jsonl(dataset, path, logger=UNSET, dryrun=UNSET):
    """
    Args:
        dataset (PreferenceDataset): Dataset to save
        path (str | Path): Target .jsonl file, first line is the header with shape and generator digest
        logger (callable | bool | None): Logger to use, False to log errors only, None to disable log chatter
        dryrun (bool | UNSET): Optionally override current dryrun setting

    Returns:
        (int): 1 if effectively done, 0 if no-op, -1 on failure
    """
    lines = [canonical_json(dataset.header())]
    lines.extend(canonical_json(t.to_dict()) for t in dataset)
    return runez.write(path, "%s\n" % "\n".join(lines), logger=logger, dryrun=dryrun)


def read_jsonl(path):
    """
    Args:
        path (str | Path): File previously written by write_jsonl()

    Returns:
        (PreferenceDataset): Loaded and validated dataset
    """
    shape = digest = None
    triplets = []
    for line_number, line in enumerate(runez.readlines(path, fatal=InvalidInput), start=1):
        line = line.strip()
        if not line:
            continue

        try:
            data = json.loads(line)

        except ValueError as e:
            raise InvalidInput("%s line %s: invalid json (%s)" % (runez.short(path), line_number, e))

        if not isinstance(data, dict):
            raise InvalidInput("%s line %s: expecting an object" % (runez.short(path), line_number))

        if shape is None:
            missing = [k for k in HEADER_KEYS if k not in data]
            if missing:
                raise InvalidInput("%s: header is missing keys: %s" % (runez.short(path), ", ".join(missing)))

            shape = ModelShape.from_dict(data).validated()
            digest = data["generator_digest"]
            continue

        try:
            triplets.append(Triplet.from_dict(data))

        except (InvalidInput, TypeError, ValueError) as e:
            raise InvalidInput("%s line %s: %s" % (runez.short(path), line_number, e))

    if shape is None:
        raise InvalidInput("%s: no header line" % runez.short(path))

    dataset = checked_dataset(PreferenceDataset(shape, triplets, digest))
    LOG.debug("Read %s from %s", dataset, runez.short(path))
    return dataset
