"""
Run configuration: one flat json object whose keys are the field names of GenConfig, TrainConfig,
BetaConfig and EvalConfig. Each key is routed to the config that owns it, 'seed' is shared by data
generation and training.

Process-wide tunables (like 'betalab.workers') are not part of run configs, they come from `runez.config`.
"""

import json
import logging

import runez
from runez.config import DictProvider
from runez.schema import Enum, ValidationException

from betalab.calibration import BetaConfig
from betalab.core import InvalidInput, read_json
from betalab.evaluator import SEPARATE
from betalab.synth import GenConfig
from betalab.trainer import TrainConfig

LOG = logging.getLogger(__name__)
SECTIONS = ("gen", "train", "beta", "evaluation")
TUNABLES_PREFIX = "betalab."
SFT = "sft"
CHOSEN_EMPIRICAL = "chosen_empirical"


class EvalConfig(runez.Serializable, runez.serialize.with_behavior(strict=True, extras=ValidationException)):
    """How trained policies get evaluated"""

    baseline = Enum([SFT, CHOSEN_EMPIRICAL], default=SFT)
    ties = Enum("separate split", default=SEPARATE)
    hist_bins = 20

    def problem(self):
        if self.hist_bins < 1:
            return "hist_bins must be >= 1, got %s" % self.hist_bins


CLASSES = dict(gen=GenConfig, train=TrainConfig, beta=BetaConfig, evaluation=EvalConfig)


def key_owners(key):
    """
    >>> key_owners("seed")
    ['gen', 'train']
    >>> key_owners("beta_cfg")
    []

    Returns:
        (list[str]): Sections that own config 'key' (empty if unknown)
    """
    return [name for name in SECTIONS if key != "beta_cfg" and key in CLASSES[name]._meta.attributes]


class RunConfig:
    """Everything one run needs: data generation, training, beta calibration and evaluation settings"""

    __slots__ = ["gen", "train", "beta", "evaluation"]

    def __init__(self, gen=None, train=None, beta=None, evaluation=None):
        self.gen = GenConfig() if gen is None else gen
        self.train = TrainConfig() if train is None else train
        self.beta = self.train.beta_cfg if beta is None else beta
        self.evaluation = EvalConfig() if evaluation is None else evaluation
        self.train.beta_cfg = self.beta

    def __repr__(self):
        return runez.short(self.to_flat())

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_flat() == other.to_flat()

    @classmethod
    def from_flat(cls, data, source=None):
        """
        Args:
            data (dict | None): Flat settings, keys as declared by GenConfig, TrainConfig, BetaConfig or EvalConfig
            source (str | None): Where 'data' came from, for error reporting

        Returns:
            (RunConfig): Validated config, unspecified keys have their default value
        """
        if data is None:
            data = {}

        if not isinstance(data, dict):
            raise InvalidInput("run config must be a json object, got %s" % type(data).__name__)

        sections = dict((name, {}) for name in SECTIONS)
        for key, value in data.items():
            owners = key_owners(key)
            if not owners:
                raise ValidationException("'%s' is not a known config key%s" % (key, source and " in %s" % source or ""))

            for name in owners:
                sections[name][key] = value

        gen, train, beta, evaluation = (CLASSES[name].from_dict(sections[name], source=source) for name in SECTIONS)
        return cls(gen=gen, train=train, beta=beta, evaluation=evaluation).validated()

    def to_flat(self):
        """
        Returns:
            (dict): Flat representation, inverse of from_flat()
        """
        result = {}
        for name in SECTIONS:
            result.update(getattr(self, name).to_dict())

        result.pop("beta_cfg", None)
        return result

    def with_overrides(self, overrides):
        """
        Args:
            overrides (dict | None): Flat settings to apply on top of this config

        Returns:
            (RunConfig): New validated config (this one is not modified)
        """
        data = self.to_flat()
        if overrides:
            data.update(overrides)

        return RunConfig.from_flat(data)

    def problem(self):
        for name in SECTIONS:
            problem = getattr(self, name).problem()
            if problem:
                return problem

    def validated(self):
        problem = self.problem()
        if problem:
            raise InvalidInput(problem)

        return self


def load_run_config(path, overrides=None):
    """
    Args:
        path (str | pathlib.Path | None): Flat json config file (defaults for all keys if None)
        overrides (dict | None): Extra settings, applied on top of the file's

    Returns:
        (RunConfig): Validated config
    """
    data = {}
    if path:
        data = read_json(path)
        LOG.debug("Read config %s: %s", runez.short(path), runez.short(data))

    if overrides:
        data = dict(data)
        data.update(overrides)

    return RunConfig.from_flat(data, source=path and runez.short(path))


def parsed_value(text):
    """
    >>> parsed_value("0.5"), parsed_value("true"), parsed_value("batch")
    (0.5, True, 'batch')
    """
    try:
        return json.loads(text)

    except ValueError:
        return text


def parsed_settings(settings):
    """
    Args:
        settings (list[str] | None): 'KEY=VALUE' strings, as given to the '--set' CLI option

    Returns:
        (dict, dict): Run config overrides, and process-wide tunables (keys starting with 'betalab.')
    """
    overrides = {}
    tunables = {}
    for setting in settings or ():
        key, sep, value = setting.partition("=")
        key = key.strip()
        if not key or not sep:
            raise InvalidInput("invalid setting '%s', expecting KEY=VALUE" % setting)

        target = tunables if key.startswith(TUNABLES_PREFIX) else overrides
        target[key] = parsed_value(value.strip())

    return overrides, tunables


def apply_tunables(tunables):
    """Make 'tunables' visible via runez.config, taking precedence over other providers"""
    if tunables:
        runez.config.CONFIG.add(DictProvider(tunables, name="--set"), front=True)
        LOG.debug("Tunables: %s", runez.short(tunables))
