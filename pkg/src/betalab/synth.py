"""
Synthetic preference data: a random additive ground-truth reward, an expert and a weak policy tilted
toward it, and Bradley-Terry labeled response pairs with optional label flips.

Low-gap pairs draw both responses from the expert, high-gap pairs pit the expert against the weak policy.
"""

import hashlib
import logging
import os

import numpy as np
import runez
from runez.schema import Float, ValidationException

from betalab.core import canonical_json, HIGH_GAP, InvalidInput, LOW_GAP, ModelShape, PreferenceDataset, Triplet
from betalab.core import TripletMeta, write_jsonl
from betalab.policy import PolicyParams, sample
from betalab.reward import GroundTruthReward, save_ground_truth, true_reward

LOG = logging.getLogger(__name__)
TRAIN = "train"
TEST = "test"
SPLITS = (TRAIN, TEST)


class GenConfig(runez.Serializable, runez.serialize.with_behavior(strict=True, extras=ValidationException)):
    """Knobs of the synthetic generator, 'P', 'T' and 'V' define the model shape"""

    P = 4
    T = 4
    V = 8
    n_triplets = 8192
    n_test = 1024
    mixture_ratio = Float(default=0.5)
    flip_prob = Float(default=0.0)
    tau_expert = Float(default=1.0)
    tau_weak = Float(default=8.0)
    bt_scale = Float(default=4.0)
    seed = 0

    @property
    def shape(self):
        return ModelShape(P=self.P, T=self.T, V=self.V)

    def problem(self):
        problem = self.shape.problem()
        if problem:
            return problem

        if self.n_triplets < 0 or self.n_test < 0:
            return "n_triplets and n_test must be >= 0"

        if not 0 <= self.mixture_ratio <= 1:
            return "mixture_ratio must be in [0, 1], got %s" % self.mixture_ratio

        if not 0 <= self.flip_prob <= 1:
            return "flip_prob must be in [0, 1], got %s" % self.flip_prob

        if not 0 < self.tau_expert <= self.tau_weak:
            return "need 0 < tau_expert <= tau_weak, got %s and %s" % (self.tau_expert, self.tau_weak)

        if not self.bt_scale > 0:
            return "bt_scale must be > 0, got %s" % self.bt_scale

    def validated(self):
        problem = self.problem()
        if problem:
            raise InvalidInput(problem)

        return self

    def digest(self):
        """sha256 of the canonical json representation, identifies generated data"""
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def make_ground_truth(shape, seed):
    """
    Args:
        shape (ModelShape): Model dimensions
        seed (int): Seed

    Returns:
        (GroundTruthReward): Standard normal per-(prompt, position, token) weights
    """
    rng = np.random.default_rng(seed)
    return GroundTruthReward(shape, rng.standard_normal(shape.validated().dims))


def tilt_policy(gt, tau):
    """
    Args:
        gt (GroundTruthReward): Ground truth to tilt toward
        tau (float): Temperature, smaller means closer to the reward's argmax

    Returns:
        (PolicyParams): Policy proportional to exp(r* / tau)
    """
    if not tau > 0:
        raise InvalidInput("tau must be > 0, got %s" % tau)

    return PolicyParams(gt.shape, gt.weights / tau)


def _bt_sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))

    e = np.exp(z)
    return e / (1.0 + e)


def generate(cfg, gt, split=TRAIN):
    """
    Args:
        cfg (GenConfig): Generator config
        gt (GroundTruthReward): Ground truth used to label pairs (from make_ground_truth(cfg.shape, cfg.seed))
        split (str): 'train' (cfg.n_triplets records) or 'test' (cfg.n_test records, independent stream)

    Returns:
        (PreferenceDataset): Labeled triplets, fully determined by 'cfg' and 'split'
    """
    cfg.validated()
    if split not in SPLITS:
        raise InvalidInput("unknown split '%s'" % split)

    if gt.shape != cfg.shape:
        raise InvalidInput("ground truth shape %s differs from config shape %s" % (gt.shape, cfg.shape))

    count = cfg.n_triplets if split == TRAIN else cfg.n_test
    rng = np.random.default_rng([cfg.seed, SPLITS.index(split)])
    expert = tilt_policy(gt, cfg.tau_expert)
    weak = tilt_policy(gt, cfg.tau_weak)
    triplets = []
    for _ in range(count):
        x = int(rng.integers(cfg.P))
        high = rng.random() < cfg.mixture_ratio
        a = sample(expert, x, rng)
        b = sample(weak if high else expert, x, rng)
        ra = true_reward(gt, x, a)
        rb = true_reward(gt, x, b)
        a_wins = rng.random() < _bt_sigmoid(cfg.bt_scale * (ra - rb))
        flipped = rng.random() < cfg.flip_prob
        if a_wins == flipped:
            a, b, ra, rb = b, a, rb, ra

        meta = TripletMeta(HIGH_GAP if high else LOW_GAP, flipped, ra, rb)
        triplets.append(Triplet(x, a, b, meta))

    dataset = PreferenceDataset(cfg.shape, triplets, cfg.digest())
    LOG.debug("Generated %s %s: %s", split, dataset, runez.short(cfg.to_dict()))
    return dataset


def write_generated(cfg, folder, logger=LOG.debug):
    """
    Generate and save train/test splits, ground truth and config into 'folder'

    Args:
        cfg (GenConfig): Generator config
        folder (str | Path): Target folder
        logger (callable | None): Logger to use for file operations

    Returns:
        (PreferenceDataset, PreferenceDataset, GroundTruthReward): Train set, test set and ground truth
    """
    gt = make_ground_truth(cfg.validated().shape, cfg.seed)
    with runez.log.timeit("Generating %s + %s triplets" % (cfg.n_triplets, cfg.n_test), logger=logger):
        train = generate(cfg, gt, split=TRAIN)
        test = generate(cfg, gt, split=TEST)

    runez.ensure_folder(folder, logger=logger)
    write_jsonl(train, os.path.join(folder, "train.jsonl"), logger=logger)
    write_jsonl(test, os.path.join(folder, "test.jsonl"), logger=logger)
    save_ground_truth(gt, os.path.join(folder, "ground_truth.json"), logger=logger)
    runez.save_json(cfg.to_dict(), os.path.join(folder, "gen_config.json"), logger=logger)
    return train, test, gt
