"""
Training loop: SFT initialization, then one Adam update per batch on the dynamic-beta DPO objective.

Per-epoch shuffles come from a generator seeded by (seed, epoch), the filter generator state is part of
the checkpoint, so an interrupted run resumes bit-identically.
"""

import csv
import io
import logging
import os

import numpy as np
import runez
from runez.schema import Boolean, Float, ValidationException

from betalab.calibration import BetaConfig, RunningStats
from betalab.core import InvalidInput, NumericError, read_json, StateError
from betalab.loss import beta_dpo_batch
from betalab.policy import fit_sft, PolicyParams, save_policy, tensor_dict, tensor_from_dict
from betalab.reward import discrepancy_source

LOG = logging.getLogger(__name__)
METRICS_COLUMNS = ("step", "loss", "effective_beta", "mean_M", "std_M", "kept_count", "grad_norm", "clamp_flag")
FILTER_STREAM = 0
SHUFFLE_STREAM = 1


class TrainConfig(runez.Serializable, runez.serialize.with_behavior(strict=True, extras=ValidationException)):
    """Optimization settings, 'beta_cfg' holds calibration and filtering settings"""

    batch_size = 64
    epochs = 1
    lr = Float(default=1e-2)
    adam_beta1 = Float(default=0.9)
    adam_beta2 = Float(default=0.999)
    adam_eps = Float(default=1e-8)
    seed = 0
    shuffle = Boolean(default=True)
    checkpoint_every = 0
    smoothing = Float(default=0.5)
    beta_cfg = BetaConfig

    def reset(self):
        super().reset()
        self.beta_cfg = BetaConfig()

    def set_from_dict(self, data, source=None, merge=False):
        super().set_from_dict(data, source=source, merge=merge)
        if self.beta_cfg is None:
            self.beta_cfg = BetaConfig()

    def problem(self):
        if self.batch_size < 1:
            return "batch_size must be >= 1, got %s" % self.batch_size

        if self.epochs < 0:
            return "epochs must be >= 0, got %s" % self.epochs

        if self.lr < 0:
            return "lr must be >= 0, got %s" % self.lr

        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            return "invalid Adam settings: %s, %s, %s" % (self.adam_beta1, self.adam_beta2, self.adam_eps)

        if self.checkpoint_every < 0:
            return "checkpoint_every must be >= 0, got %s" % self.checkpoint_every

        if self.smoothing < 0:
            return "smoothing must be >= 0, got %s" % self.smoothing

        return self.beta_cfg.problem()

    def validated(self):
        problem = self.problem()
        if problem:
            raise InvalidInput(problem)

        return self


def _cloned_rng(rng):
    clone = np.random.Generator(np.random.PCG64())
    clone.bit_generator.state = rng.bit_generator.state
    return clone


class TrainState:
    """Everything needed to continue training: policy, frozen reference, Adam moments, stats and filter generator"""

    __slots__ = ["theta", "ref", "adam_m", "adam_v", "step", "stats", "rng"]

    def __init__(self, theta, ref, adam_m=None, adam_v=None, step=0, stats=None, rng=None):
        self.theta = theta
        self.ref = ref
        self.adam_m = np.zeros(theta.shape.dims) if adam_m is None else adam_m
        self.adam_v = np.zeros(theta.shape.dims) if adam_v is None else adam_v
        self.step = step
        self.stats = RunningStats() if stats is None else stats
        self.rng = np.random.default_rng(0) if rng is None else rng

    def __repr__(self):
        return "step %s, %s" % (self.step, self.stats)

    def __eq__(self, other):
        return (
            isinstance(other, TrainState)
            and self.step == other.step
            and self.theta == other.theta
            and self.ref == other.ref
            and np.array_equal(self.adam_m, other.adam_m)
            and np.array_equal(self.adam_v, other.adam_v)
            and self.stats == other.stats
            and self.rng.bit_generator.state == other.rng.bit_generator.state
        )

    def to_dict(self):
        return dict(
            step=self.step,
            theta=self.theta.to_dict(),
            ref=self.ref.to_dict(),
            adam_m=tensor_dict(self.theta.shape, "values", self.adam_m),
            adam_v=tensor_dict(self.theta.shape, "values", self.adam_v),
            stats=self.stats.to_dict(),
            rng=self.rng.bit_generator.state,
        )

    @classmethod
    def from_dict(cls, data):
        try:
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = data["rng"]
            return cls(
                PolicyParams.from_dict(data["theta"]),
                PolicyParams.from_dict(data["ref"]),
                adam_m=tensor_from_dict(data["adam_m"], "values")[1],
                adam_v=tensor_from_dict(data["adam_v"], "values")[1],
                step=int(data["step"]),
                stats=RunningStats.from_dict(data["stats"]),
                rng=rng,
            )

        except (KeyError, TypeError, ValueError, ValidationException) as e:
            raise InvalidInput("invalid checkpoint: %s" % e)


class BatchReport(runez.Slotted):
    """What happened during one optimizer step"""

    __slots__ = [
        "step", "loss", "effective_beta", "mean_M", "std_M", "kept_count", "kept_indices", "grad_norm", "clamp_flag", "per_sample_M",
        "fallback",
    ]

    def __repr__(self):
        return "step %s: loss=%.6g beta=%.4g kept=%s" % (self.step, self.loss, self.effective_beta, self.kept_count)

    def metrics_row(self):
        return [self.step, self.loss, self.effective_beta, self.mean_M, self.std_M, self.kept_count, self.grad_norm, int(self.clamp_flag)]


def init_from_sft(dataset, cfg):
    """
    Args:
        dataset (betalab.core.PreferenceDataset): Training data
        cfg (TrainConfig): Config

    Returns:
        (TrainState): theta = ref = SFT fit on chosen responses, zero moments, fresh stats
    """
    if not len(dataset):
        raise InvalidInput("can't train on an empty dataset")

    cfg.validated()
    ref = fit_sft(dataset, smoothing=cfg.smoothing)
    stats = RunningStats.fresh(m=cfg.beta_cfg.m)
    rng = np.random.default_rng([cfg.seed, FILTER_STREAM])
    return TrainState(ref.copy(), ref, stats=stats, rng=rng)


def adam_update(logits, grad, adam_m, adam_v, step, cfg):
    """
    Args:
        logits (np.ndarray): Current parameters
        grad (np.ndarray): Gradient of the loss
        adam_m (np.ndarray): First moment
        adam_v (np.ndarray): Second moment
        step (int): 1-based index of this update, used for bias correction
        cfg (TrainConfig): Learning rate and Adam settings

    Returns:
        (np.ndarray, np.ndarray, np.ndarray): Updated logits, first and second moments (inputs are not modified)
    """
    m = cfg.adam_beta1 * adam_m + (1 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * adam_v + (1 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1 - cfg.adam_beta1**step)
    v_hat = v / (1 - cfg.adam_beta2**step)
    return logits - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), m, v


def train_step(state, batch, cfg, source=None, indices=None):
    """
    Args:
        state (TrainState): State before this step (not modified)
        batch (list[betalab.core.Triplet]): Triplets of this step
        cfg (TrainConfig): Config
        source (betalab.reward.DiscrepancySource | None): Discrepancy source (default: per cfg.beta_cfg.source)
        indices (list[int] | None): Dataset index of each triplet

    Returns:
        (TrainState, BatchReport): State after one Adam update, and what happened
    """
    rng = _cloned_rng(state.rng)
    result, stats = beta_dpo_batch(state.theta, state.ref, batch, cfg.beta_cfg, state.stats, rng, source=source, indices=indices)
    step = state.step + 1
    grad_norm = float(np.linalg.norm(result.grad))
    if not np.isfinite(grad_norm):
        raise NumericError("non-finite gradient at step %s" % step)

    logits, adam_m, adam_v = adam_update(state.theta.logits, result.grad, state.adam_m, state.adam_v, step, cfg)
    theta = state.theta.with_logits(logits)
    new_state = TrainState(theta, state.ref, adam_m=adam_m, adam_v=adam_v, step=step, stats=stats, rng=rng)
    values = np.array(result.per_sample_M)
    report = BatchReport(
        step=step,
        loss=result.loss,
        effective_beta=result.effective_beta,
        mean_M=float(np.mean(values)),
        std_M=float(np.std(values)),
        kept_count=len(result.kept_indices),
        kept_indices=result.kept_indices,
        grad_norm=grad_norm,
        clamp_flag=result.clamped > 0,
        per_sample_M=result.per_sample_M,
        fallback=result.filter.fallback,
    )
    LOG.debug("%s", report)
    return new_state, report


def epoch_order(n, cfg, epoch):
    """Order in which the 'n' dataset indices are visited during 'epoch'"""
    if not cfg.shuffle:
        return np.arange(n)

    return np.random.default_rng([cfg.seed, SHUFFLE_STREAM, epoch]).permutation(n)


def epoch_batches(n, cfg, epoch):
    """
    Args:
        n (int): Dataset size
        cfg (TrainConfig): Config
        epoch (int): Epoch number

    Returns:
        (list[list[int]]): Dataset indices of each batch of 'epoch', trailing partial batch dropped or wrap-padded
    """
    order = [int(i) for i in epoch_order(n, cfg, epoch)]
    size = cfg.batch_size
    full, remainder = divmod(n, size)
    batches = [order[i * size:(i + 1) * size] for i in range(full)]
    if remainder:
        if full and remainder < size / 2:
            if epoch == 0:
                LOG.debug("Dropping trailing batch of %s (< half of batch size %s)", remainder, size)

        else:
            tail = order[full * size:]
            tail.extend(order[i % n] for i in range(size - remainder))
            batches.append(tail)
            if epoch == 0:
                LOG.debug("Padding trailing batch of %s to %s by wrapping around", remainder, size)

    return batches


def save_checkpoint(state, path, logger=False):
    return runez.save_json(state.to_dict(), path, logger=logger)


def load_checkpoint(path):
    return TrainState.from_dict(read_json(path))


def resume(checkpoint_path, dataset, cfg):
    """
    Args:
        checkpoint_path (str | Path): Checkpoint written during a previous train()
        dataset (betalab.core.PreferenceDataset): Same training data as the interrupted run
        cfg (TrainConfig): Same config as the interrupted run

    Returns:
        (TrainState): State to continue from
    """
    state = load_checkpoint(checkpoint_path)
    if state.theta.shape != dataset.shape:
        raise StateError("checkpoint shape %s doesn't match dataset shape %s" % (state.theta.shape, dataset.shape))

    total = cfg.epochs * len(epoch_batches(len(dataset), cfg, 0))
    if state.step > total:
        raise StateError("checkpoint is at step %s, past the %s steps of this config" % (state.step, total))

    return state


class MetricsWriter:
    """Appends one csv row per step to 'metrics.csv'"""

    def __init__(self, path, resume_step=None):
        """
        Args:
            path (str | Path | None): Where to write metrics (nothing written if None)
            resume_step (int | None): Step of the checkpoint being resumed, rows past it are dropped from an existing file
        """
        self.path = path
        if not path:
            return

        if resume_step is not None and os.path.exists(path):
            rows = list(csv.reader(runez.readlines(path, fatal=InvalidInput)))
            if rows and tuple(rows[0]) == METRICS_COLUMNS:
                kept = [row for row in rows[1:] if row and int(row[0]) <= resume_step]
                if len(kept) < len(rows) - 1:
                    LOG.debug("Dropping %s metrics row(s) past checkpoint step %s", len(rows) - 1 - len(kept), resume_step)

                self._write([METRICS_COLUMNS] + kept, "w")
                return

        runez.ensure_folder(os.path.dirname(path) or ".", logger=False)
        self._write([METRICS_COLUMNS], "w")

    def add(self, report):
        if self.path:
            self._write([report.metrics_row()], "a")

    def _write(self, rows, mode):
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerows(rows)
        with io.open(self.path, mode) as fh:
            fh.write(buffer.getvalue())


def train(dataset, cfg, folder=None, resume_from=None, source=None, max_steps=None):
    """
    Args:
        dataset (betalab.core.PreferenceDataset): Training data
        cfg (TrainConfig): Config
        folder (str | Path | None): Where to write 'checkpoint.json', 'metrics.csv' and 'policy.json' (nothing written if None)
        resume_from (str | Path | None): Checkpoint to continue from
        source (betalab.reward.DiscrepancySource | None): Discrepancy source (default: per cfg.beta_cfg.source)
        max_steps (int | None): Stop after this many steps (run can be resumed later from last checkpoint)

    Returns:
        (TrainState, list[BatchReport]): Final state, and a report per step taken during this call
    """
    cfg.validated()
    if resume_from:
        state = resume(resume_from, dataset, cfg)

    else:
        state = init_from_sft(dataset, cfg)

    if source is None:
        source = discrepancy_source(cfg.beta_cfg)

    n = len(dataset)
    steps_per_epoch = len(epoch_batches(n, cfg, 0))
    total = cfg.epochs * steps_per_epoch
    checkpoint = folder and os.path.join(folder, "checkpoint.json")
    metrics = MetricsWriter(folder and os.path.join(folder, "metrics.csv"), resume_step=state.step if resume_from else None)
    reports = []
    batches = epoch = None
    while state.step < total and (max_steps is None or len(reports) < max_steps):
        if epoch != state.step // steps_per_epoch:
            epoch = state.step // steps_per_epoch
            batches = epoch_batches(n, cfg, epoch)

        indices = batches[state.step % steps_per_epoch]
        state, report = train_step(state, [dataset[i] for i in indices], cfg, source=source, indices=indices)
        reports.append(report)
        metrics.add(report)
        if checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint)

    if folder:
        save_checkpoint(state, checkpoint)
        save_policy(state.theta, os.path.join(folder, "policy.json"), logger=False)
        save_policy(state.ref, os.path.join(folder, "reference.json"), logger=False)

    LOG.debug("Trained %s steps (%s total), final stats: %s", len(reports), state.step, state.stats)
    return state, reports
