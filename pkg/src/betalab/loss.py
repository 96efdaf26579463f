"""
DPO loss with its analytic gradient, and the assembled batch objective with dynamic beta and filtering.

>>> round(softplus(0.0), 6)
0.693147
"""

import logging
import math

import numpy as np
import runez

from betalab.calibration import beta_factors, clamp_count, effective_beta, INSTANCE, reference_M0, update_stats
from betalab.core import InvalidInput, NumericError
from betalab.filtering import GAUSSIAN, keep_all, NONE, select_gaussian, select_rank
from betalab.policy import grad_log_prob
from betalab.reward import discrepancy_source, log_ratio_margin

LOG = logging.getLogger(__name__)


def softplus(z):
    """log(1 + exp(z)), without overflow for large |z|"""
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))

    e = math.exp(z)
    return e / (1.0 + e)


def dpo_loss_single(theta, ref, triplet, beta, index=None):
    """
    Args:
        theta (betalab.policy.PolicyParams): Policy being trained
        ref (betalab.policy.PolicyParams): Frozen reference
        triplet (betalab.core.Triplet): Preference record
        beta (float): Beta for this sample, treated as a constant
        index (int | None): Position of 'triplet' in its dataset, for error reporting

    Returns:
        (float, np.ndarray): -log sigmoid(beta * h), and its gradient with respect to theta's logits
    """
    if theta.shape != ref.shape:
        raise InvalidInput("policy shape %s differs from reference %s" % (theta.shape, ref.shape))

    if not beta > 0:
        raise InvalidInput("beta must be > 0, got %s" % beta)

    z = beta * log_ratio_margin(theta, ref, triplet)
    if not math.isfinite(z):
        raise NumericError("non-finite margin for triplet %s" % ("?" if index is None else index))

    loss = softplus(-z)
    scale = -sigmoid(-z) * beta
    grad = scale * (grad_log_prob(theta, triplet.prompt_id, triplet.chosen) - grad_log_prob(theta, triplet.prompt_id, triplet.rejected))
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError("non-finite loss or gradient for triplet %s" % ("?" if index is None else index))

    return loss, grad


def margin_grad_magnitudes(batch_M, beta, beta0):
    """
    Returns:
        (np.ndarray): |d loss / d h| = beta * sigmoid(-beta * M / beta0) per sample, decreasing in M
    """
    return np.array([beta * sigmoid(-beta * M / beta0) for M in batch_M], dtype=np.float64)


class BatchLossResult(runez.Slotted):
    """Outcome of one batch evaluation of the dynamic-beta objective"""

    __slots__ = ["loss", "grad", "effective_beta", "per_sample_loss", "per_sample_M", "filter", "betas", "clamped"]

    def __repr__(self):
        return "loss=%.6g beta=%.4g kept=%s/%s" % (self.loss, self.effective_beta, len(self.filter.kept_indices), len(self.per_sample_M))

    @property
    def kept_indices(self):
        return self.filter.kept_indices


def _kept_losses(theta, ref, batch, kept, betas, indices, loss_fn):
    """Per-sample loss of kept samples, and mean gradient over them (accumulated in kept order)"""
    grad = np.zeros(theta.shape.dims, dtype=np.float64)
    losses = {}
    for i in kept:
        losses[i], g = loss_fn(theta, ref, batch[i], betas[i], index=indices[i])
        grad += g

    grad /= len(kept)
    return losses, grad


def _rank_scores(theta, ref, batch, cfg, values, indices, loss_fn):
    if cfg.rank_on == "param_grad_norm":
        return [float(np.linalg.norm(loss_fn(theta, ref, t, cfg.beta0, index=i)[1])) for t, i in zip(batch, indices)]

    return margin_grad_magnitudes(values, cfg.beta0, cfg.beta0)


def beta_dpo_batch(theta, ref, batch, cfg, stats, rng, source=None, indices=None, loss_fn=dpo_loss_single):
    """
    Args:
        theta (betalab.policy.PolicyParams): Policy being trained
        ref (betalab.policy.PolicyParams): Frozen reference
        batch (list[betalab.core.Triplet]): Triplets of this step
        cfg (betalab.calibration.BetaConfig): Calibration and filtering settings
        stats (betalab.calibration.RunningStats): Running stats before this batch
        rng (np.random.Generator): Generator used by the gaussian filter
        source (betalab.reward.DiscrepancySource | None): Where discrepancies come from (default: per cfg.source)
        indices (list[int] | None): Dataset index of each triplet
        loss_fn (callable): Per-sample loss and gradient

    Returns:
        (BatchLossResult, betalab.calibration.RunningStats): Batch objective, and stats updated from the full batch
    """
    n = len(batch)
    if n == 0:
        raise InvalidInput("empty batch")

    if indices is None:
        indices = [None] * n

    if source is None:
        source = discrepancy_source(cfg)

    values = source.discrepancies(theta, ref, batch, indices)
    new_stats = update_stats(stats, values)
    if cfg.strategy == GAUSSIAN:
        outcome = select_gaussian(values, new_stats, cfg.rho, rng, center=reference_M0(cfg, new_stats))

    elif cfg.strategy == NONE:
        outcome = keep_all(n)

    else:
        outcome = select_rank(_rank_scores(theta, ref, batch, cfg, values, indices, loss_fn), cfg.strategy, exclusion=cfg.exclusion)

    kept = outcome.kept_indices
    designated = values[kept] if cfg.beta_on == "filtered" else values
    beta, _ = effective_beta(cfg, new_stats, designated)
    if cfg.mode == INSTANCE:
        betas = [float(b) for b in beta_factors(cfg, values, reference_M0(cfg, new_stats)) * cfg.beta0]

    else:
        betas = [beta] * n

    losses, grad = _kept_losses(theta, ref, batch, kept, betas, indices, loss_fn)
    per_sample_loss = []
    for i, t in enumerate(batch):
        if i not in losses:
            losses[i] = loss_fn(theta, ref, t, betas[i], index=indices[i])[0]

        per_sample_loss.append(losses[i])

    loss = math.fsum(losses[i] for i in kept) / len(kept)
    LOG.debug("batch of %s: beta=%.4g kept=%s loss=%.6g", n, beta, len(kept), loss)

    result = BatchLossResult(
        loss=loss,
        grad=grad,
        effective_beta=beta,
        per_sample_loss=per_sample_loss,
        per_sample_M=[float(v) for v in values],
        filter=outcome,
        betas=[betas[i] for i in kept],
        clamped=clamp_count(cfg, new_stats, designated),
    )
    return result, new_stats


def frozen_batch_loss(theta, ref, batch, result, loss_fn=dpo_loss_single):
    """
    Args:
        theta (betalab.policy.PolicyParams): Policy to evaluate
        ref (betalab.policy.PolicyParams): Frozen reference
        batch (list[betalab.core.Triplet]): Same batch 'result' was computed on
        result (BatchLossResult): Previous evaluation, its kept set and per-sample betas are held fixed
        loss_fn (callable): Per-sample loss and gradient

    Returns:
        (float): Batch loss at 'theta' with filtering and beta frozen, differentiable counterpart of 'result.grad'
    """
    kept = result.kept_indices
    losses = [loss_fn(theta, ref, batch[i], beta)[0] for i, beta in zip(kept, result.betas)]
    return math.fsum(losses) / len(kept)
