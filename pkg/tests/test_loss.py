import math

import numpy as np
import pytest

from betalab.calibration import beta_factors, BetaConfig, effective_beta, RunningStats, update_stats
from betalab.core import InvalidInput, ModelShape, NumericError, Triplet
from betalab.gradcheck import central_differences, relative_error
from betalab.loss import beta_dpo_batch, dpo_loss_single, frozen_batch_loss, margin_grad_magnitudes, sigmoid, softplus
from betalab.policy import fit_sft, PolicyParams
from betalab.reward import ExplicitScores, ExplicitSource


@pytest.fixture
def policies(dataset):
    ref = fit_sft(dataset)
    noise = np.random.default_rng(3).standard_normal(ref.shape.dims)
    return ref.with_logits(ref.logits + 0.5 * noise), ref


@pytest.fixture
def batch(dataset):
    return list(dataset[:16])


def config(**values):
    return BetaConfig.from_dict(values)


def plain_dpo(theta, ref, batch, beta):
    grad = np.zeros(theta.shape.dims)
    losses = []
    for t in batch:
        loss, g = dpo_loss_single(theta, ref, t, beta)
        losses.append(loss)
        grad += g

    return math.fsum(losses) / len(batch), grad / len(batch)


def test_helpers():
    assert softplus(0.0) == pytest.approx(math.log(2))
    assert softplus(1000.0) == 1000.0
    assert softplus(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(-2.0) == pytest.approx(1 - sigmoid(2.0))

    magnitudes = margin_grad_magnitudes([-2.0, 0.0, 1.0, 3.0], 0.1, 0.1)
    assert magnitudes[1] == pytest.approx(0.05)
    assert all(a > b for a, b in zip(magnitudes, magnitudes[1:]))


def test_loss_at_reference(shape, handmade):
    ref = fit_sft(handmade)
    for t in handmade:
        loss, grad = dpo_loss_single(ref, ref, t, 0.1)
        assert loss == pytest.approx(math.log(2))
        assert grad.shape == shape.dims

    # Degenerate pair: no gradient, whatever the policy
    theta = PolicyParams(shape, np.random.default_rng(0).standard_normal(shape.dims))
    loss, grad = dpo_loss_single(theta, ref, handmade[3], 0.5)
    assert loss == pytest.approx(math.log(2))
    assert not np.any(grad)


def test_loss_gradient(policies, batch):
    theta, ref = policies
    for t in batch[:4]:
        loss, grad = dpo_loss_single(theta, ref, t, 0.3)
        assert loss > 0
        # Entries for tokens in neither response (or in both) are exactly 0
        numeric = central_differences(lambda v: dpo_loss_single(theta.with_logits(v), ref, t, 0.3)[0], theta.logits.copy())
        assert relative_error(grad, numeric, floor=1e-3) < 1e-6

    # Loss decreases as the policy moves toward chosen
    t = batch[0]
    loss, grad = dpo_loss_single(theta, ref, t, 0.3)
    moved = theta.with_logits(theta.logits - 0.1 * grad)
    assert dpo_loss_single(moved, ref, t, 0.3)[0] < loss


def test_loss_bad_input(shape, handmade):
    ref = fit_sft(handmade)
    with pytest.raises(InvalidInput, match="beta must be > 0"):
        dpo_loss_single(ref, ref, handmade[0], 0)

    with pytest.raises(InvalidInput, match="differs from reference"):
        dpo_loss_single(PolicyParams(ModelShape(P=2, T=3, V=5)), ref, handmade[0], 0.1)

    logits = np.zeros(shape.dims)
    logits[0, 0, 0] = 1e300
    with pytest.raises(NumericError, match="triplet 3"):
        dpo_loss_single(PolicyParams(shape, logits), PolicyParams(shape), Triplet(0, (0, 0, 0), (1, 1, 1)), 1e10, index=3)


def test_loss_asymptotes():
    # One position, two tokens: h is the logit difference of chosen over rejected
    shape = ModelShape(P=1, T=1, V=2)
    ref = PolicyParams(shape)
    t = Triplet(0, (0,), (1,))
    for h, beta in [(30.0, 1.0), (300.0, 0.1), (-30.0, 1.0), (-300.0, 0.1)]:
        theta = PolicyParams(shape, np.array([[[h, 0.0]]]))
        loss, grad = dpo_loss_single(theta, ref, t, beta)
        assert loss >= 0
        if h > 0:
            assert loss == pytest.approx(math.exp(-30), rel=1e-6)
            assert abs(grad[0, 0, 0]) < 1e-12

        else:
            assert loss == pytest.approx(30, rel=1e-12)
            assert grad[0, 0, 0] == pytest.approx(-beta, rel=1e-12)
            assert grad[0, 0, 1] == pytest.approx(beta, rel=1e-12)


def test_permutation_invariance(policies, batch):
    theta, ref = policies
    order = np.random.default_rng(2).permutation(len(batch))
    permuted = [batch[i] for i in order]
    for cfg in (config(rho=1.0), config(rho=1.0, mode="instance"), config(rho=1.0, strategy="none", alpha=0.0)):
        result, stats = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), np.random.default_rng(0))
        other, other_stats = beta_dpo_batch(theta, ref, permuted, cfg, RunningStats.fresh(), np.random.default_rng(1))
        assert other.kept_indices == list(range(16))
        assert other.per_sample_M == [result.per_sample_M[i] for i in order]
        assert other.loss == pytest.approx(result.loss, rel=1e-12)
        assert np.allclose(other.grad, result.grad, rtol=1e-12, atol=1e-15)
        assert other.effective_beta == pytest.approx(result.effective_beta, rel=1e-12)
        assert other_stats.M0 == pytest.approx(stats.M0, rel=1e-12)


def test_plain_dpo(policies, batch):
    theta, ref = policies
    expected_loss, expected_grad = plain_dpo(theta, ref, batch, 0.1)
    rng = np.random.default_rng(0)
    for cfg in (config(alpha=0.0, strategy="none"), config(alpha=0.0, rho=1.0)):
        result, stats = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), rng)
        assert result.kept_indices == list(range(16))
        assert result.effective_beta == 0.1
        assert result.loss == pytest.approx(expected_loss, rel=1e-12)
        assert np.allclose(result.grad, expected_grad, rtol=1e-12, atol=0)
        assert result.betas == [0.1] * 16
        assert result.clamped == 0
        assert stats.initialized


def test_dynamic_beta(policies, batch):
    theta, ref = policies
    cfg = config()
    fresh = RunningStats.fresh(m=cfg.m)
    result, stats = beta_dpo_batch(theta, ref, batch, cfg, fresh, np.random.default_rng(4))
    assert str(result).startswith("loss=")
    assert len(result.per_sample_M) == 16
    assert len(result.per_sample_loss) == 16
    assert len(result.kept_indices) == 13
    assert stats == update_stats(fresh, result.per_sample_M)

    kept_M = [result.per_sample_M[i] for i in result.kept_indices]
    assert result.effective_beta == effective_beta(cfg, stats, kept_M)[0]
    expected = math.fsum(result.per_sample_loss[i] for i in result.kept_indices) / 13
    assert result.loss == pytest.approx(expected, rel=1e-12)
    for i in result.kept_indices:
        assert result.per_sample_loss[i] == dpo_loss_single(theta, ref, batch[i], result.effective_beta)[0]

    full = config(beta_on="full")
    result, stats = beta_dpo_batch(theta, ref, batch, full, fresh, np.random.default_rng(4))
    assert result.effective_beta == effective_beta(full, stats, result.per_sample_M)[0]

    # Same generator state, same outcome
    again, _ = beta_dpo_batch(theta, ref, batch, full, fresh, np.random.default_rng(4))
    assert again.kept_indices == result.kept_indices
    assert again.loss == result.loss


def test_batch_gradient(policies, batch):
    theta, ref = policies
    for cfg in (config(), config(mode="instance"), config(strategy="tail_head")):
        result, _ = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), np.random.default_rng(8))
        assert frozen_batch_loss(theta, ref, batch, result) == pytest.approx(result.loss, rel=1e-12)
        numeric = central_differences(lambda v: frozen_batch_loss(theta.with_logits(v), ref, batch, result), theta.logits.copy())
        assert relative_error(result.grad, numeric, floor=1e-3) < 1e-5


def test_instance_mode(policies, batch):
    theta, ref = policies
    cfg = config(mode="instance", strategy="none")
    result, stats = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), np.random.default_rng(0))
    betas = beta_factors(cfg, result.per_sample_M, stats.M0) * cfg.beta0
    assert result.betas == pytest.approx(list(betas))
    assert result.effective_beta == pytest.approx(float(np.mean(betas)))
    for i, t in enumerate(batch):
        assert result.per_sample_loss[i] == pytest.approx(dpo_loss_single(theta, ref, t, betas[i])[0])


def test_rank_filtering(policies, batch):
    theta, ref = policies
    result, _ = beta_dpo_batch(theta, ref, batch, config(strategy="head"), RunningStats.fresh(), np.random.default_rng(0))
    assert len(result.kept_indices) == 13
    # Largest gradient magnitude means smallest discrepancy
    dropped = sorted(set(range(16)) - set(result.kept_indices))
    assert dropped == sorted(np.argsort(result.per_sample_M, kind="stable")[:3].tolist())

    tail, _ = beta_dpo_batch(theta, ref, batch, config(strategy="tail"), RunningStats.fresh(), np.random.default_rng(0))
    dropped = sorted(set(range(16)) - set(tail.kept_indices))
    assert dropped == sorted(np.argsort(tail.per_sample_M, kind="stable")[-3:].tolist())

    by_norm, _ = beta_dpo_batch(
        theta, ref, batch, config(strategy="head", rank_on="param_grad_norm"), RunningStats.fresh(), np.random.default_rng(0)
    )
    assert len(by_norm.kept_indices) == 13


def test_fixed_center(policies, batch):
    theta, ref = policies
    cfg = config(fixed_M0=0.0, strategy="none")
    result, stats = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), np.random.default_rng(0))
    expected = max(cfg.factor_min, 1 + cfg.alpha * float(np.mean(result.per_sample_M))) * cfg.beta0
    assert result.effective_beta == pytest.approx(expected)
    assert stats.initialized


def test_explicit_source(policies, batch):
    theta, ref = policies
    indices = list(range(100, 116))
    scores = ExplicitScores(dict((i, (float(i - 100), 0.0)) for i in indices))
    cfg = config(source="explicit", strategy="none")
    source = ExplicitSource(scores)
    result, stats = beta_dpo_batch(theta, ref, batch, cfg, RunningStats.fresh(), np.random.default_rng(0), source=source, indices=indices)
    assert result.per_sample_M == [float(i) for i in range(16)]
    assert stats.M0 == 7.5

    with pytest.raises(InvalidInput, match="empty batch"):
        beta_dpo_batch(theta, ref, [], cfg, RunningStats.fresh(), np.random.default_rng(0), source=source)
