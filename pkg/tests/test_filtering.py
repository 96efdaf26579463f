import math

import numpy as np
import pytest

from betalab.calibration import RunningStats
from betalab.core import InvalidInput
from betalab.filtering import gaussian_log_weights, gaussian_weight, HEAD, keep_all, keep_count, rank_order, select_gaussian, select_rank
from betalab.filtering import TAIL, TAIL_HEAD


def stats(M0=0.0, sigma=1.0):
    return RunningStats.from_dict(dict(M0=M0, sigma=sigma, initialized=True))


def test_gaussian_weight():
    assert round(gaussian_weight(0.0, 0.0, 1.0), 6) == 0.398942
    assert round(gaussian_weight(1.0, 0.0, 1.0), 6) == 0.241971
    assert gaussian_weight(3.0, 1.0, 2.0) == pytest.approx(gaussian_weight(1.0, 0.0, 1.0) / 2)

    logs = gaussian_log_weights([0.0, 1.0, -2.5], 0.5, 0.7)
    assert logs == pytest.approx([math.log(gaussian_weight(v, 0.5, 0.7)) for v in (0.0, 1.0, -2.5)])
    assert np.isfinite(gaussian_log_weights([1e6], 0.0, 1.0)[0])

    # Symmetric around the center
    for M0, d, sigma in [(0.5, 0.25, 1.0), (-2.0, 3.0, 0.5), (1024.0, 0.125, 2.0)]:
        assert gaussian_weight(M0 + d, M0, sigma) == gaussian_weight(M0 - d, M0, sigma)


def test_keep_count():
    assert keep_count(10, 0.8) == 8
    assert keep_count(5, 0.5) == 3
    assert keep_count(3, 0.1) == 1
    assert keep_count(4, 1.0) == 4
    assert keep_count(1, 0.2) == 1


def test_keep_all():
    outcome = keep_all(3)
    assert outcome.kept_indices == [0, 1, 2]
    assert outcome.weights == [1.0, 1.0, 1.0]
    assert outcome.strategy == "none"
    assert not outcome.fallback


def test_select_gaussian():
    values = [0.3, -1.2, 2.0, 0.1, 0.0, -0.4, 1.1, 5.0, -3.0, 0.7]
    rng = np.random.default_rng(1)
    outcome = select_gaussian(values, stats(), 0.5, rng)
    assert str(outcome) == "gaussian: kept 5 of 10"
    assert len(outcome.weights) == 10
    assert outcome.weights[4] == pytest.approx(0.398942, abs=1e-6)
    kept = outcome.kept_indices
    assert kept == sorted(set(kept))
    assert len(kept) == 5
    assert all(0 <= i < 10 for i in kept)
    assert select_gaussian(values, stats(), 0.5, np.random.default_rng(1)).kept_indices == kept

    # Keeping everything doesn't consume randomness
    state = rng.bit_generator.state
    everything = select_gaussian(values, stats(), 1.0, rng)
    assert everything.kept_indices == list(range(10))
    assert rng.bit_generator.state == state


def test_gaussian_favors_center():
    values = [10.0, 0.0, 10.0, 0.1, 10.0, -0.1, 10.0, 0.2, 10.0, -0.2]
    for seed in range(5):
        outcome = select_gaussian(values, stats(), 0.5, np.random.default_rng(seed))
        assert outcome.kept_indices == [1, 3, 5, 7, 9]

    # Center can be overridden (eg: fixed M0)
    outcome = select_gaussian(values, stats(), 0.5, np.random.default_rng(0), center=10.0)
    assert outcome.kept_indices == [0, 2, 4, 6, 8]

    # Statistically, closer to center means more often kept
    counts = np.zeros(4)
    for seed in range(1000):
        for i in select_gaussian([0.0, 1.0, 2.0, 3.0], stats(), 0.5, np.random.default_rng(seed)).kept_indices:
            counts[i] += 1

    assert counts[0] > counts[1] > counts[2] > counts[3]


def test_gaussian_contracts():
    k = keep_count(64, 0.8)
    counts = np.zeros(64)
    outlier_kept = 0
    for seed in range(10000):
        rng = np.random.default_rng(seed)
        kept = select_gaussian(np.zeros(64), stats(), 0.8, rng).kept_indices
        assert len(kept) == len(set(kept)) == k
        counts[kept] += 1

        values = np.append(rng.standard_normal(63), 10.0)
        outlier_kept += 63 in select_gaussian(values, stats(), 0.8, rng).kept_indices

    # Equal weights: each index kept with probability k / n, within 4 sigma of a binomial
    p = k / 64
    assert np.all(np.abs(counts / 10000 - p) < 4 * math.sqrt(p * (1 - p) / 10000))

    # A 10 sigma outlier is rarely kept
    assert outlier_kept / 10000 < 0.05


def test_gaussian_fallback(logged):
    outcome = select_gaussian([1e6, 2e6, 3e6], stats(), 0.5, np.random.default_rng(2))
    assert outcome.fallback
    assert outcome.weights == [0.0, 0.0, 0.0]
    assert len(outcome.kept_indices) == 2
    assert "All 3 gaussian weights underflowed to 0" in logged.pop()


def test_gaussian_bad_input():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidInput, match="empty batch"):
        select_gaussian([], stats(), 0.5, rng)

    with pytest.raises(InvalidInput, match="rho must be in"):
        select_gaussian([1.0], stats(), 0, rng)

    with pytest.raises(InvalidInput):
        select_gaussian([1.0], stats(), 1.5, rng)


def test_rank_order():
    assert rank_order([1.0, 3.0, 2.0, 3.0]).tolist() == [1, 3, 2, 0]


def test_select_rank():
    scores = [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
    assert select_rank(scores, HEAD).kept_indices == [2, 3, 4, 5, 6, 7, 8, 9]
    assert select_rank(scores, TAIL).kept_indices == [0, 1, 2, 3, 4, 5, 6, 7]
    assert select_rank(scores, TAIL_HEAD).kept_indices == [1, 2, 3, 4, 5, 6, 7, 8]
    assert select_rank(scores, HEAD, exclusion=0.0).kept_indices == list(range(10))

    outcome = select_rank(list(reversed(scores)), HEAD, exclusion=0.3)
    assert outcome.kept_indices == [0, 1, 2, 3, 4, 5, 6]
    assert outcome.weights == [float(v) for v in reversed(scores)]
    assert outcome.strategy == HEAD

    # Ties: lower index ranks first
    assert select_rank([1, 1, 1, 1], HEAD, exclusion=0.5).kept_indices == [2, 3]
    assert select_rank([1, 1, 1, 1], TAIL, exclusion=0.5).kept_indices == [0, 1]

    # At least one sample always survives
    assert select_rank([5.0], TAIL_HEAD, exclusion=0.9).kept_indices == [0]
    assert select_rank([3.0, 2.0], HEAD, exclusion=0.9).kept_indices == [1]

    with pytest.raises(InvalidInput, match="unknown rank strategy"):
        select_rank(scores, "middle")

    with pytest.raises(InvalidInput):
        select_rank([], HEAD)
