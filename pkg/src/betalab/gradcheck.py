"""
Finite-difference checks of analytic gradients, used to verify policy and loss derivatives.
"""

import logging

import numpy as np

LOG = logging.getLogger(__name__)


def central_differences(func, x, eps=1e-5, probes=None):
    """
    Args:
        func (callable): Scalar function of one float64 array (same shape as 'x')
        x (np.ndarray): Point where to evaluate the gradient, temporarily perturbed in place and restored
        eps (float): Step size
        probes (Iterable[int] | None): Flat indices to probe (default: all)

    Returns:
        (np.ndarray): Centered finite-difference gradient of 'func' at 'x', same shape as 'x' (0 where not probed)
    """
    flat = x.reshape(-1)
    if probes is None:
        probes = range(flat.size)

    grad = np.zeros(x.shape, dtype=np.float64)
    flat_grad = grad.reshape(-1)
    count = 0
    for j in probes:
        original = flat[j]
        flat[j] = original + eps
        fplus = func(x)
        flat[j] = original - eps
        fminus = func(x)
        flat[j] = original
        flat_grad[j] = (fplus - fminus) / (2 * eps)
        count += 1

    LOG.debug("Finite differences over %s of %s coordinates, eps=%s", count, flat.size, eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """
    Args:
        analytic (np.ndarray): Gradient computed in closed form
        numeric (np.ndarray): Gradient estimated by central_differences()
        floor (float): Denominator floor, avoids blowing up on near-zero entries

    Returns:
        (float): Worst per-entry relative error, max |a - n| / max(|a|, |n|, floor)
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
