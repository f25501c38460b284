"""Shared test oracles: finite differences and sphere sampling.

These stay deliberately independent of the library's own gradient and
loss code so they can serve as ground truth for it.
"""

import numpy as np


def fd_gradients(f, arrays, step=1e-5):
    """Central finite-difference gradients of scalar f w.r.t. each array.

    `f` is called as f(arrays) and must depend on the arrays' current
    contents; entries are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(arrays)
            flat[i] = orig - step
            f_minus = f(arrays)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(grad)
    return grads


def max_rel_err(analytic, numeric):
    """Largest elementwise deviation, relative with an absolute floor of 1."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def sampled_sphere_min(point, center, radius, n_samples, rng):
    """Minimum distance from `point` to uniform samples on a sphere."""
    directions = rng.normal(size=(n_samples, center.size))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    samples = center[None, :] + radius * directions
    return float(np.min(np.linalg.norm(samples - point[None, :], axis=1)))


def brute_distance_sum(output, target):
    """Reference success metric: per-frame L2 distances, summed over time."""
    return float(sum(np.linalg.norm(o - t) for o, t in zip(output, target)))
