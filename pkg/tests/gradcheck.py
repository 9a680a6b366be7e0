"""Central finite differences, kept apart from the autodiff code they check."""
from __future__ import annotations

import numpy as np

H = 1e-5


def numerical_grad(f, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """d f() / d array for each array, perturbing entries in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalised by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def sampled_grad_error(f, params, analytic, rng, count: int = 24, h: float = 1e-6) -> float:
    """Max relative error over ``count`` random coordinates drawn across all parameters.

    ``params`` are arrays perturbed in place, ``analytic`` their gradients.
    """
    sizes = np.array([p.size for p in params], float)
    picks = []
    for _ in range(count):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        picks.append((k, int(rng.integers(params[k].size))))
    a_vals, n_vals = [], []
    for k, i in picks:
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        n_vals.append((fp - fm) / (2 * h))
        a_vals.append(analytic[k].reshape(-1)[i])
    return max_rel_error(np.array(a_vals), np.array(n_vals))


def directional_grad_error(f, params, analytic, rng, directions: int = 3, h: float = 1e-6) -> float:
    """Max relative error of directional derivatives along random directions.

    Each direction has an independent Gaussian block per parameter array,
    normalised per array, so small arrays are not drowned out by large ones.
    """
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(p.shape) for p in params]
        vs = [v / np.linalg.norm(v) for v in vs]
        an = sum(float(np.sum(g * v)) for g, v in zip(analytic, vs))
        for p, v in zip(params, vs):
            p += h * v
        fp = f()
        for p, v in zip(params, vs):
            p -= 2 * h * v
        fm = f()
        for p, v in zip(params, vs):
            p += h * v
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-12))
    return worst
