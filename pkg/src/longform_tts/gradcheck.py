"""Central finite-difference gradient checks for the autograd ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .nnet import Tensor


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int = 24,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and numeric gradients.

    The output of ``fn`` is reduced to a scalar with fixed random weights.
    For each input, up to ``max_coords`` coordinates are perturbed by ``±h``;
    the error per input is ``|g_a - g_n| / max(|g_a|, |g_n|, floor)`` over
    those coordinates (vector norms).  The floor keeps gradients that are
    exactly zero (e.g. attention key biases) from turning roundoff into a
    relative error of one.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    weights = rng.normal(size=out.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * weights))

    out.backward(weights.astype(out.data.dtype))
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = scalar()
            flat[c] = orig - h
            down = scalar()
            flat[c] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst


def random_tensor(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, shape).astype(np.float64), requires_grad=True)
