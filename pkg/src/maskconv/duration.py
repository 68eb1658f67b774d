"""Duration-ratio flow matching, target-length resampling and the two-way
guidance combination."""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import numpy as np
import torch

RATIO_MIN = 0.25
RATIO_MAX = 4.0


class RatioSamplingError(RuntimeError):
    pass


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def fm_loss(v_pred, u0, r, t):
    """Squared error between predicted velocity and the straight-path velocity
    ``r - u0``; tensors are averaged over their elements."""
    if torch.is_tensor(t):
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError("flow time must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    err = (v_pred - (r - u0)) ** 2
    if torch.is_tensor(err):
        return err.mean()
    return float(err)


def flow_point(u0, r, t):
    """Point on the straight path from noise ``u0`` (t=0) to ``r`` (t=1)."""
    return (1 - t) * u0 + t * r


def euler_integrate(velocity: Callable, u0, steps: int):
    """Integrate ``du/dt = velocity(u, t)`` from t=0 to t=1 in ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = u0
    dt = 1.0 / steps
    for k in range(steps):
        u = u + dt * velocity(u, k * dt)
        if torch.is_tensor(u):
            finite = bool(torch.isfinite(u).all())
        else:
            finite = bool(np.all(np.isfinite(u)))
        if not finite:
            raise RatioSamplingError(f"non-finite flow state at step {k + 1}/{steps}")
    return u


def predict_ratio(model, src: Sequence[int], steps: int = 16, rng: np.random.Generator | None = None,
                  content: torch.Tensor | None = None, n_samples: int = 1) -> float | np.ndarray:
    """Sample duration ratios for one source sequence.

    Returns a float when ``n_samples == 1`` and an array otherwise. Results
    are clamped to ``[RATIO_MIN, RATIO_MAX]``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with torch.no_grad():
        src_t = torch.tensor([list(src)], dtype=torch.long)
        if content is None:
            content = model.encode_batch(src_t)
        elif content.dim() == 2:
            content = content[None]
        pooled = model.dp_pool(content, src_t)
        dtype = pooled.dtype
        pooled = pooled.expand(n_samples, -1)
        u0 = torch.from_numpy(rng.standard_normal(n_samples)).to(dtype)

        def velocity(u, t):
            return model.dp_velocity(pooled, u, torch.full_like(u, t))

        u1 = euler_integrate(velocity, u0, steps)
    out = np.clip(u1.double().numpy(), RATIO_MIN, RATIO_MAX)
    return float(out[0]) if n_samples == 1 else out


def target_length(n_src: int, r: float) -> int:
    if n_src < 1:
        raise ValueError("source length must be >= 1")
    if not r > 0:
        raise ValueError(f"duration ratio must be positive, got {r}")
    n_tgt = round_half_away(n_src * r)
    if n_tgt < 1:
        warnings.warn(f"target length round({n_src}*{r}) is 0; using 1", stacklevel=2)
        n_tgt = 1
    return n_tgt


def interpolation_index(j: int, n_src: int, n_tgt: int) -> int:
    """1-based nearest source index for 1-based target position ``j``.

    Evaluates ``round((j - 1/2) * n_src / n_tgt + 1/2)`` in exact integer
    arithmetic with ties away from zero.
    """
    num = (2 * j - 1) * n_src + n_tgt
    den = 2 * n_tgt
    return (2 * num + den) // (2 * den)


def resample_length(n_src: int, r: float) -> tuple[int, list[int]]:
    """Target length and the 1-based source index used for each target slot."""
    n_tgt = target_length(n_src, r)
    return n_tgt, [interpolation_index(j, n_src, n_tgt) for j in range(1, n_tgt + 1)]


def resample_to(seq: Sequence[int], n_out: int) -> list[int]:
    """Nearest-interpolate ``seq`` to ``n_out`` positions."""
    n_in = len(seq)
    return [seq[interpolation_index(j, n_in, n_out) - 1] for j in range(1, n_out + 1)]


def twoway_cfg(v, v_no_a, v_no_b, w1: float, w2: float):
    """``v + w1 (v - v_no_a) + w2 (v - v_no_b)``."""
    return v + w1 * (v - v_no_a) + w2 * (v - v_no_b)
