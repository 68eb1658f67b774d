"""Absorbing-mask corruption, the reweighted masked-diffusion loss and
BART-style source corruption used for pretraining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tokens import TokenSeq, Vocab


@dataclass(frozen=True)
class MaskSchedule:
    """Linear masking rate ``lambda(t) = (1 - eps) * t + eps``."""

    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def rate(self, t):
        return (1.0 - self.epsilon) * t + self.epsilon


@dataclass(frozen=True)
class CorruptedSeq:
    z: TokenSeq
    masked: tuple[int, ...]
    lam: float
    t: float

    @property
    def mask_array(self) -> np.ndarray:
        out = np.zeros(len(self.z), dtype=bool)
        out[list(self.masked)] = True
        return out


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time t must lie in [0, 1], got {t}")


def mask_positions(length: int, t: float, schedule: MaskSchedule, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with each of ``length`` positions masked w.p. ``lambda(t)``."""
    _check_t(t)
    lam = schedule.rate(t)
    return rng.random(length) < lam


def corrupt(y0: TokenSeq, t: float, schedule: MaskSchedule, rng: np.random.Generator) -> CorruptedSeq:
    masked = mask_positions(len(y0), t, schedule, rng)
    mask_id = y0.vocab.mask_id
    z = [mask_id if m else tok for tok, m in zip(y0.ids, masked)]
    return CorruptedSeq(
        z=y0.vocab.seq(z, allow_mask=True),
        masked=tuple(int(i) for i in np.flatnonzero(masked)),
        lam=float(schedule.rate(t)),
        t=float(t),
    )


def dlm_loss(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Masked-diffusion cross-entropy with ``1/lambda`` reweighting.

    ``logits`` is ``(B, N, V)``, ``targets`` and ``masked`` are ``(B, N)`` and
    ``lam`` is ``(B,)``. Unbatched inputs (no leading ``B``) are accepted.
    The weighted sum over masked positions is divided by the total number of
    masked tokens in the batch; a batch without masked tokens yields 0.
    """
    if logits.dim() == 2:
        logits, targets, masked = logits[None], targets[None], masked[None]
        lam = torch.as_tensor(lam, dtype=logits.dtype).reshape(1)
    lam = torch.as_tensor(lam, dtype=logits.dtype)
    masked = masked.bool()
    n_masked = masked.sum()
    if int(n_masked) == 0:
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.clamp_min(0).long().unsqueeze(-1)).squeeze(-1)
    weighted = torch.where(masked, nll, torch.zeros_like(nll)) / lam[:, None]
    return weighted.sum() / n_masked


def sequence_dlm_loss(logits: torch.Tensor, y0: TokenSeq, corrupted: CorruptedSeq) -> torch.Tensor:
    """Single-sequence convenience wrapper around :func:`dlm_loss`."""
    targets = torch.tensor(y0.ids)
    masked = torch.from_numpy(corrupted.mask_array)
    return dlm_loss(logits, targets, masked, torch.tensor([corrupted.lam], dtype=logits.dtype))


@dataclass(frozen=True)
class BartRates:
    """Fractions of input positions hit by each corruption.

    Masked spans have Poisson(``span_mean``) lengths (at least 1) and each span
    collapses to a single mask token, as in BART text infilling.
    """

    mask: float = 0.3
    delete: float = 0.1
    substitute: float = 0.1
    span_mean: float = 3.0

    def __post_init__(self):
        for name in ("mask", "delete", "substitute"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} rate must lie in [0, 1], got {value}")
        if self.mask + self.delete + self.substitute > 1.0 + 1e-12:
            raise ValueError("corruption rates must sum to at most 1")


def bart_corrupt_ops(length: int, rates: BartRates, rng: np.random.Generator) -> np.ndarray:
    """Per-position operation codes: 0 keep, 1 mask (span), 2 delete, 3 substitute."""
    ops = np.zeros(length, dtype=np.int8)
    n_mask = int(round(rates.mask * length))
    covered = 0
    while covered < n_mask:
        free = np.flatnonzero(ops == 0)
        start = int(free[rng.integers(len(free))])
        span = max(1, int(rng.poisson(rates.span_mean)))
        for pos in range(start, min(length, start + span)):
            if covered >= n_mask:
                break
            if ops[pos] == 0:
                ops[pos] = 1
                covered += 1
    rest = 1.0 - rates.mask
    if rest > 0:
        u = rng.random(length)
        p_del = rates.delete / rest
        p_sub = rates.substitute / rest
        free = ops == 0
        ops[free & (u < p_del)] = 2
        ops[free & (u >= p_del) & (u < p_del + p_sub)] = 3
    return ops


def bart_corrupt(y: Sequence[int], rng: np.random.Generator, vocab: Vocab | None = None,
                 rates: BartRates | None = None) -> list[int]:
    """Span masking, deletion and substitution; output length may differ.

    Consecutive masked positions collapse to one mask token. At least one
    token always survives.
    """
    vocab = vocab or Vocab()
    rates = rates or BartRates()
    y = list(y)
    if not y:
        raise ValueError("cannot corrupt an empty sequence")
    ops = bart_corrupt_ops(len(y), rates, rng)
    subs = rng.integers(0, vocab.size, size=len(y))
    out: list[int] = []
    for pos, (tok, op) in enumerate(zip(y, ops)):
        if op == 0:
            out.append(tok)
        elif op == 1:
            if pos == 0 or ops[pos - 1] != 1:
                out.append(vocab.mask_id)
        elif op == 3:
            out.append(int(subs[pos]))
    if not out:
        keep = int(rng.integers(len(y)))
        out.append(y[keep])
    return out
