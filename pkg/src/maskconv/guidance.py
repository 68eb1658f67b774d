"""CTC loss over encoder outputs (log-space forward algorithm) and the joint
training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

# Finite stand-in for log(0): logsumexp over all -inf has a NaN gradient.
_NEG = -1e30


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be aligned to the given number of frames."""


def ctc_min_frames(labels: Sequence[int]) -> int:
    """Labels plus one separating blank per adjacent repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _logaddexp3(a, b, c):
    return torch.logsumexp(torch.stack([a, b, c]), dim=0)


def ctc_forward(log_probs: torch.Tensor, labels: Sequence[int], blank: int) -> torch.Tensor:
    """Negative log-likelihood of ``labels`` under per-frame ``log_probs``.

    ``log_probs`` is ``(T, C)`` and already log-normalised. Runs the
    alpha recursion over the blank-extended label sequence in log space.
    """
    labels = list(labels)
    n_frames = log_probs.shape[0]
    if ctc_min_frames(labels) > n_frames:
        raise CTCInfeasibleError(
            f"{len(labels)} labels need at least {ctc_min_frames(labels)} frames, got {n_frames}"
        )
    ext = [blank]
    for lab in labels:
        ext += [lab, blank]
    n_ext = len(ext)
    ext_t = torch.tensor(ext, dtype=torch.long)
    neg_inf = torch.tensor(_NEG, dtype=log_probs.dtype)
    # skip transition s-2 -> s allowed for a non-blank that differs from the
    # label two slots back
    allow_skip = torch.zeros(n_ext, dtype=torch.bool)
    for s in range(2, n_ext):
        allow_skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    emit = log_probs[:, ext_t]
    init = torch.full((n_ext,), _NEG, dtype=log_probs.dtype)
    init[0] = 0.0
    if n_ext > 1:
        init[1] = 0.0
    alpha = init + emit[0]
    for t in range(1, n_frames):
        stay = alpha
        step = torch.cat([neg_inf.reshape(1), alpha[:-1]])
        skip = torch.cat([neg_inf.expand(2), alpha[:-2]])[:n_ext]
        skip = torch.where(allow_skip, skip, neg_inf)
        alpha = _logaddexp3(stay, step, skip) + emit[t]
    tail = alpha[-2:] if n_ext > 1 else alpha[-1:]
    return -torch.logsumexp(tail, dim=0)


def ctc_loss(logits: torch.Tensor, labels: Sequence[int], blank: int | None = None) -> torch.Tensor:
    """CTC loss for one sequence; ``logits`` is ``(T, |A|+1)`` with blank last."""
    logits = torch.as_tensor(logits)
    if blank is None:
        blank = logits.shape[-1] - 1
    return ctc_forward(F.log_softmax(logits, dim=-1), labels, blank)


def ctc_batch_loss(logits: torch.Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]],
                   blank: int | None = None) -> torch.Tensor:
    """Mean CTC loss over the feasible sequences of a padded ``(B, T, C)`` batch.

    The recursion is vectorised over the batch; sequences whose labels do not
    fit into their frame count are left out of the mean.
    """
    if blank is None:
        blank = logits.shape[-1] - 1
    log_probs = F.log_softmax(logits, dim=-1)
    keep = [b for b in range(len(labels)) if 0 < len(labels[b]) and ctc_min_frames(labels[b]) <= lengths[b]]
    if not keep:
        return logits.sum() * 0.0
    dtype = log_probs.dtype
    n_ext = 2 * max(len(labels[b]) for b in keep) + 1
    n_batch = len(keep)
    ext = torch.full((n_batch, n_ext), blank, dtype=torch.long)
    allow_skip = torch.zeros((n_batch, n_ext), dtype=torch.bool)
    ext_len = torch.zeros(n_batch, dtype=torch.long)
    for row, b in enumerate(keep):
        labs = list(labels[b])
        ext[row, 1:2 * len(labs):2] = torch.tensor(labs, dtype=torch.long)
        ext_len[row] = 2 * len(labs) + 1
        for s in range(3, 2 * len(labs) + 1, 2):
            allow_skip[row, s] = labs[(s - 1) // 2] != labs[(s - 3) // 2]
    frames = torch.tensor([lengths[b] for b in keep], dtype=torch.long)
    lp = log_probs[keep]
    emit = lp.gather(2, ext[:, None, :].expand(-1, lp.shape[1], -1))
    neg_inf = torch.tensor(_NEG, dtype=dtype)
    valid_ext = torch.arange(n_ext)[None, :] < ext_len[:, None]

    init = torch.full((n_batch, n_ext), _NEG, dtype=dtype)
    init[:, :2] = 0.0
    alpha = torch.where(valid_ext, init + emit[:, 0], neg_inf)
    final = torch.full((n_batch, n_ext), _NEG, dtype=dtype)
    final = torch.where((frames == 1)[:, None], alpha, final)
    for t in range(1, int(frames.max())):
        step = F.pad(alpha[:, :-1], (1, 0), value=_NEG)
        skip = F.pad(alpha[:, :-2], (2, 0), value=_NEG)
        skip = torch.where(allow_skip, skip, neg_inf)
        new = torch.logsumexp(torch.stack([alpha, step, skip]), dim=0) + emit[:, t]
        alpha = torch.where(valid_ext, new, neg_inf)
        final = torch.where((frames == t + 1)[:, None], alpha, final)
    last = final.gather(1, (ext_len - 1)[:, None]).squeeze(1)
    second = final.gather(1, (ext_len - 2)[:, None]).squeeze(1)
    nll = -torch.logsumexp(torch.stack([last, second]), dim=0)
    return nll.mean()


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.2


def combine_losses(parts: dict, weights: LossWeights) -> torch.Tensor:
    """``dlm + beta1*dp + beta2*ctp + beta3*ctc``; missing terms count as 0."""
    total = parts["dlm"]
    for key, beta in (("dp", weights.beta1), ("ctp", weights.beta2), ("ctc", weights.beta3)):
        if key in parts and beta != 0.0:
            total = total + beta * parts[key]
    return total
