"""Common-token labels from the longest common subsequence, and the common
token predictor loss and scoring."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

SCORE_CLAMP = 1e-6


def lcs_table(a: Sequence[int], b: Sequence[int]) -> np.ndarray:
    """``(len(a)+1, len(b)+1)`` table of LCS lengths of prefixes.

    Each row is filled at once: ``dp[i, j]`` is the running maximum over
    ``k <= j`` of ``max(dp[i-1, k], dp[i-1, k-1] + [a[i-1] == b[k-1]])``.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int32)
    if len(a) == 0 or len(b) == 0:
        return dp
    for i in range(1, len(a) + 1):
        prev = dp[i - 1]
        cand = np.maximum(prev[1:], prev[:-1] + (b == a[i - 1]))
        dp[i, 1:] = np.maximum.accumulate(cand)
    return dp


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    return int(lcs_table(a, b)[-1, -1])


def center_align(src_run_len: int, tgt_run_len: int) -> list[int]:
    """Mark the centred ``min(m, n)`` positions of a source run of length ``m``.

    Leftover zeros are split between both ends; an odd leftover puts the
    extra zero on the right.
    """
    if src_run_len < 1 or tgt_run_len < 1:
        raise ValueError("run lengths must be >= 1")
    ones = min(src_run_len, tgt_run_len)
    zeros = src_run_len - ones
    left = zeros // 2
    return [0] * left + [1] * ones + [0] * (zeros - left)


def _runs(seq: Sequence[int]) -> np.ndarray:
    """Run id of every position (consecutive identical tokens share an id)."""
    ids = np.zeros(len(seq), dtype=np.int64)
    for pos in range(1, len(seq)):
        ids[pos] = ids[pos - 1] + (seq[pos] != seq[pos - 1])
    return ids


def _backtrack(a: Sequence[int], b: Sequence[int], dp: np.ndarray) -> list[tuple[int, int]]:
    # On ties the target index moves first, which keeps source matches as
    # late as possible.
    i, j = len(a), len(b)
    pairs = []
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1]:
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
        elif dp[i, j - 1] >= dp[i - 1, j]:
            j -= 1
        else:
            i -= 1
    pairs.reverse()
    return pairs


def lcs_matches(src: Sequence[int], tgt: Sequence[int]) -> list[tuple[int, int]]:
    """Matched ``(source, target)`` index pairs of an LCS after run centring.

    When a source run is matched only against a single target run (and that
    target run only against it) and the two runs differ in length, the
    matches are replaced by the centred ``min(m, n)`` positions of each run.
    """
    src = list(src)
    tgt = list(tgt)
    if not src or not tgt:
        return []
    pairs = _backtrack(src, tgt, lcs_table(src, tgt))
    src_run, tgt_run = _runs(src), _runs(tgt)
    partners_of_src: dict[int, set[int]] = {}
    partners_of_tgt: dict[int, set[int]] = {}
    for i, j in pairs:
        partners_of_src.setdefault(int(src_run[i]), set()).add(int(tgt_run[j]))
        partners_of_tgt.setdefault(int(tgt_run[j]), set()).add(int(src_run[i]))

    src_pos = {}
    for pos, rid in enumerate(src_run):
        src_pos.setdefault(int(rid), []).append(pos)
    tgt_pos = {}
    for pos, rid in enumerate(tgt_run):
        tgt_pos.setdefault(int(rid), []).append(pos)

    out: list[tuple[int, int]] = []
    done: set[int] = set()
    for i, j in pairs:
        rs, rt = int(src_run[i]), int(tgt_run[j])
        exclusive = partners_of_src[rs] == {rt} and partners_of_tgt[rt] == {rs}
        if not exclusive:
            out.append((i, j))
            continue
        if rs in done:
            continue
        done.add(rs)
        s_positions, t_positions = src_pos[rs], tgt_pos[rt]
        m, n = len(s_positions), len(t_positions)
        s_keep = [p for p, bit in zip(s_positions, center_align(m, n)) if bit]
        t_keep = [p for p, bit in zip(t_positions, center_align(n, m)) if bit]
        out.extend(zip(s_keep, t_keep))
    return out


def lcs_labels(src: Sequence[int], tgt: Sequence[int]) -> list[int]:
    """Binary common-token label per source position."""
    bits = [0] * len(src)
    for i, _ in lcs_matches(src, tgt):
        bits[i] = 1
    return bits


def ctp_loss(scores, labels, pos_weight: float = 2.0, mask=None) -> torch.Tensor:
    """Positive-weighted binary cross-entropy averaged over source positions.

    With a ``(B, S)`` batch and a padding ``mask``, each sequence is averaged
    over its own valid positions and the batch result is the mean of those.
    """
    scores = torch.as_tensor(scores, dtype=torch.float64 if not torch.is_tensor(scores) else None)
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {tuple(scores.shape)} != labels shape {tuple(labels.shape)}")
    p = scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    per_pos = -(pos_weight * labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    if mask is None:
        return per_pos.mean()
    mask = mask.to(per_pos.dtype)
    per_seq = (per_pos * mask).sum(-1) / mask.sum(-1).clamp_min(1.0)
    return per_seq.mean()


def score_ctp(src: Sequence[int], model, content=None) -> np.ndarray:
    """Common-token probabilities for one source sequence.

    ``content`` may be passed to reuse features already produced by the
    encoder; otherwise the encoder is run here.
    """
    with torch.no_grad():
        src_t = torch.tensor([list(src)], dtype=torch.long)
        if content is None:
            content = model.encode_batch(src_t)
        elif content.dim() == 2:
            content = content[None]
        scores = model.ctp_scores(content, src_t)
    return scores[0].double().numpy()
