"""Greedy confidence-ordered unmasking with source-token reuse."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .duration import interpolation_index, predict_ratio, target_length
from .model import cfg_combine
from .streams import stream

REUSE_MODES = ("threshold", "proportion", "random", "none")


class ConversionError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    tau: float = 1.0
    cfg_weight: float = 1.0
    reuse_mode: str = "threshold"
    proportion: float = 0.0
    seed: int = 0
    dp_steps: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.reuse_mode not in REUSE_MODES:
            raise ValueError(f"reuse_mode must be one of {REUSE_MODES}")
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError("proportion must lie in [0, 1]")


@dataclass
class StepRecord:
    step: int
    positions: list[int]
    confidences: list[float]


@dataclass
class SamplerTrace:
    reused: list[int]  # 0-based source indices selected for reuse
    k: int = 0
    t_eff: int = 0
    s0: int = 0
    steps: list[StepRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "reused": self.reused, "K": self.k, "T_eff": self.t_eff, "s0": self.s0,
            "steps": [{"step": r.step, "positions": r.positions, "confidences": r.confidences}
                      for r in self.steps],
        }


@dataclass
class InitResult:
    z0: list[int]
    reused: list[int]
    index_map: list[int]  # 1-based source index per target slot


def schedule(n_tgt: int, n_mask: int, steps: int) -> tuple[int, int, int]:
    """Tokens per step ``K``, effective step count and the start step ``s0``."""
    k = math.ceil(n_tgt / steps)
    t_eff = math.ceil(n_mask / k)
    return k, t_eff, max(1, steps - t_eff + 1)


def reuse_set(scores: Sequence[float], cfg: SamplerConfig, rng: np.random.Generator | None = None) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if cfg.reuse_mode == "none":
        return []
    if cfg.reuse_mode == "threshold":
        return [int(i) for i in np.flatnonzero(scores > cfg.tau)]
    size = math.ceil(cfg.proportion * n)
    if cfg.reuse_mode == "proportion":
        order = np.argsort(-scores, kind="stable")
        return sorted(int(i) for i in order[:size])
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return sorted(int(i) for i in rng.choice(n, size=size, replace=False))


def init_target(src: Sequence[int], scores: Sequence[float], r: float, cfg: SamplerConfig,
                mask_id: int, rng: np.random.Generator | None = None) -> InitResult:
    """Nearest-interpolate the source onto the target length, keeping only
    source tokens in the reuse set and masking everything else."""
    src = list(src)
    if len(scores) != len(src):
        raise ValueError("need one score per source token")
    n_tgt = target_length(len(src), r)
    reused = reuse_set(scores, cfg, rng)
    keep = set(reused)
    index_map = [interpolation_index(j, len(src), n_tgt) for j in range(1, n_tgt + 1)]
    z0 = [src[i - 1] if (i - 1) in keep else mask_id for i in index_map]
    return InitResult(z0, reused, index_map)


def greedy_sample_batch(z0s: Sequence[Sequence[int]], model, cfg: SamplerConfig, mask_id: int,
                        content: torch.Tensor | None = None,
                        content_lens: Sequence[int] | None = None) -> tuple[list[list[int]], list[SamplerTrace]]:
    """Run the greedy sampler on several initial sequences at once.

    Each row follows its own schedule; a decode call only includes rows that
    still have masked positions. ``model`` needs a ``decode_batch`` method.
    """
    B = len(z0s)
    z = [list(row) for row in z0s]
    lens = [len(row) for row in z]
    traces = []
    for row in z:
        n_mask = sum(1 for t in row if t == mask_id)
        k, t_eff, s0 = schedule(len(row), n_mask, cfg.steps)
        traces.append(SamplerTrace(reused=[], k=k, t_eff=t_eff if n_mask else 0, s0=s0))
    if content_lens is None and content is not None:
        content_lens = [content.shape[1]] * B

    it = 0
    while True:
        active = [b for b in range(B) if it < traces[b].t_eff]
        if not active:
            break
        n_max = max(lens[b] for b in active)
        zt = torch.zeros(len(active), n_max, dtype=torch.long)
        for row, b in enumerate(active):
            zt[row, :lens[b]] = torch.tensor(z[b])
        tok_lens = [lens[b] for b in active]
        with torch.no_grad():
            if content is None:
                logits = model.decode_batch(zt, tok_lens, None, None)
            elif cfg.cfg_weight == 0:
                logits = model.decode_batch(zt, tok_lens, content[active], [content_lens[b] for b in active])
            else:
                both = model.decode_batch(
                    torch.cat([zt, zt]), tok_lens + tok_lens, torch.cat([content[active]] * 2),
                    [content_lens[b] for b in active] + [0] * len(active),
                )
                logits = cfg_combine(both[:len(active)], both[len(active):], cfg.cfg_weight)
            probs = torch.softmax(logits.double(), dim=-1)
            conf, pred = probs.max(dim=-1)
        for row, b in enumerate(active):
            masked = [j for j in range(lens[b]) if z[b][j] == mask_id]
            c = conf[row, masked].numpy()
            order = np.argsort(-c, kind="stable")[:min(traces[b].k, len(masked))]
            chosen = sorted(masked[o] for o in order)
            for j in chosen:
                z[b][j] = int(pred[row, j])
            traces[b].steps.append(StepRecord(
                step=traces[b].s0 + it,
                positions=chosen,
                confidences=[float(conf[row, j]) for j in chosen],
            ))
        it += 1
    return z, traces


def greedy_sample(z0: Sequence[int], model, cfg: SamplerConfig, mask_id: int,
                  content: torch.Tensor | None = None) -> tuple[list[int], SamplerTrace]:
    """Single-sequence form of :func:`greedy_sample_batch`; ``content`` is ``(S, d)``."""
    c = None if content is None else content[None]
    out, traces = greedy_sample_batch([z0], model, cfg, mask_id, c)
    return out[0], traces[0]


@dataclass
class Conversion:
    tokens: list[int]
    ratio: float
    scores: np.ndarray
    init: InitResult
    trace: SamplerTrace


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConversionError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise ConversionError(name, exc) from exc


def convert_batch(srcs: Sequence[Sequence[int]], model, cfg: SamplerConfig, ratio="1.0",
                  indices: Sequence[int] | None = None) -> list[Conversion]:
    """Encode, score, choose a length, initialise and sample for each source.

    ``ratio`` is a positive number, ``"auto"`` (duration predictor) or
    ``"1.0"``/``"source"`` (keep the source length). ``indices`` name the
    per-sample random streams and default to batch positions.
    """
    indices = list(indices) if indices is not None else list(range(len(srcs)))
    mask_id = model.vocab.mask_id
    lens = [len(s) for s in srcs]
    src_t = torch.zeros(len(srcs), max(lens), dtype=torch.long)
    for b, s in enumerate(srcs):
        src_t[b, :len(s)] = torch.tensor(list(s))
    for s in srcs:
        if any(not model.vocab.is_content(t) for t in s):
            raise ConversionError("encode", ValueError("source contains non-content ids"))
    with torch.no_grad():
        content = _stage("encode", model.encode_batch, src_t, lens)
        scores = _stage("score", model.ctp_scores, content, src_t, lens).double().numpy()

    inits, ratios = [], []
    for b, s in enumerate(srcs):
        if ratio == "auto":
            r = _stage("ratio", predict_ratio, model, s, cfg.dp_steps, stream(cfg.seed, "ratio", indices[b]),
                       content[b, :lens[b]])
        elif ratio in ("source", "1.0"):
            r = 1.0
        else:
            r = float(ratio)
        ratios.append(r)
        inits.append(_stage("init", init_target, s, scores[b, :lens[b]], r, cfg, mask_id,
                            stream(cfg.seed, "reuse", indices[b])))
    outs, traces = _stage("sample", greedy_sample_batch, [i.z0 for i in inits], model, cfg, mask_id,
                          content, lens)
    result = []
    for b in range(len(srcs)):
        traces[b].reused = inits[b].reused
        result.append(Conversion(outs[b], ratios[b], scores[b, :lens[b]], inits[b], traces[b]))
    return result


def convert(src: Sequence[int], model, cfg: SamplerConfig, ratio="1.0") -> Conversion:
    return convert_batch([src], model, cfg, ratio)[0]
