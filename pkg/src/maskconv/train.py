"""Batching, noise draws, the joint objective and the two-stage training loop."""

from __future__ import annotations

import copy
import csv
import logging
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .corpus import source_aligned_target
from .ctp import ctp_loss
from .diffusion import MaskSchedule, bart_corrupt, dlm_loss
from .duration import flow_point, fm_loss
from .guidance import LossWeights, combine_losses, ctc_batch_loss
from .model import ConversionModel, backward, save_checkpoint
from .streams import stream
from .tokens import PairedSample, Vocab

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("stage", "epoch", "loss", "dlm", "dp", "ctp", "ctc")


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    src: torch.Tensor
    src_lens: list[int]
    labels: torch.Tensor
    latents: list[list[int]]
    tgt: torch.Tensor
    tgt_lens: list[int]
    ratio: torch.Tensor


@dataclass
class Draws:
    """All randomness one loss evaluation consumes."""

    lam: torch.Tensor  # (B,) masking rate
    masked: torch.Tensor  # (B, N) bool
    uncond: torch.Tensor  # (B,) bool, content block dropped
    fm_t: torch.Tensor  # (B,)
    u0: torch.Tensor  # (B,)


def _pad(rows: Sequence[Sequence[int]], value: int = 0) -> torch.Tensor:
    out = torch.full((len(rows), max(len(r) for r in rows)), value, dtype=torch.long)
    for b, r in enumerate(rows):
        out[b, :len(r)] = torch.tensor(list(r), dtype=torch.long)
    return out


def make_batch(sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
               labels: Sequence[Sequence[int]] | None, latents: Sequence[Sequence[int]],
               ratios: Sequence[float] | None = None) -> Batch:
    """``targets`` are what the decoder learns to produce; ``ratios`` default
    to ``len(target) / len(source)``."""
    if ratios is None:
        ratios = [len(t) / len(s) for s, t in zip(sources, targets)]
    lab = torch.zeros(len(sources), max(len(s) for s in sources))
    if labels is not None:
        for b, row in enumerate(labels):
            lab[b, :len(row)] = torch.tensor(list(row), dtype=torch.float32)
    return Batch(
        src=_pad(sources), src_lens=[len(s) for s in sources], labels=lab,
        latents=[list(x) for x in latents], tgt=_pad(targets), tgt_lens=[len(t) for t in targets],
        ratio=torch.tensor(list(ratios), dtype=torch.float64),
    )


def batch_from_samples(samples: Sequence[PairedSample]) -> Batch:
    return make_batch([s.source for s in samples], [s.target for s in samples],
                      [s.common_labels for s in samples], [s.latent_labels for s in samples])


def draw_noise(batch: Batch, rng: np.random.Generator, schedule: MaskSchedule,
               content_dropout: float = 0.0) -> Draws:
    B, N = batch.tgt.shape
    t = rng.random(B)
    lam = schedule.rate(t)
    masked = rng.random((B, N)) < lam[:, None]
    masked &= np.arange(N)[None, :] < np.asarray(batch.tgt_lens)[:, None]
    uncond = rng.random(B) < content_dropout
    return Draws(
        lam=torch.from_numpy(lam), masked=torch.from_numpy(masked), uncond=torch.from_numpy(uncond),
        fm_t=torch.from_numpy(rng.random(B)), u0=torch.from_numpy(rng.standard_normal(B)),
    )


def loss_parts(model: ConversionModel, batch: Batch, draws: Draws, pos_weight: float = 2.0,
               terms: Sequence[str] = ("dlm", "dp", "ctp", "ctc")) -> dict[str, torch.Tensor]:
    """Evaluate the requested loss terms with one shared encoder pass."""
    dtype = model.embed.weight.dtype
    content = model.encode_batch(batch.src, batch.src_lens)
    parts = {}
    if "ctc" in terms:
        parts["ctc"] = ctc_batch_loss(model.ctc_logits(content), batch.src_lens, batch.latents)
    if "ctp" in terms:
        scores = model.ctp_scores(content, batch.src, batch.src_lens)
        valid = torch.arange(batch.src.shape[1])[None] < torch.tensor(batch.src_lens)[:, None]
        parts["ctp"] = ctp_loss(scores, batch.labels.to(dtype), pos_weight, valid)
    if "dp" in terms:
        pooled = model.dp_pool(content, batch.src, batch.src_lens)
        r, u0, t = (x.to(dtype) for x in (batch.ratio, draws.u0, draws.fm_t))
        v = model.dp_velocity(pooled, flow_point(u0, r, t), t)
        parts["dp"] = fm_loss(v, u0, r, t)
    if "dlm" in terms:
        mask_id = model.vocab.mask_id
        z = torch.where(draws.masked, torch.full_like(batch.tgt, mask_id), batch.tgt)
        content_lens = [0 if u else n for u, n in zip(draws.uncond.tolist(), batch.src_lens)]
        logits = model.decode_batch(z, batch.tgt_lens, content, content_lens)
        parts["dlm"] = dlm_loss(logits, batch.tgt, draws.masked, draws.lam.to(dtype))
    return parts


def joint_loss(model: ConversionModel, batch: Batch, draws: Draws, weights: LossWeights,
               pos_weight: float = 2.0) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``L_dlm + beta1 L_dp + beta2 L_ctp + beta3 L_ctc`` and its parts.

    Raises :class:`TrainingError` naming the first non-finite component.
    """
    terms = ["dlm"] + [k for k, b in (("dp", weights.beta1), ("ctp", weights.beta2), ("ctc", weights.beta3))
                       if b != 0.0]
    parts = loss_parts(model, batch, draws, pos_weight, terms)
    for name, value in parts.items():
        if not bool(torch.isfinite(value)):
            raise TrainingError(f"non-finite {name} loss")
    return combine_losses(parts, weights), parts


def build_model(cfg: RunConfig) -> ConversionModel:
    torch.manual_seed(int(stream(cfg.seed, "init").integers(2**31)))
    return ConversionModel(cfg.model)


def _pretrain_batch(samples, rng, cfg: RunConfig, vocab: Vocab) -> Batch:
    sources = [bart_corrupt(s.target, rng, vocab, cfg.bart) for s in samples]
    return make_batch(sources, [s.target for s in samples], None, [s.latent_labels for s in samples])


def _finetune_batch(samples, rng, cfg: RunConfig) -> Batch:
    targets = []
    for s in samples:
        if rng.random() < cfg.train.aligned_target_prob:
            targets.append(source_aligned_target(s.source, s.target))
        else:
            targets.append(s.target)
    return make_batch([s.source for s in samples], targets, [s.common_labels for s in samples],
                      [s.latent_labels for s in samples], [s.ratio for s in samples])


def bucketed_batches(samples: Sequence[PairedSample], batch_size: int, rng: np.random.Generator,
                     pool: int = 8) -> list[np.ndarray]:
    """Shuffled batches of similar source length (sorted within pools of
    ``pool * batch_size`` shuffled samples) to limit padding."""
    order = rng.permutation(len(samples))
    batches = []
    span = pool * batch_size
    for start in range(0, len(order), span):
        group = order[start:start + span]
        group = group[np.argsort([len(samples[i].source) for i in group], kind="stable")]
        batches.extend(group[k:k + batch_size] for k in range(0, len(group), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def param_groups(model: ConversionModel, tc) -> list[dict]:
    """Duration head in its own group: it has its own learning rate and
    gradient clipping, so the much larger token-loss gradients do not
    starve it."""
    dp = [p for n, p in model.named_parameters() if n.startswith("dp_")]
    rest = [p for n, p in model.named_parameters() if not n.startswith("dp_")]
    return [{"params": rest, "lr": tc.lr}, {"params": dp, "lr": tc.dp_lr}]


def train(cfg: RunConfig, samples: Sequence[PairedSample], out_dir: str | os.PathLike | None = None,
          model: ConversionModel | None = None) -> tuple[ConversionModel, list[dict]]:
    """Pretrain on native targets with BART-corrupted sources, then fine-tune
    on the paired data. Writes ``metrics.csv`` and checkpoints under
    ``out_dir`` when given."""
    torch.use_deterministic_algorithms(True)
    model = model or build_model(cfg)
    tc = cfg.train
    groups = param_groups(model, tc)
    opt = torch.optim.Adam(groups, lr=tc.lr, betas=tuple(tc.adam_betas))
    schedule = MaskSchedule(tc.epsilon)
    vocab = cfg.model.vocab
    history: list[dict] = []
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    stage_weights = {
        "pretrain": LossWeights(0.0, 0.0, cfg.weights.beta3),
        "finetune": cfg.weights,
    }
    samples = list(samples)
    for stage, epochs in (("pretrain", tc.pretrain_epochs), ("finetune", tc.finetune_epochs)):
        weights = stage_weights[stage]
        for epoch in range(1, epochs + 1):
            tick = time.perf_counter()
            last_good = copy.deepcopy(model.state_dict())
            rng = stream(cfg.seed, f"train-{stage}", epoch)
            sums = {k: 0.0 for k in ("loss", "dlm", "dp", "ctp", "ctc")}
            n_batches = 0
            for idx in bucketed_batches(samples, tc.batch_size, rng):
                chunk = [samples[i] for i in idx]
                if stage == "pretrain":
                    batch = _pretrain_batch(chunk, rng, cfg, vocab)
                else:
                    batch = _finetune_batch(chunk, rng, cfg)
                draws = draw_noise(batch, rng, schedule, tc.content_dropout)
                opt.zero_grad(set_to_none=True)
                try:
                    total, parts = joint_loss(model, batch, draws, weights, tc.pos_weight)
                    backward(total, model)
                except Exception as exc:
                    model.load_state_dict(last_good)
                    if ckpt_dir is not None:
                        save_checkpoint(model, os.path.join(ckpt_dir, "last_good.ckpt"))
                    raise TrainingError(f"{stage} epoch {epoch}: {exc}") from exc
                if tc.grad_clip > 0:
                    for g in groups:
                        torch.nn.utils.clip_grad_norm_(g["params"], tc.grad_clip)
                opt.step()
                sums["loss"] += float(total.detach())
                for k, v in parts.items():
                    sums[k] += float(v.detach())
                n_batches += 1
            row = {"stage": stage, "epoch": epoch}
            row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
            history.append(row)
            log.info("%s epoch %d loss %.4f (dlm %.4f dp %.4f ctp %.4f ctc %.4f) %.1fs", stage, epoch,
                     row["loss"], row["dlm"], row["dp"], row["ctp"], row["ctc"], time.perf_counter() - tick)
            if out_dir is not None:
                write_metrics(history, os.path.join(out_dir, "metrics.csv"))
                save_checkpoint(model, os.path.join(ckpt_dir, "model.ckpt"))
    return model, history


def write_metrics(history: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


