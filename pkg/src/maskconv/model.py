"""Token encoder, common-token and duration heads, and the two-block
bidirectional decoder.

Gradients come from torch autograd; :func:`backward` adds the gradient-buffer
contract (every parameter ends with a finite, same-shape ``.grad``).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokens import Vocab

# packed-sequence slot kinds
PAD, START, CONTENT, TASK, TOKEN, END = range(6)


class ContractError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    latent_size: int = 16
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ctp_layers: int = 1
    dp_layers: int = 1
    ff_mult: int = 4
    dp_hidden: int = 256  # width of the duration velocity MLP
    max_rel_dist: int = 32
    rope_base: float = 10000.0
    rope_layout: str = "aligned"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.rope_layout not in ("packed", "aligned"):
            raise ValueError(f"unknown rope_layout {self.rope_layout!r}")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def rope_tables(positions: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables ``(B, 1, L, head_dim)`` for real-valued positions ``(B, L)``."""
    inv_freq = base ** (-torch.arange(0, head_dim // 2, dtype=torch.float64) / (head_dim // 2))
    angles = positions.to(torch.float64)[..., None] * inv_freq
    angles = torch.cat([angles, angles], dim=-1)[:, None]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + rotate_half(x) * sin


class RelativeBias(nn.Module):
    """Learned per-head additive bias indexed by clipped key-query offset."""

    def __init__(self, n_heads: int, max_dist: int):
        super().__init__()
        self.max_dist = max_dist
        self.table = nn.Embedding(2 * max_dist + 1, n_heads)
        nn.init.normal_(self.table.weight, std=0.1)

    def forward(self, length: int) -> torch.Tensor:
        pos = torch.arange(length)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_dist, self.max_dist) + self.max_dist
        return self.table(rel).permute(2, 0, 1)[None]


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, allowed, bias=None, rope=None):
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if rope is not None:
            q, k = apply_rope(q, *rope), apply_rope(k, *rope)
        if bias is None:
            mask = allowed[:, None]
        else:
            mask = bias.masked_fill(~allowed[:, None], float("-inf"))
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(y.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model)
        )

    def forward(self, x, allowed, bias=None, rope=None):
        x = x + self.attn(self.ln1(x), allowed, bias, rope)
        return x + self.ff(self.ln2(x))


class RelStack(nn.Module):
    """Bidirectional blocks with relative position bias over padded sequences."""

    def __init__(self, cfg: ModelConfig, n_layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.ff_mult) for _ in range(n_layers))
        self.biases = nn.ModuleList(RelativeBias(cfg.n_heads, cfg.max_rel_dist) for _ in range(n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x, valid):
        L = x.shape[1]
        eye = torch.eye(L, dtype=torch.bool)[None]
        allowed = (valid[:, None, :] & valid[:, :, None]) | eye
        for block, bias in zip(self.blocks, self.biases):
            x = block(x, allowed, bias=bias(L))
        return self.norm(x)


@dataclass
class PackedLayout:
    kind: torch.Tensor  # (B, L) slot kinds
    content_index: torch.Tensor  # (B, L)
    token_index: torch.Tensor  # (B, L)
    positions: torch.Tensor  # (B, L) rotary positions
    token_slots: torch.Tensor  # (B, Nmax) packed index of each token, padded with 0


def pack_layout(content_lens: Sequence[int], token_lens: Sequence[int], layout: str) -> PackedLayout:
    """Slot map for ``[START] content [TASK] tokens [END]`` per sequence."""
    B = len(token_lens)
    L = max(s + n + 3 for s, n in zip(content_lens, token_lens))
    n_max = max(token_lens)
    kind = np.zeros((B, L), dtype=np.int64)
    cidx = np.zeros((B, L), dtype=np.int64)
    tidx = np.zeros((B, L), dtype=np.int64)
    pos = np.zeros((B, L), dtype=np.float64)
    slots = np.zeros((B, n_max), dtype=np.int64)
    for b, (s, n) in enumerate(zip(content_lens, token_lens)):
        kind[b, 0] = START
        kind[b, 1:1 + s] = CONTENT
        cidx[b, 1:1 + s] = np.arange(s)
        kind[b, 1 + s] = TASK
        kind[b, 2 + s:2 + s + n] = TOKEN
        tidx[b, 2 + s:2 + s + n] = np.arange(n)
        kind[b, 2 + s + n] = END
        slots[b, :n] = np.arange(2 + s, 2 + s + n)
        pos[b, :s + n + 3] = np.arange(s + n + 3)
        if layout == "aligned" and s > 0:
            # token j sits at the continuous source coordinate it interpolates from
            pos[b, 2 + s:2 + s + n] = 0.5 + (np.arange(n) + 0.5) * s / n
            pos[b, 2 + s + n] = s + 2
    return PackedLayout(
        torch.from_numpy(kind), torch.from_numpy(cidx), torch.from_numpy(tidx),
        torch.from_numpy(pos), torch.from_numpy(slots),
    )


def two_block_mask(kind: torch.Tensor) -> torch.Tensor:
    """Allowed-attention matrix ``(B, L, L)``.

    START and content slots see only START and content; every other valid
    slot sees the whole valid input. Padding rows see only themselves.
    """
    valid = kind != PAD
    cond_block = (kind == START) | (kind == CONTENT)
    allowed = valid[:, None, :] & (~cond_block[:, :, None] | cond_block[:, None, :])
    allowed = allowed & valid[:, :, None]
    eye = torch.eye(kind.shape[1], dtype=torch.bool)[None]
    return allowed | (eye & ~valid[:, :, None])


class ConversionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        vocab = cfg.vocab
        self.vocab = vocab
        self.embed = nn.Embedding(vocab.num_embeddings, d)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.encoder = RelStack(cfg, cfg.enc_layers)
        self.ctc_head = nn.Linear(d, cfg.latent_size + 1)

        self.ctp_in = nn.Linear(2 * d, d)
        self.ctp_stack = RelStack(cfg, cfg.ctp_layers)
        self.ctp_out = nn.Linear(d, 1)

        self.dp_in = nn.Linear(2 * d, d)
        self.dp_stack = RelStack(cfg, cfg.dp_layers)
        self.dp_query = nn.Parameter(torch.zeros(d))
        self.dp_key = nn.Linear(d, d)
        h = cfg.dp_hidden
        self.dp_mlp = nn.Sequential(
            nn.Linear(d + 3, h), nn.GELU(), nn.Linear(h, h), nn.GELU(), nn.Linear(h, 1)
        )

        self.content_proj = nn.Linear(d, d)
        self.dec_blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, vocab.size)

    # -- encoder side -----------------------------------------------------

    def encode_batch(self, src: torch.Tensor, lengths: Sequence[int] | None = None) -> torch.Tensor:
        """Content features ``(B, S, d)`` for padded source ids ``(B, S)``."""
        B, S = src.shape
        valid = _valid_mask(lengths, B, S)
        return self.encoder(self.embed(src), valid)

    def encode(self, src: Sequence[int]) -> torch.Tensor:
        """Content features ``(S, d)`` for one source sequence without masks."""
        ids = list(src)
        if not ids:
            raise ContractError("cannot encode an empty sequence")
        if any(not self.vocab.is_content(t) for t in ids):
            raise ContractError("encoder input must contain only content tokens (no mask id)")
        with torch.no_grad():
            return self.encode_batch(torch.tensor([ids]))[0]

    def ctc_logits(self, content: torch.Tensor) -> torch.Tensor:
        return self.ctc_head(content)

    def _fuse(self, proj, stack, content, src, lengths):
        B, S = src.shape
        valid = _valid_mask(lengths, B, S)
        x = proj(torch.cat([content, self.embed(src)], dim=-1))
        return stack(x, valid), valid

    def ctp_scores(self, content, src, lengths=None) -> torch.Tensor:
        """Common-token probabilities ``(B, S)``."""
        h, _ = self._fuse(self.ctp_in, self.ctp_stack, content, src, lengths)
        return torch.sigmoid(self.ctp_out(h).squeeze(-1))

    def dp_pool(self, content, src, lengths=None) -> torch.Tensor:
        """Attentive pooling with one learned query; ``(B, d)``."""
        h, valid = self._fuse(self.dp_in, self.dp_stack, content, src, lengths)
        scores = self.dp_key(h) @ self.dp_query / math.sqrt(h.shape[-1])
        scores = scores.masked_fill(~valid, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return (weights[..., None] * h).sum(1)

    def dp_velocity(self, pooled, u, t) -> torch.Tensor:
        feats = torch.stack([u, t, torch.sin(math.pi * t)], dim=-1).to(pooled.dtype)
        return self.dp_mlp(torch.cat([pooled, feats], dim=-1)).squeeze(-1)

    # -- decoder side -----------------------------------------------------

    def decode_batch(self, z: torch.Tensor, token_lens: Sequence[int], content: torch.Tensor | None,
                     content_lens: Sequence[int] | None, return_hidden: bool = False):
        """Logits ``(B, Nmax, V)`` for padded tokens ``z`` ``(B, Nmax)``.

        ``content_lens[b] == 0`` (or ``content is None``) drops the content
        block for that row, giving the unconditional branch.
        """
        B = z.shape[0]
        if content is None:
            content_lens = [0] * B
            content = torch.zeros(B, 1, self.cfg.d_model, dtype=self.embed.weight.dtype)
        lay = pack_layout(list(content_lens), list(token_lens), self.cfg.rope_layout)
        kind = lay.kind
        c = self.content_proj(content)
        c_at = c.gather(1, lay.content_index[..., None].expand(-1, -1, c.shape[-1]).clamp_max(c.shape[1] - 1))
        tok_ids = z.gather(1, lay.token_index.clamp_max(z.shape[1] - 1))
        special = torch.full_like(kind, self.vocab.start_id)
        special = torch.where(kind == TASK, self.vocab.task_id, special)
        special = torch.where(kind == END, self.vocab.end_id, special)
        ids = torch.where(kind == TOKEN, tok_ids, special)
        x = self.embed(ids)
        x = torch.where((kind == CONTENT)[..., None], c_at, x)
        x = torch.where((kind == PAD)[..., None], torch.zeros_like(x), x)

        allowed = two_block_mask(kind)
        rope = rope_tables(lay.positions, self.cfg.d_model // self.cfg.n_heads, self.cfg.rope_base, x.dtype)
        for block in self.dec_blocks:
            x = block(x, allowed, rope=rope)
        x = self.dec_norm(x)
        tok_h = x.gather(1, lay.token_slots[..., None].expand(-1, -1, x.shape[-1]))
        logits = self.lm_head(tok_h)
        if return_hidden:
            return logits, x, lay
        return logits

    def decode(self, z: Sequence[int], content: torch.Tensor | None) -> torch.Tensor:
        """Logits ``(N, V)`` for one (possibly masked) token sequence, without autograd."""
        ids = list(z)
        for t in ids:
            if not (self.vocab.is_content(t) or t == self.vocab.mask_id):
                raise ContractError(f"decoder input id {t} is neither content nor mask")
        z_t = torch.tensor([ids])
        with torch.no_grad():
            if content is None:
                return self.decode_batch(z_t, [len(ids)], None, None)[0]
            return self.decode_batch(z_t, [len(ids)], content[None], [content.shape[0]])[0]


def _valid_mask(lengths, B: int, S: int) -> torch.Tensor:
    if lengths is None:
        return torch.ones(B, S, dtype=torch.bool)
    return torch.arange(S)[None, :] < torch.as_tensor(list(lengths))[:, None]


def cfg_combine(cond_logits, uncond_logits, w: float):
    """``(1 + w) * cond - w * uncond`` in logit space."""
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    if cond_logits.shape != uncond_logits.shape:
        raise ValueError("conditional and unconditional logits differ in shape")
    if w == 0:
        return cond_logits
    return (1 + w) * cond_logits - w * uncond_logits


def backward(loss: torch.Tensor, model: nn.Module) -> None:
    """Backpropagate ``loss`` and leave a finite ``.grad`` on every parameter."""
    if loss.requires_grad:
        loss.backward()
    for name, p in model.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradientError(name)


# -- checkpoint format ------------------------------------------------------

MAGIC = b"MASKCONV"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def save_checkpoint(model: ConversionModel, path: str | os.PathLike) -> None:
    header = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            code, np_dt = _DTYPES[tensor.dtype]
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, tensor.dim()))
            fh.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            fh.write(tensor.detach().contiguous().numpy().astype(np_dt, copy=False).tobytes())


def load_checkpoint(path: str | os.PathLike) -> ConversionModel:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig(**json.loads(fh.read(header_len)))
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype, np_dt = _CODES[code]
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * np.dtype(np_dt).itemsize), dtype=np_dt)
            state[name] = torch.from_numpy(data.reshape(shape).copy())
    model = ConversionModel(cfg)
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    model.load_state_dict(state)
    return model
