"""Synthetic paired corpus: native sequences expanded from latent symbols and
"accented" sources derived from them by substitution, lengthening and
filler insertion."""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .ctp import center_align, lcs_labels, lcs_matches
from .duration import resample_to
from .streams import stream
from .tokens import PairedSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AccentSpec:
    """One synthetic accent.

    ``substitutions`` maps accent-prone native tokens to marker tokens. All
    rates are multiplied by ``strength``.
    """

    id: int
    substitutions: dict[int, int] = field(default_factory=dict)
    sub_rate: float = 0.0
    lengthen_rate: float = 0.0
    lengthen_max: int = 2
    insert_rate: float = 0.0
    strength: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.lengthen_max < 1:
            raise ValueError("lengthen_max must be >= 1")
        if len(set(self.substitutions.values())) != len(self.substitutions):
            raise ValueError("substitution map must be injective")

    def with_strength(self, strength: float) -> "AccentSpec":
        return AccentSpec(self.id, dict(self.substitutions), self.sub_rate, self.lengthen_rate,
                          self.lengthen_max, self.insert_rate, strength)


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int
    latent_size: int
    # symbol -> list of (token, run length)
    expansions: tuple[tuple[tuple[int, int], ...], ...]
    latent_length: tuple[int, int]
    fillers: tuple[int, ...]
    accents: tuple[AccentSpec, ...]

    def __post_init__(self):
        if len(self.expansions) != self.latent_size:
            raise ValueError("need one expansion per latent symbol")
        native = self.native_tokens
        for acc in self.accents:
            images = set(acc.substitutions.values())
            if images & native:
                raise ValueError(f"accent {acc.id}: substitution images overlap native tokens")
            if not set(acc.substitutions) <= native:
                raise ValueError(f"accent {acc.id}: substitution keys must be native tokens")
        if set(self.fillers) & native:
            raise ValueError("filler tokens overlap native tokens")

    @property
    def native_tokens(self) -> set[int]:
        return {tok for exp in self.expansions for tok, _ in exp}

    @property
    def markers(self) -> set[int]:
        return {m for acc in self.accents for m in acc.substitutions.values()}

    def accent(self, accent_id: int) -> AccentSpec:
        for acc in self.accents:
            if acc.id == accent_id:
                return acc
        raise KeyError(f"no accent with id {accent_id}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["expansions"] = [[list(p) for p in exp] for exp in self.expansions]
        out["accents"] = [
            {**asdict(a), "substitutions": {str(k): v for k, v in sorted(a.substitutions.items())}}
            for a in self.accents
        ]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CorpusSpec":
        accents = tuple(
            AccentSpec(
                id=int(a["id"]),
                substitutions={int(k): int(v) for k, v in a.get("substitutions", {}).items()},
                sub_rate=float(a.get("sub_rate", 0.0)),
                lengthen_rate=float(a.get("lengthen_rate", 0.0)),
                lengthen_max=int(a.get("lengthen_max", 2)),
                insert_rate=float(a.get("insert_rate", 0.0)),
                strength=float(a.get("strength", 1.0)),
            )
            for a in data["accents"]
        )
        return cls(
            vocab_size=int(data["vocab_size"]),
            latent_size=int(data["latent_size"]),
            expansions=tuple(tuple((int(t), int(d)) for t, d in exp) for exp in data["expansions"]),
            latent_length=tuple(data["latent_length"]),
            fillers=tuple(int(f) for f in data["fillers"]),
            accents=accents,
        )


def load_corpus_spec(path: str | os.PathLike) -> CorpusSpec:
    with open(path, encoding="utf-8") as fh:
        return CorpusSpec.from_json(json.load(fh))


def save_corpus_spec(spec: CorpusSpec, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2)
        fh.write("\n")


def default_corpus_spec(seed: int = 1234) -> CorpusSpec:
    """V=64: tokens 0-31 build 16 two-run symbol expansions, 48-55 are
    fillers and 56-63 are accent markers. Accent 0 is native (identity)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(32)
    expansions = tuple(
        ((int(perm[2 * s]), int(rng.integers(1, 4))), (int(perm[2 * s + 1]), int(rng.integers(1, 4))))
        for s in range(16)
    )
    prone_symbols = rng.choice(16, size=8, replace=False)
    prone = [expansions[s][int(rng.integers(2))][0] for s in prone_symbols]
    markers = list(range(56, 64))
    accents = [AccentSpec(id=0, strength=0.0)]
    for acc_id in range(1, 7):
        n_sub = int(rng.integers(4, 7))
        keys = rng.choice(prone, size=n_sub, replace=False)
        images = rng.choice(markers, size=n_sub, replace=False)
        accents.append(AccentSpec(
            id=acc_id,
            substitutions={int(k): int(v) for k, v in zip(keys, images)},
            sub_rate=round(float(rng.uniform(0.5, 0.8)), 2),
            lengthen_rate=round(float(rng.uniform(0.15, 0.3)), 2),
            lengthen_max=int(rng.integers(2, 4)),
            insert_rate=round(float(rng.uniform(0.03, 0.08)), 2),
            strength=1.0,
        ))
    return CorpusSpec(
        vocab_size=64, latent_size=16, expansions=expansions, latent_length=(5, 20),
        fillers=tuple(range(48, 56)), accents=tuple(accents),
    )


def expand_latents(latents: Sequence[int], expansions) -> list[int]:
    out: list[int] = []
    for sym in latents:
        for tok, dur in expansions[sym]:
            out.extend([tok] * dur)
    return out


def gen_native(spec: CorpusSpec, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """A native token sequence and the latent symbols it realises.

    The latent count is uniform on ``spec.latent_length`` (inclusive).
    """
    lo, hi = spec.latent_length
    n = int(rng.integers(lo, hi + 1))
    latents = [int(x) for x in rng.integers(0, spec.latent_size, size=n)]
    return expand_latents(latents, spec.expansions), latents


def _runs(seq: Sequence[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for tok in seq:
        if runs and runs[-1][0] == tok:
            runs[-1] = (tok, runs[-1][1] + 1)
        else:
            runs.append((tok, 1))
    return runs


def apply_accent(native: Sequence[int], accent: AccentSpec, rng: np.random.Generator,
                 fillers: Sequence[int] = tuple(range(48, 56))) -> tuple[list[int], list[int]]:
    """Accented source and the 0-based source positions the accent touched.

    Works run by run: a run may be substituted wholesale, lengthened by
    ``1..lengthen_max`` repeats, and followed by one filler token. The
    random draws per run do not depend on ``strength``, so sweeping the
    strength with a fixed seed changes only which events fire.
    """
    s = accent.strength
    source: list[int] = []
    provenance: list[int] = []
    for tok, n in _runs(native):
        u_sub, u_len, u_ins = rng.random(3)
        extra_draw = int(rng.integers(1, accent.lengthen_max + 1))
        filler = int(fillers[int(rng.integers(len(fillers)))]) if len(fillers) else None
        substituted = tok in accent.substitutions and u_sub < accent.sub_rate * s
        extra = extra_draw if u_len < accent.lengthen_rate * s else 0
        m = n + extra
        start = len(source)
        source.extend([accent.substitutions[tok] if substituted else tok] * m)
        if substituted:
            provenance.extend(range(start, start + m))
        elif extra:
            provenance.extend(start + k for k, bit in enumerate(center_align(m, n)) if not bit)
        if filler is not None and u_ins < accent.insert_rate * s:
            provenance.append(len(source))
            source.append(filler)
    return source, provenance


def annotate(source: Sequence[int], native: Sequence[int], provenance: Sequence[int] = ()) -> list[int]:
    """Common-token labels; logs provenance positions that still got label 1."""
    labels = lcs_labels(source, native)
    clash = [p for p in provenance if labels[p]]
    if clash:
        log.debug("LCS marked %d accent-touched positions as common: %s", len(clash), clash)
    return labels


@dataclass(frozen=True)
class GenSample:
    sample: PairedSample
    provenance: tuple[int, ...]


def generate_sample(spec: CorpusSpec, accent: AccentSpec, rng: np.random.Generator) -> GenSample:
    native, latents = gen_native(spec, rng)
    source, provenance = apply_accent(native, accent, rng, spec.fillers)
    labels = annotate(source, native, provenance)
    sample = PairedSample(tuple(source), tuple(native), tuple(labels), tuple(latents), accent.id)
    return GenSample(sample, tuple(provenance))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return stream(seed, "corpus", index)


def generate_corpus(spec: CorpusSpec, n: int, seed: int) -> list[GenSample]:
    """``n`` samples, each from its own RNG stream; accents drawn uniformly."""
    out = []
    for idx in range(n):
        rng = sample_rng(seed, idx)
        accent = spec.accents[int(rng.integers(len(spec.accents)))]
        out.append(generate_sample(spec, accent, rng))
    return out


def split_by_latents(samples: Sequence[PairedSample], heldout_percent: int = 10):
    """Deterministic train/held-out split keyed on the latent sequence, so
    identical latent content never lands on both sides."""
    train, held = [], []
    for s in samples:
        key = zlib.crc32(np.asarray(s.latent_labels, dtype=np.int32).tobytes()) % 100
        (held if key < heldout_percent else train).append(s)
    return train, held


def source_aligned_target(src: Sequence[int], tgt: Sequence[int]) -> list[int]:
    """Native content laid out on the source timeline.

    LCS anchors keep their position; the target tokens between two anchors
    are nearest-interpolated onto the source gap, and a gap with no target
    tokens is filled by extending the neighbouring anchor tokens.
    """
    src, tgt = list(src), list(tgt)
    anchors = lcs_matches(src, tgt)
    if not anchors:
        return resample_to(tgt, len(src))
    out = [0] * len(src)
    bounds = [(-1, -1)] + anchors + [(len(src), len(tgt))]
    for (i0, j0), (i1, j1) in zip(bounds, bounds[1:]):
        if 0 <= i0:
            out[i0] = tgt[j0]
        gap_s = i1 - i0 - 1
        if gap_s <= 0:
            continue
        gap_t = tgt[j0 + 1:j1]
        if gap_t:
            out[i0 + 1:i1] = resample_to(gap_t, gap_s)
        else:
            left = tgt[j0] if j0 >= 0 else tgt[j1]
            right = tgt[j1] if j1 < len(tgt) else tgt[j0]
            half = (gap_s + 1) // 2
            out[i0 + 1:i1] = [left] * half + [right] * (gap_s - half)
    return out
