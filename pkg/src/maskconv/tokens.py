"""Token vocabularies, sequences and the JSON-lines paired corpus format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class CorpusFormatError(ValueError):
    """A corpus line could not be parsed into a paired sample."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


@dataclass(frozen=True)
class Vocab:
    """Content ids ``0..size-1`` followed by MASK, START, TASK and END."""

    size: int = 64

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size

    @property
    def start_id(self) -> int:
        return self.size + 1

    @property
    def task_id(self) -> int:
        return self.size + 2

    @property
    def end_id(self) -> int:
        return self.size + 3

    @property
    def num_embeddings(self) -> int:
        return self.size + 4

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.size

    def seq(self, ids: Iterable[int], allow_mask: bool = False) -> "TokenSeq":
        return TokenSeq(tuple(int(i) for i in ids), self, allow_mask=allow_mask)


@dataclass(frozen=True)
class TokenSeq:
    """Immutable token sequence; ids are content ids or (optionally) the mask id."""

    ids: tuple[int, ...]
    vocab: Vocab = field(default_factory=Vocab, compare=False, repr=False)
    allow_mask: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValueError("token sequence must be non-empty")
        for pos, tok in enumerate(self.ids):
            if self.vocab.is_content(tok):
                continue
            if self.allow_mask and tok == self.vocab.mask_id:
                continue
            raise VocabularyError(
                f"token id {tok} at position {pos} outside vocabulary of size {self.vocab.size}"
            )

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, idx):
        return self.ids[idx]

    @property
    def num_masked(self) -> int:
        return sum(1 for t in self.ids if t == self.vocab.mask_id)


@dataclass(frozen=True)
class PairedSample:
    """A source/target pair with common-token labels and latent (CTC) labels."""

    source: tuple[int, ...]
    target: tuple[int, ...]
    common_labels: tuple[int, ...]
    latent_labels: tuple[int, ...]
    accent: int | None = None

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("source and target must be non-empty")
        if len(self.common_labels) != len(self.source):
            raise ValueError(
                f"common_labels length {len(self.common_labels)} != source length {len(self.source)}"
            )
        if any(b not in (0, 1) for b in self.common_labels):
            raise ValueError("common_labels must be binary")

    @property
    def ratio(self) -> float:
        return len(self.target) / len(self.source)

    def validate(self, vocab: Vocab) -> None:
        vocab.seq(self.source)
        vocab.seq(self.target)


def _sample_to_record(sample: PairedSample) -> dict:
    record = {
        "src": list(sample.source),
        "tgt": list(sample.target),
        "labels": list(sample.common_labels),
        "latents": list(sample.latent_labels),
    }
    if sample.accent is not None:
        record["accent"] = sample.accent
    return record


def _int_list(record: dict, key: str, lineno: int, path: str) -> tuple[int, ...]:
    if key not in record:
        raise CorpusFormatError(f"missing key {key!r}", lineno, path)
    value = record[key]
    if not isinstance(value, list) or any(
        isinstance(v, bool) or not isinstance(v, int) for v in value
    ):
        raise CorpusFormatError(f"key {key!r} must be a list of integers", lineno, path)
    return tuple(value)


def parse_record(line: str, vocab: Vocab, lineno: int = 1, path: str = "<string>") -> PairedSample:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid JSON ({exc.msg})", lineno, path) from None
    if not isinstance(record, dict):
        raise CorpusFormatError("record must be a JSON object", lineno, path)
    src = _int_list(record, "src", lineno, path)
    tgt = _int_list(record, "tgt", lineno, path)
    labels = _int_list(record, "labels", lineno, path)
    latents = _int_list(record, "latents", lineno, path)
    accent = record.get("accent")
    if accent is not None and (isinstance(accent, bool) or not isinstance(accent, int)):
        raise CorpusFormatError("key 'accent' must be an integer", lineno, path)
    try:
        sample = PairedSample(src, tgt, labels, latents, accent)
        sample.validate(vocab)
    except VocabularyError as exc:
        raise VocabularyError(f"{path}:{lineno}: {exc}") from None
    except ValueError as exc:
        raise CorpusFormatError(str(exc), lineno, path) from None
    return sample


def read_corpus(path: str | os.PathLike, vocab: Vocab | None = None) -> list[PairedSample]:
    """Read a JSON-lines corpus, validating every record against ``vocab``.

    Blank lines are ignored. Raises :class:`CorpusFormatError` (with the
    1-based line number) for malformed records and :class:`VocabularyError`
    for out-of-range token ids.
    """
    vocab = vocab or Vocab()
    path = os.fspath(path)
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            samples.append(parse_record(line, vocab, lineno, path))
    return samples


def format_record(sample: PairedSample) -> str:
    return json.dumps(_sample_to_record(sample), separators=(",", ":"))


def write_corpus(samples: Sequence[PairedSample], path: str | os.PathLike) -> None:
    path = os.fspath(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for sample in samples:
                fh.write(format_record(sample))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed to write corpus to {path}: {exc}") from exc
