"""Subword vocabulary construction and greedy longest-match encoding.

The vocabulary holds five fixed specials followed by whole words and
character/continuation pieces ordered by descending corpus frequency
(ties broken lexicographically). Continuation pieces carry the "##"
marker. Every single character seen often enough is included in both
bare and "##" form so segmentation can never stall on known text.
"""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, InputError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = [PAD, UNK, CLS, SEP, MASK]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONT = "##"


class Vocab:
    """Immutable token table; ids are dense 0..N-1 with specials at 0-4."""

    def __init__(self, tokens: list[str]):
        if tokens[:5] != SPECIALS:
            raise FormatError(f"first five tokens must be {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def save(self, path: str | Path) -> None:
        from .io_utils import atomic_write_text

        atomic_write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 5:
            raise FormatError(f"vocabulary file {path} has fewer than 5 lines")
        return cls(lines)


@dataclass
class TokenSequence:
    """One encoded post: fixed length, [CLS] first, one [SEP], then padding."""

    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    source_span: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def normalize(text: str) -> list[tuple[str, int, int]]:
    """Lowercase + NFC, split on whitespace, isolate punctuation.

    Returns (word, start, end) with offsets into the normalized text.
    """
    norm = unicodedata.normalize("NFC", text).lower()
    words: list[tuple[str, int, int]] = []
    start = None
    for i, ch in enumerate(norm):
        if ch.isspace():
            if start is not None:
                words.append((norm[start:i], start, i))
                start = None
        elif unicodedata.category(ch).startswith("P"):
            if start is not None:
                words.append((norm[start:i], start, i))
                start = None
            words.append((ch, i, i + 1))
        else:
            if start is None:
                start = i
    if start is not None:
        words.append((norm[start:], start, len(norm)))
    return words


def build_vocab(corpus: Iterable[str], target_size: int, min_freq: int = 1) -> Vocab:
    """Frequency-ranked vocabulary of whole words plus character pieces."""
    if target_size <= 5:
        raise InputError(f"target_size must exceed 5 to fit the specials, got {target_size}")
    if min_freq < 1:
        raise InputError(f"min_freq must be positive, got {min_freq}")
    word_freq: Counter[str] = Counter()
    char_freq: Counter[str] = Counter()
    for line in corpus:
        for word, _, _ in normalize(line):
            word_freq[word] += 1
            for ch in word:
                char_freq[ch] += 1
    if not word_freq:
        raise InputError("corpus is empty: no tokens to build a vocabulary from")

    candidates: dict[str, int] = {}
    for word, freq in word_freq.items():
        if freq >= min_freq:
            candidates[word] = max(candidates.get(word, 0), freq)
    for ch, freq in char_freq.items():
        if freq >= min_freq:
            for piece in (ch, CONT + ch):
                candidates[piece] = max(candidates.get(piece, 0), freq)

    ranked = sorted(candidates.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: target_size - 5]]
    return Vocab(SPECIALS + kept)


def wordpiece_split(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first segmentation; unmatchable words become [UNK]."""
    if word in vocab:
        return [word]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONT + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def encode(text: str, vocab: Vocab, max_len: int, keep: str = "head") -> TokenSequence:
    """Normalize, segment, truncate to max_len-2 content tokens, wrap and pad."""
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    if keep not in ("head", "tail"):
        raise ConfigError(f"keep must be 'head' or 'tail', got {keep!r}")

    pieces: list[tuple[str, int, int]] = []
    for word, start, end in normalize(text):
        for piece in wordpiece_split(word, vocab):
            pieces.append((piece, start, end))
    if len(pieces) > max_len - 2:
        pieces = pieces[: max_len - 2] if keep == "head" else pieces[-(max_len - 2):]

    ids = [CLS_ID] + [vocab.id_of[p] for p, _, _ in pieces] + [SEP_ID]
    spans = [(-1, -1)] + [(s, e) for _, s, e in pieces] + [(-1, -1)]
    content = len(ids)
    ids += [PAD_ID] * (max_len - content)
    spans += [(-1, -1)] * (max_len - content)
    mask = [1] * content + [0] * (max_len - content)
    return TokenSequence(
        ids=np.array(ids, dtype=np.int64),
        attention_mask=np.array(mask, dtype=np.int64),
        segment_ids=np.zeros(max_len, dtype=np.int64),
        source_span=spans,
    )


def decode(ids, vocab: Vocab) -> str:
    """Drop specials, merge continuation pieces, join words with single spaces."""
    words: list[str] = []
    for i in np.asarray(ids).tolist():
        if not 0 <= i < len(vocab):
            raise InputError(f"token id {i} out of range [0, {len(vocab)})")
        tok = vocab.tokens[i]
        if tok in SPECIALS:
            continue
        if tok.startswith(CONT):
            if words:
                words[-1] += tok[len(CONT):]
            else:
                words.append(tok[len(CONT):])  # orphan continuation: drop the marker
        else:
            words.append(tok)
    return " ".join(words)
