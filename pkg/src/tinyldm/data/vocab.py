"""Whole-word vocabulary and tokenizer for comma-separated tag captions."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

# Scene tags, prompt/template words, and the instance/class and
# artifact-name words used by the four fine-tuning recipes.
DEFAULT_RESERVED = (
    "bridge", "outdoors", "cloud", "scenery", "sky", "car", "tree", "day", "road", "building", "water",
    "no", "humans", "reflection", "night",
    "a", "an", "the", "photo", "picture", "painting", "rendering", "of", "art", "by", "in", "style",
    "beike", "coral_shell_bridge", "aki", "arch", "truss", "suspension",
)

_PLACEHOLDER = re.compile(r"<[^<>]+>")
_SEPARATORS = re.compile(r"[,\s]+")


class TokenizeError(KeyError):
    pass


def _canonical_placeholder(text: str) -> str:
    return "<" + " ".join(text[1:-1].split()) + ">"


def split_words(prompt: str) -> list[str]:
    """Lowercase, keep ``<...>`` units whole, split everything else on commas/whitespace."""
    prompt = prompt.lower()
    words: list[str] = []
    pos = 0
    for m in _PLACEHOLDER.finditer(prompt):
        words.extend(w for w in _SEPARATORS.split(prompt[pos:m.start()]) if w)
        words.append(_canonical_placeholder(m.group()))
        pos = m.end()
    words.extend(w for w in _SEPARATORS.split(prompt[pos:]) if w)
    return words


def normalize_prompt(prompt: str) -> str:
    return " ".join(split_words(prompt))


class Vocab:
    """Dense token ids; specials first, placeholders appended after ``base_size``."""

    def __init__(self, tokens: Sequence[str], base_size: int | None = None):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.base_size = len(tokens) if base_size is None else base_size

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.base_size == other.base_size

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise TokenizeError(f"token {word!r} is not in the vocabulary") from None

    @property
    def placeholders(self) -> list[str]:
        return self.tokens[self.base_size:]

    def add_placeholder(self, word: str) -> int:
        word = _canonical_placeholder(word.lower()) if _PLACEHOLDER.fullmatch(word) else word.lower()
        if len(split_words(word)) != 1:
            raise ValueError(f"placeholder {word!r} must tokenize as one unit (wrap multi-word names in <...>)")
        if word in self.index:
            raise ValueError(f"placeholder {word!r} already in the vocabulary")
        self.index[word] = len(self.tokens)
        self.tokens.append(word)
        return self.index[word]

    def copy(self) -> Vocab:
        return Vocab(list(self.tokens), self.base_size)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "base_size": self.base_size}

    @classmethod
    def from_dict(cls, d: dict) -> Vocab:
        return cls(d["tokens"], d["base_size"])


def build_vocab(captions: Iterable[Sequence[str]], reserved: Sequence[str] = DEFAULT_RESERVED,
                size: int | None = None) -> Vocab:
    """Specials, then caption words in first-seen order, then reserved words.

    ``captions`` is an iterable of tag lists. With ``size`` the base vocabulary
    is padded with unused filler tokens to exactly that many entries.
    """
    tokens = list(SPECIALS)
    seen = set(tokens)
    n_captions = 0

    def push(word):
        if word not in seen:
            seen.add(word)
            tokens.append(word)

    for tags in captions:
        n_captions += 1
        for tag in tags:
            for w in split_words(tag):
                push(w)
    if n_captions == 0:
        raise ValueError("build_vocab needs at least one caption")
    for word in reserved:
        for w in split_words(word):
            push(w)
    if size is not None:
        if len(tokens) > size:
            raise ValueError(f"{len(tokens)} distinct words exceed vocabulary size {size}")
        tokens.extend(f"<unused{i}>" for i in range(size - len(tokens)))
    return Vocab(tokens)


def tokenize(vocab: Vocab, prompt: str, max_len: int = 16) -> np.ndarray:
    """Ids ``[bos, words..., eos, pad...]`` of length ``max_len`` (words truncated to fit)."""
    ids = [vocab.id(w) for w in split_words(prompt)]
    ids = [vocab.bos_id] + ids[: max_len - 2] + [vocab.eos_id]
    ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def detokenize(vocab: Vocab, ids) -> str:
    specials = {vocab.pad_id, vocab.bos_id, vocab.eos_id}
    return " ".join(vocab.tokens[i] for i in np.asarray(ids).tolist() if i not in specials)
