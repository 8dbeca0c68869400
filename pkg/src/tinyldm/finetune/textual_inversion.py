"""Textual Inversion: one new vocabulary row, trained with every other weight frozen."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data.corpus import Corpus
from ..data.templates import SUBJECT_TEMPLATES
from ..data.vocab import split_words
from ..networks import ModelBundle
from ..scheduler import NoiseSchedule
from ..tensor.rng import RngStream
from .step import EMBEDDING, Trainable, TrainableSelector, fit, templated


@dataclass
class TiArtifact:
    placeholder: str
    token_id: int
    vectors: np.ndarray  # [n_vectors, d_txt]
    init_word: str = ""

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float32))
        if self.vectors.shape[0] < 1:
            raise ValueError("a textual-inversion artifact needs at least one vector")


def ti_extend_vocab(bundle: ModelBundle, placeholder: str, init_word: str) -> tuple[int, TiArtifact]:
    """Append ``placeholder`` to the vocabulary with a copy of ``init_word``'s embedding row."""
    words = split_words(init_word)
    if len(words) != 1 or words[0] not in bundle.vocab:
        raise ValueError(f"init word {init_word!r} must be exactly one known token, got {words}")
    init_row = bundle.text_encoder.token_embedding.data[bundle.vocab.id(words[0])].copy()
    token_id = bundle.vocab.add_placeholder(placeholder)
    (row_id,) = bundle.text_encoder.append_rows(init_row[None])
    assert row_id == token_id, "vocabulary and embedding table out of step"
    word = bundle.vocab.tokens[token_id]
    return token_id, TiArtifact(word, token_id, init_row[None], words[0])


def ti_apply(bundle: ModelBundle, artifact: TiArtifact) -> int:
    """Make ``artifact`` usable in prompts for ``bundle``; returns its id there."""
    if artifact.placeholder in bundle.vocab:
        token_id = bundle.vocab.id(artifact.placeholder)
        bundle.text_encoder.token_embedding.data[token_id] = artifact.vectors[0]
        return token_id
    token_id = bundle.vocab.add_placeholder(artifact.placeholder)
    bundle.text_encoder.append_rows(artifact.vectors[:1])
    return token_id


def ti_selector(bundle: ModelBundle, placeholder: str) -> TrainableSelector:
    if placeholder not in bundle.vocab:
        raise KeyError(f"placeholder {placeholder!r} is not in the vocabulary; call ti_extend_vocab first")
    return TrainableSelector("textual_inversion", {EMBEDDING}, mask_row=bundle.vocab.id(placeholder))


def ti_train(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, placeholder: str, steps: int,
             rng: RngStream, lr: float = 5e-3, batch_size: int = 8, templates=SUBJECT_TEMPLATES,
             grad_hook=None) -> tuple[TiArtifact, list[float]]:
    """Train the placeholder row in place on ``bundle``; captions come from subject templates."""
    selector = ti_selector(bundle, placeholder)
    word = bundle.vocab.tokens[selector.mask_row]
    trainable = Trainable(bundle.parameters(), selector)
    losses = fit(bundle, schedule, corpus, templated(templates, word), trainable, steps, lr, rng,
                 batch_size=batch_size, grad_hook=grad_hook)
    vec = bundle.text_encoder.token_embedding.data[selector.mask_row].copy()
    return TiArtifact(word, selector.mask_row, vec[None]), losses
