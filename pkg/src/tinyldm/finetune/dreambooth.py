"""Dreambooth: full denoiser fine-tuning bound to a rare token, with prior preservation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..data.corpus import Corpus, ImageTextPair, save_corpus
from ..data.vocab import split_words
from ..networks import ModelBundle
from ..scheduler import NoiseSchedule, SamplerConfig
from ..tensor.rng import RngStream
from .generate import generate
from .step import PromptFn, Trainable, TrainableSelector, fit, select_prefix


@dataclass
class DreamboothRun:
    instance_token: str = "beike"
    class_token: str = "bridge"
    class_images: Corpus | None = None
    prior_weight: float = 1.0
    class_per_instance: int = 5
    train_text_encoder: bool = False

    def __post_init__(self):
        if self.instance_token == self.class_token:
            raise ValueError("instance and class tokens must differ")

    @property
    def instance_prompt(self) -> str:
        return f"a {self.instance_token} {self.class_token}"

    @property
    def class_prompt(self) -> str:
        return f"a {self.class_token}"


def db_generate_class_images(bundle: ModelBundle, schedule: NoiseSchedule, class_prompt: str, count: int,
                             cfg: SamplerConfig, rng: RngStream, out_dir=None, batch: int = 25) -> Corpus:
    """Sample ``count`` class images from the frozen base model (optionally cached to ``out_dir``)."""
    if count < 1:
        raise ValueError("need at least one class image")
    if not bundle.meta.get("denoiser_steps"):
        raise ValueError("class images must come from a pretrained model")
    pairs = []
    for start in range(0, count, batch):
        n = min(batch, count - start)
        images = generate(bundle, schedule, class_prompt, {}, cfg, [rng.spawn(start + i) for i in range(n)])
        for i, img in enumerate(images):
            pairs.append(ImageTextPair(img, (class_prompt,), f"class_{start + i:04d}"))
    corpus = Corpus(pairs)
    if out_dir is not None:
        save_corpus(corpus, Path(out_dir))
    return corpus


def _check_token(bundle: ModelBundle, word: str, role: str) -> None:
    if len(split_words(word)) != 1 or word not in bundle.vocab or bundle.vocab.id(word) >= bundle.vocab.base_size:
        raise ValueError(f"{role} token {word!r} must be a single existing vocabulary token")


def db_selector(bundle: ModelBundle, train_text_encoder: bool = False) -> TrainableSelector:
    params = bundle.parameters()
    ids = select_prefix(params, "unet.")
    if train_text_encoder:
        ids |= select_prefix(params, "text.")
    return TrainableSelector("dreambooth", ids)


def _fixed(prompt: str) -> PromptFn:
    return lambda pair, rng: prompt


def finetune_plain(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, prompt: str, steps: int,
                   rng: RngStream, lr: float = 1e-5, batch_size: int = 4, train_text_encoder: bool = False):
    """Same update as Dreambooth with no prior term; returns (new bundle, losses)."""
    tuned = bundle.clone()
    trainable = Trainable(tuned.parameters(), db_selector(tuned, train_text_encoder))
    losses = fit(tuned, schedule, corpus, _fixed(prompt), trainable, steps, lr, rng, batch_size=batch_size)
    return tuned, losses


def db_train(bundle: ModelBundle, schedule: NoiseSchedule, instance_corpus: Corpus, run: DreamboothRun,
             steps: int, rng: RngStream, lr: float = 1e-5, batch_size: int = 4) -> tuple[ModelBundle, list[float]]:
    """Instance loss plus ``prior_weight`` times the class-image loss per step.

    Returns a fine-tuned copy of the whole bundle; ``bundle`` is left as is.
    """
    _check_token(bundle, run.instance_token, "instance")
    _check_token(bundle, run.class_token, "class")
    if run.class_images is None or len(run.class_images) == 0:
        raise ValueError("generate class images before Dreambooth training")
    tuned = bundle.clone()
    trainable = Trainable(tuned.parameters(), db_selector(tuned, run.train_text_encoder))
    losses = fit(tuned, schedule, instance_corpus, _fixed(run.instance_prompt), trainable, steps, lr, rng,
                 batch_size=batch_size, prior=(run.class_images, _fixed(run.class_prompt)),
                 prior_weight=run.prior_weight)
    tuned.meta["dreambooth"] = {"instance_token": run.instance_token, "class_token": run.class_token, "steps": steps}
    return tuned, losses
