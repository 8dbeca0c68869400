"""The shared noise-prediction training step and the generic training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..data.corpus import Corpus, ImageTextPair
from ..data.templates import template_prompt
from ..data.vocab import tokenize
from ..networks import AdapterSet, ModelBundle, predict_noise
from ..networks.vae import encode_image, sample_latent
from ..scheduler import NoiseSchedule, add_noise, timestep_embeddings
from ..tensor import NonFiniteError, Tensor, backward, mean, squared_error
from ..tensor.optim import AdamState, adam_step, mask_embedding_gradient
from ..tensor.rng import RngStream

log = logging.getLogger(__name__)

METHODS = ("pretrain", "textual_inversion", "dreambooth", "hypernetwork", "lora")
EMBEDDING = "text.token_embedding"


@dataclass
class TrainableSelector:
    """Which parameters a method may update; ``mask_row`` restricts the embedding table to one row."""

    method: str
    ids: frozenset[str]
    mask_row: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.ids = frozenset(self.ids)


@dataclass
class Trainable:
    """Parameters visible to one training run: the bundle registry plus adapter tensors."""

    params: dict[str, Tensor]
    selector: TrainableSelector
    hooks: AdapterSet | None = None
    state: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        unknown = sorted(self.selector.ids - set(self.params))
        if unknown:
            raise KeyError(f"selector references unknown parameter ids: {unknown}")

    def activate(self) -> None:
        for name, p in self.params.items():
            p.requires_grad = name in self.selector.ids


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over every axis of (pred - target)**2."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    return mean(squared_error(pred, target))


def diffusion_loss(bundle: ModelBundle, schedule: NoiseSchedule, images: np.ndarray, token_ids: np.ndarray,
                   rng: RngStream, hooks: AdapterSet | None = None) -> Tensor:
    """Encode, scale, noise at uniform timesteps, predict the noise, return the MSE."""
    mu, logvar = encode_image(bundle.vae, images)
    latents = (sample_latent(mu, logvar, rng.spawn(0)) * schedule.latent_scale).astype(np.float32)
    noise = rng.spawn(1).normal(latents.shape)
    timesteps = rng.spawn(2).integers(0, schedule.train_timesteps, (latents.shape[0],))
    noisy = add_noise(schedule, latents, noise, timesteps)
    context, mask = bundle.text_encoder(token_ids)
    temb = timestep_embeddings(timesteps, bundle.config.time_dim)
    pred = predict_noise(bundle.denoiser, Tensor(noisy), Tensor(temb), context, mask, hooks)
    return mse_loss(pred, noise)


Batch = tuple[np.ndarray, np.ndarray]


def train_step(bundle: ModelBundle, schedule: NoiseSchedule, batch: Batch, trainable: Trainable, rng: RngStream,
               lr: float, prior_batch: Batch | None = None, prior_weight: float = 1.0,
               grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None) -> float:
    """One optimizer step on ``batch`` (plus a weighted prior-preservation batch). Returns the loss."""
    trainable.activate()
    loss = diffusion_loss(bundle, schedule, *batch, rng.spawn(0), trainable.hooks)
    if prior_batch is not None:
        loss = loss + diffusion_loss(bundle, schedule, *prior_batch, rng.spawn(1), trainable.hooks) * prior_weight
    grads = backward(loss)
    grads = {k: g for k, g in grads.items() if k in trainable.selector.ids}
    row = trainable.selector.mask_row
    if row is not None and EMBEDDING in grads:
        grads[EMBEDDING] = mask_embedding_gradient(grads[EMBEDDING], row)
    if grad_hook is not None:
        grad_hook(grads)
    adam_step({k: trainable.params[k] for k in grads}, grads, trainable.state, lr)
    for p in trainable.params.values():
        p.grad = None
    return loss.item()


PromptFn = Callable[[ImageTextPair, RngStream], str]


def caption_prompt(pair: ImageTextPair, rng: RngStream) -> str:
    return ", ".join(pair.caption)


def templated(templates: Sequence[str], name: str) -> PromptFn:
    def fn(pair: ImageTextPair, rng: RngStream) -> str:
        return template_prompt(templates[int(rng.integers(0, len(templates)))], pair, name)

    return fn


def draw_batch(bundle: ModelBundle, corpus: Corpus, prompt_fn: PromptFn, batch_size: int, rng: RngStream,
               uncond_prob: float = 0.0) -> Batch:
    n = len(corpus)
    idx = np.sort(rng.spawn(0).choice(n, size=min(batch_size, n), replace=False))
    prompts = []
    for k, i in enumerate(idx):
        prng = rng.spawn(1 + k)
        text = "" if uncond_prob and prng.uniform() < uncond_prob else prompt_fn(corpus[i], prng)
        prompts.append(text)
    ids = np.stack([tokenize(bundle.vocab, p, bundle.config.max_len) for p in prompts])
    return corpus.images(idx), ids


def fit(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, prompt_fn: PromptFn, trainable: Trainable,
        steps: int, lr: float, rng: RngStream, batch_size: int = 8, uncond_prob: float = 0.0,
        prior: tuple[Corpus, PromptFn] | None = None, prior_weight: float = 1.0,
        grad_hook=None, log_every: int = 100) -> list[float]:
    """Run ``steps`` train steps; every step's randomness derives from ``rng.spawn(step)``."""
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    losses: list[float] = []
    for step in range(steps):
        srng = rng.spawn(step)
        batch = draw_batch(bundle, corpus, prompt_fn, batch_size, srng.spawn(0), uncond_prob)
        prior_batch = None
        if prior is not None:
            prior_batch = draw_batch(bundle, prior[0], prior[1], batch_size, srng.spawn(2))
        try:
            loss = train_step(bundle, schedule, batch, trainable, srng.spawn(1), lr, prior_batch, prior_weight, grad_hook)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{trainable.selector.method}: non-finite value at step {step}: {exc}") from exc
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("%s step %d/%d loss %.5f", trainable.selector.method, step + 1, steps, float(np.mean(losses[-log_every:])))
    for p in trainable.params.values():
        p.requires_grad = True
    return losses


def select_prefix(params: Mapping[str, Tensor], prefix: str) -> frozenset[str]:
    return frozenset(n for n in params if n.startswith(prefix))
