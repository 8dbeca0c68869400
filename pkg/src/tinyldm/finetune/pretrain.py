"""Base-model training: the VAE first, then the denoiser with everything else frozen."""

from __future__ import annotations

import logging

import numpy as np

from ..data.corpus import Corpus
from ..networks import ModelBundle
from ..networks.vae import encode_image
from ..scheduler import LATENT_SCALE, NoiseSchedule
from ..tensor import Tensor, backward, exp, mean, square, squared_error
from ..tensor.optim import AdamState, adam_step
from ..tensor.rng import RngStream
from .step import Trainable, TrainableSelector, fit, select_prefix, templated

log = logging.getLogger(__name__)

# Captions are tag lists; a few phrasings teach the denoiser the prompt words.
PRETRAIN_TEMPLATES = ("[filewords]", "a photo of a [filewords]", "a picture of [filewords]")


def pretrain_vae(bundle: ModelBundle, corpus: Corpus, steps: int, rng: RngStream, lr: float = 1e-3,
                 batch_size: int = 16, kl_weight: float = 1e-4, log_every: int = 100,
                 latent_scale: float = LATENT_SCALE) -> list[float]:
    """Reconstruction + KL training of the VAE alone. Returns per-step losses.

    Afterwards the VAE's latent gain is calibrated on the corpus so that
    ``latent_scale * mean`` has unit standard deviation.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train the VAE on an empty corpus")
    params = bundle.parameters()
    vae_ids = select_prefix(params, "vae.")
    for name, p in params.items():
        p.requires_grad = name in vae_ids
    state = AdamState()
    losses = []
    for step in range(steps):
        srng = rng.spawn(step)
        idx = srng.spawn(0).choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        images = corpus.images(np.sort(idx))
        mu, logvar = bundle.vae.encode(Tensor(images))
        z = mu + exp(logvar * 0.5) * Tensor(srng.spawn(1).normal(mu.shape))
        recon = mean(squared_error(bundle.vae.decode_raw(z), Tensor(images * 2.0 - 1.0)))
        kl = mean((square(mu) + exp(logvar) - logvar - 1.0) * 0.5)
        loss = recon + kl * kl_weight
        grads = {k: g for k, g in backward(loss).items() if k in vae_ids}
        adam_step({k: params[k] for k in grads}, grads, state, lr)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("vae step %d/%d loss %.5f", step + 1, steps, float(np.mean(losses[-log_every:])))
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    bundle.meta["vae_steps"] = bundle.meta.get("vae_steps", 0) + steps
    if steps:
        calibrate_latent_gain(bundle, corpus, latent_scale)
    return losses


def calibrate_latent_gain(bundle: ModelBundle, corpus: Corpus, latent_scale: float = LATENT_SCALE,
                          limit: int = 256) -> float:
    idx = np.arange(min(limit, len(corpus)))
    mus = [encode_image(bundle.vae, corpus.images(idx[i:i + 32]))[0] for i in range(0, len(idx), 32)]
    std = float(np.std(np.concatenate(mus)))
    if not np.isfinite(std) or std <= 0:
        raise ValueError(f"cannot calibrate the latent gain: encoder output std is {std}")
    bundle.vae.latent_gain = bundle.vae.latent_gain / (std * latent_scale)
    bundle.meta["latent_gain"] = bundle.vae.latent_gain
    return bundle.vae.latent_gain


def pretrain(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, steps: int, rng: RngStream,
             lr: float = 5e-4, batch_size: int = 8, uncond_prob: float = 0.1) -> list[float]:
    """Train the denoiser only; the VAE and text encoder stay bit-identical."""
    if len(corpus) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    if not bundle.meta.get("vae_steps"):
        raise ValueError("pretrain needs a pretrained VAE (run pretrain_vae first)")
    params = bundle.parameters()
    trainable = Trainable(params, TrainableSelector("pretrain", select_prefix(params, "unet.")))
    losses = fit(bundle, schedule, corpus, templated(PRETRAIN_TEMPLATES, "base"), trainable, steps, lr, rng,
                 batch_size=batch_size, uncond_prob=uncond_prob)
    bundle.meta["denoiser_steps"] = bundle.meta.get("denoiser_steps", 0) + steps
    return losses
