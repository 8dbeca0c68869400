"""Text-to-image generation with prompt-triggered adapters."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..cli.prompt import parse_prompt
from ..data.vocab import split_words, tokenize
from ..networks import AdapterSet, ModelBundle, decode_latent, encode_text
from ..scheduler import Conditioning, NoiseSchedule, SamplerConfig, sample
from ..tensor.rng import RngStream
from .hypernetwork import HypernetArtifact
from .lora import LoraArtifact
from .textual_inversion import TiArtifact, ti_apply

DIRECTIVE_TYPES = {"lora": LoraArtifact, "hypernet": HypernetArtifact}


def resolve_adapters(bundle: ModelBundle, text: str, directives, adapters: Mapping[str, object]):
    """Return the bundle to sample from (TI-extended if needed) and the active hooks."""
    hooks = AdapterSet()
    for d in directives:
        art = adapters.get(d.name)
        if not isinstance(art, DIRECTIVE_TYPES[d.kind]):
            available = sorted(f"{k} ({type(v).__name__})" for k, v in adapters.items())
            raise KeyError(f"prompt references unknown {d.kind} artifact {d.name!r}; available: {available or 'none'}")
        art.hooks(d.weight, into=hooks)
    words = set(split_words(text))
    needed = [a for a in adapters.values() if isinstance(a, TiArtifact) and a.placeholder in words]
    if needed:
        bundle = bundle.clone()
        for art in needed:
            ti_apply(bundle, art)
    return bundle, hooks


def conditioning(bundle: ModelBundle, text: str, count: int) -> Conditioning:
    ids = np.stack([tokenize(bundle.vocab, text, bundle.config.max_len), tokenize(bundle.vocab, "", bundle.config.max_len)])
    ctx, mask = encode_text(bundle.text_encoder, ids)
    rep = lambda a: np.repeat(a[None], count, axis=0)  # noqa: E731
    return Conditioning(rep(ctx[0]), rep(mask[0]), rep(ctx[1]), rep(mask[1]))


def generate(bundle: ModelBundle, schedule: NoiseSchedule, prompt: str, adapters: Mapping[str, object],
             cfg: SamplerConfig, rng: RngStream | Sequence[RngStream], count: int = 1,
             chunk: int = 50) -> np.ndarray:
    """Sample images [count, H, W, 3] in [0, 1] for ``prompt``.

    With a single ``rng`` image ``i`` uses ``rng.spawn(i)``; a list supplies
    one stream per image. Either way the noise an image sees does not depend
    on ``chunk``; only float rounding in batched matmuls can.
    """
    streams = [rng.spawn(i) for i in range(count)] if isinstance(rng, RngStream) else list(rng)
    if not streams:
        raise ValueError("generate needs at least one image")
    text, directives = parse_prompt(prompt)
    model, hooks = resolve_adapters(bundle, text, directives, adapters)
    images = []
    for start in range(0, len(streams), chunk):
        part = streams[start:start + chunk]
        latents = sample(model, schedule, conditioning(model, text, len(part)), cfg, part,
                         hooks=hooks if (hooks.lora or hooks.kv) else None)
        images.append(decode_latent(model.vae, latents / schedule.latent_scale))
    return np.concatenate(images)
