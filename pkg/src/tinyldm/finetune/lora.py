"""LoRA: trainable low-rank updates in parallel with every cross-attention projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data.corpus import Corpus
from ..networks import AdapterSet, ModelBundle
from ..networks.attention import PROJECTIONS
from ..scheduler import NoiseSchedule
from ..tensor import Tensor
from ..tensor.rng import RngStream
from .hypernetwork import _check_sites
from .step import Trainable, TrainableSelector, caption_prompt, fit

INIT_STD = 0.01


@dataclass
class LoraArtifact:
    """``A`` [rank, d_in] and ``B`` [d_out, rank] per projection, named ``{site}.{proj}.{A|B}``."""

    name: str
    rank: int
    alpha: float
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def sites(self) -> list[str]:
        return sorted({n.split(".")[0] for n in self.params})

    def pair(self, site: str, proj: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{site}.{proj}.A"], self.params[f"{site}.{proj}.B"]

    def hooks(self, weight: float = 1.0, into: AdapterSet | None = None) -> AdapterSet:
        """Adapter hooks adding ``weight * (alpha / rank) * B A`` to each projection."""
        hooks = into if into is not None else AdapterSet()
        for site in self.sites:
            hooks.add_lora(site, {p: self.pair(site, p) for p in PROJECTIONS}, weight * self.scale)
        return hooks


def lora_attach(bundle: ModelBundle, rank: int = 4, alpha: float | None = None, rng: RngStream | None = None,
                name: str = "aki") -> LoraArtifact:
    """Fresh adapter with ``A ~ N(0, 0.01^2)`` and ``B = 0``, so it changes nothing until trained."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = rng if rng is not None else RngStream(0, stream_id=0x10A)
    art = LoraArtifact(name, int(rank), float(rank if alpha is None else alpha))
    for s, site in enumerate(bundle.sites):
        for j, proj in enumerate(PROJECTIONS):
            d_out, d_in = site.projection(proj).shape
            if rank > min(d_out, d_in):
                raise ValueError(f"rank {rank} exceeds min(d_out, d_in) = {min(d_out, d_in)} at {site.site_id}.{proj}")
            key = f"{site.site_id}.{proj}"
            a = rng.spawn(s).spawn(j).normal((rank, d_in)) * np.float32(INIT_STD)
            art.params[f"{key}.A"] = Tensor(a, requires_grad=True, name=f"lora.{key}.A")
            art.params[f"{key}.B"] = Tensor(np.zeros((d_out, rank), np.float32), requires_grad=True, name=f"lora.{key}.B")
    return art


def lora_train(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, artifact: LoraArtifact, steps: int,
               rng: RngStream, lr: float = 1e-4, batch_size: int = 8, prompt_fn=caption_prompt,
               uncond_prob: float = 0.0, grad_hook=None) -> tuple[LoraArtifact, list[float]]:
    """Train A and B in place; captions are used as they are."""
    _check_sites(bundle, artifact)
    params = {f"lora.{k}": p for k, p in artifact.params.items()}
    trainable = Trainable({**bundle.parameters(), **params}, TrainableSelector("lora", params),
                          hooks=artifact.hooks(1.0))
    losses = fit(bundle, schedule, corpus, prompt_fn, trainable, steps, lr, rng, batch_size=batch_size,
                 uncond_prob=uncond_prob, grad_hook=grad_hook)
    return artifact, losses


def lora_merge(weight, a, b, alpha: float, rank: int) -> np.ndarray:
    """W + (alpha / rank) * B @ A."""
    w, a, b = (np.asarray(x.data if isinstance(x, Tensor) else x) for x in (weight, a, b))
    if a.ndim != 2 or b.ndim != 2 or w.ndim != 2:
        raise ValueError("lora_merge expects 2-D W, A and B")
    if a.shape[0] != rank or b.shape[1] != rank or (b.shape[0], a.shape[1]) != w.shape:
        raise ValueError(f"lora_merge: W {w.shape}, A {a.shape}, B {b.shape} inconsistent with rank {rank}")
    return (w + (alpha / rank) * (b @ a)).astype(w.dtype)


def lora_merge_bundle(bundle: ModelBundle, artifact: LoraArtifact, weight: float = 1.0) -> ModelBundle:
    """Copy of ``bundle`` with the adapter folded into its projection weights."""
    _check_sites(bundle, artifact)
    merged = bundle.clone()
    for site in merged.sites:
        for proj in PROJECTIONS:
            w = site.projection(proj)
            a, b = artifact.pair(site.site_id, proj)
            w.data = lora_merge(w, a, b, artifact.alpha * weight, artifact.rank)
    merged.meta["merged_lora"] = [*merged.meta.get("merged_lora", []), {"name": artifact.name, "weight": weight}]
    return merged
