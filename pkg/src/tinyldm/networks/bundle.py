from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ..tensor import Tensor
from ..tensor.rng import RngStream
from .attention import CrossAttentionSite
from .denoiser import Denoiser
from .text import TextEncoder
from .vae import DOWNSAMPLE, Vae

if TYPE_CHECKING:
    from ..data.vocab import Vocab

COMPONENT_PREFIXES = {"vae": "vae.", "text_encoder": "text.", "denoiser": "unet."}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_channels: int = 4
    vae_widths: tuple[int, int] = (32, 64)
    d_model: int = 64
    heads: int = 2
    d_txt: int = 64
    text_layers: int = 2
    text_heads: int = 2
    max_len: int = 16
    time_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        if self.image_size % DOWNSAMPLE:
            raise ValueError(f"image_size {self.image_size} must be divisible by {DOWNSAMPLE}")
        if (self.image_size // DOWNSAMPLE) % 4:
            raise ValueError("latent grid must be divisible by 4 for the two-level denoiser")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vae_widths"] = list(self.vae_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "vae_widths" in d:
            d["vae_widths"] = tuple(d["vae_widths"])
        return cls(**d)


@dataclass
class ModelBundle:
    """VAE, text encoder and denoiser, plus the vocabulary the text encoder was built for."""

    config: ModelConfig
    vae: Vae
    text_encoder: TextEncoder
    denoiser: Denoiser
    vocab: Vocab
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocab, seed: int = 0) -> ModelBundle:
        rng = RngStream(seed, stream_id=0xB0DE)
        vae = Vae(rng.spawn(0), config.latent_channels, config.vae_widths, config.groups)
        text = TextEncoder(len(vocab), config.d_txt, config.max_len, config.text_layers, config.text_heads,
                           rng.spawn(1), pad_id=vocab.pad_id)
        unet = Denoiser(config.latent_channels, config.d_model, config.d_txt, config.heads, config.time_dim,
                        rng.spawn(2), config.groups)
        bundle = cls(config, vae, text, unet, vocab, {"vae_steps": 0, "denoiser_steps": 0})
        bundle.assign_names()
        return bundle

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.config.image_size // DOWNSAMPLE
        return (s, s, self.config.latent_channels)

    @property
    def sites(self) -> list[CrossAttentionSite]:
        return self.denoiser.sites

    def assign_names(self) -> None:
        for attr, prefix in COMPONENT_PREFIXES.items():
            getattr(self, attr).assign_names(prefix)

    def parameters(self) -> dict[str, Tensor]:
        """Registry of every trainable tensor, by unique dotted name."""
        registry: dict[str, Tensor] = {}
        seen: set[int] = set()
        for attr, prefix in COMPONENT_PREFIXES.items():
            for name, p in getattr(self, attr).named_parameters(prefix):
                if name in registry or id(p) in seen:
                    raise RuntimeError(f"parameter registered twice: {name}")
                registry[name] = p
                seen.add(id(p))
        return registry

    def component_parameters(self, component: str) -> dict[str, Tensor]:
        prefix = COMPONENT_PREFIXES[component]
        return {n: p for n, p in self.parameters().items() if n.startswith(prefix)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        registry = self.parameters()
        if "text.token_embedding" in arrays:
            rows = arrays["text.token_embedding"].shape[0] - self.text_encoder.vocab_size
            if rows > 0:
                self.text_encoder.append_rows(np.zeros((rows, self.config.d_txt), dtype=np.float32))
                registry = self.parameters()
        missing = sorted(set(registry) - set(arrays))
        extra = sorted(set(arrays) - set(registry))
        if missing or extra:
            raise KeyError(f"state mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in registry.items():
            a = arrays[name]
            if a.shape != p.shape:
                raise ValueError(f"{name}: stored shape {a.shape} vs model shape {p.shape}")
            p.data = np.array(a, dtype=p.dtype)

    def clone(self) -> ModelBundle:
        """Deep copy of weights, vocabulary and metadata."""
        twin = ModelBundle.create(self.config, self.vocab.copy(), seed=0)
        twin.load_state_arrays(self.state_arrays())
        twin.meta = dict(self.meta)
        twin.vae.latent_gain = self.vae.latent_gain
        return twin
