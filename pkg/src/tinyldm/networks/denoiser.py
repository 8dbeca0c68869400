from __future__ import annotations

import numpy as np

from ..tensor import ShapeError, Tensor, concat, silu, upsample_nearest
from ..tensor.rng import RngStream
from .attention import AdapterSet, CrossAttentionSite, cross_attention
from .layers import Conv2d, GroupNorm, LayerNorm, Linear, Module, ResBlock

SITE_IDS = ("down1", "down2", "mid", "up1", "up2")


class CrossAttentionBlock(Module):
    """Pre-norm residual cross-attention over the flattened latent grid."""

    def __init__(self, site_id: str, d_model: int, d_txt: int, heads: int, rng: RngStream):
        self.norm = LayerNorm(d_model)
        self.site = CrossAttentionSite(site_id, d_model, d_txt, heads, rng)

    def __call__(self, x: Tensor, context: Tensor, mask, hooks: AdapterSet | None) -> Tensor:
        n, h, w, c = x.shape
        tokens = x.reshape(n, h * w, c)
        sid = self.site.site_id
        kv = hooks.kv_transform(sid) if hooks is not None else None
        lora = hooks.lora.get(sid, ()) if hooks is not None else ()
        out = cross_attention(self.site, self.norm(tokens), context, mask, kv_transform=kv, lora=lora)
        return (tokens + out).reshape(n, h, w, c)


class Denoiser(Module):
    """Two-level conditional U-Net predicting the injected noise.

    8x8 -> 4x4 -> 2x2 (mid) -> 4x4 -> 8x8 for the default latent grid, with a
    cross-attention site after each residual block.
    """

    def __init__(self, latent_channels: int, d_model: int, d_txt: int, heads: int, time_dim: int, rng: RngStream, groups: int = 8):
        self._time_dim = time_dim
        t_hidden = 2 * d_model
        self.time_fc1 = Linear(time_dim, t_hidden, rng.spawn(0))
        self.time_fc2 = Linear(t_hidden, t_hidden, rng.spawn(1))
        self.conv_in = Conv2d(latent_channels, d_model, rng.spawn(2))

        def res(c_in, i):
            return ResBlock(c_in, d_model, rng.spawn(100 + i), time_dim=t_hidden, groups=groups)

        def attn(sid, i):
            return CrossAttentionBlock(sid, d_model, d_txt, heads, rng.spawn(200 + i))

        self.down1_res, self.down1_attn = res(d_model, 0), attn("down1", 0)
        self.down1_pool = Conv2d(d_model, d_model, rng.spawn(3), stride=2)
        self.down2_res, self.down2_attn = res(d_model, 1), attn("down2", 1)
        self.down2_pool = Conv2d(d_model, d_model, rng.spawn(4), stride=2)
        self.mid_res, self.mid_attn = res(d_model, 2), attn("mid", 2)
        self.up1_res, self.up1_attn = res(2 * d_model, 3), attn("up1", 3)
        self.up2_res, self.up2_attn = res(2 * d_model, 4), attn("up2", 4)
        self.norm_out = GroupNorm(d_model, groups)
        self.conv_out = Conv2d(d_model, latent_channels, rng.spawn(5), gain=0.5)

    @property
    def time_dim(self) -> int:
        return self._time_dim

    @property
    def sites(self) -> list[CrossAttentionSite]:
        return [getattr(self, f"{sid}_attn").site for sid in SITE_IDS]

    def site(self, site_id: str) -> CrossAttentionSite:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(f"no cross-attention site {site_id!r}")

    def __call__(self, x: Tensor, t_embedding: Tensor, context: Tensor, mask=None, hooks: AdapterSet | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.conv_in.weight.shape[2]:
            raise ShapeError(f"denoiser: latent shape {x.shape} does not match configuration")
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeError(f"denoiser: latent grid {x.shape[1]}x{x.shape[2]} must be divisible by 4")
        if t_embedding.shape != (x.shape[0], self._time_dim):
            raise ShapeError(f"denoiser: timestep embedding {t_embedding.shape} vs expected {(x.shape[0], self._time_dim)}")
        temb = self.time_fc2(silu(self.time_fc1(t_embedding)))
        h = self.conv_in(x)
        h1 = self.down1_attn(self.down1_res(h, temb), context, mask, hooks)
        h = self.down1_pool(h1)
        h2 = self.down2_attn(self.down2_res(h, temb), context, mask, hooks)
        h = self.down2_pool(h2)
        h = self.mid_attn(self.mid_res(h, temb), context, mask, hooks)
        h = concat([upsample_nearest(h), h2], axis=-1)
        h = self.up1_attn(self.up1_res(h, temb), context, mask, hooks)
        h = concat([upsample_nearest(h), h1], axis=-1)
        h = self.up2_attn(self.up2_res(h, temb), context, mask, hooks)
        return self.conv_out(silu(self.norm_out(h)))


def predict_noise(denoiser: Denoiser, noisy_latents, t_embedding, context, mask=None, hooks: AdapterSet | None = None) -> Tensor:
    def as_tensor(a):
        return a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))

    out = denoiser(as_tensor(noisy_latents), as_tensor(t_embedding), as_tensor(context), mask, hooks)
    if out.shape != tuple(noisy_latents.shape):
        raise ShapeError(f"denoiser output {out.shape} differs from input {tuple(noisy_latents.shape)}")
    return out
