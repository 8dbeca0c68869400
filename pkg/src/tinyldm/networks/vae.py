from __future__ import annotations

import numpy as np

from ..tensor import ShapeError, Tensor, exp, no_grad, silu, upsample_nearest
from ..tensor.rng import RngStream
from .layers import Conv2d, GroupNorm, Module, ResBlock

DOWNSAMPLE = 4


class Vae(Module):
    """Convolutional VAE with a 4x spatial reduction to a 4-channel latent grid.

    Images are [N, H, W, 3] in [0, 1]; the encoder returns per-cell mean and
    log-variance, the decoder maps latents back to clamped pixels.
    """

    def __init__(self, rng: RngStream, latent_channels: int = 4, widths: tuple[int, int] = (32, 64), groups: int = 8):
        c1, c2 = widths
        self._latent_channels = latent_channels
        # Fixed (untrained) factor applied to encoder moments and undone before
        # decoding; calibrated after VAE training so scaled latents have unit std.
        self._latent_gain = 1.0
        self.enc_in = Conv2d(3, c1, rng.spawn(0))
        self.enc_down1 = Conv2d(c1, c2, rng.spawn(1), stride=2)
        self.enc_res1 = ResBlock(c2, c2, rng.spawn(2), groups=groups)
        self.enc_down2 = Conv2d(c2, c2, rng.spawn(3), stride=2)
        self.enc_res2 = ResBlock(c2, c2, rng.spawn(4), groups=groups)
        self.enc_norm = GroupNorm(c2, groups)
        self.enc_out = Conv2d(c2, 2 * latent_channels, rng.spawn(5))

        self.dec_in = Conv2d(latent_channels, c2, rng.spawn(10))
        self.dec_res1 = ResBlock(c2, c2, rng.spawn(11), groups=groups)
        self.dec_up1 = Conv2d(c2, c2, rng.spawn(12))
        self.dec_res2 = ResBlock(c2, c1, rng.spawn(13), groups=groups)
        self.dec_up2 = Conv2d(c1, c1, rng.spawn(14))
        self.dec_norm = GroupNorm(c1, groups)
        self.dec_out = Conv2d(c1, 3, rng.spawn(15))

    @property
    def latent_channels(self) -> int:
        return self._latent_channels

    @property
    def latent_gain(self) -> float:
        return self._latent_gain

    @latent_gain.setter
    def latent_gain(self, value: float) -> None:
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"latent gain must be positive and finite, got {value}")
        self._latent_gain = float(value)

    def encode(self, images: Tensor) -> tuple[Tensor, Tensor]:
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"encode: expected [N, H, W, 3] images, got {images.shape}")
        h, w = images.shape[1:3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(f"encode: image size {h}x{w} not divisible by {DOWNSAMPLE}")
        x = self.enc_in(images * 2.0 - 1.0)
        x = self.enc_res1(self.enc_down1(silu(x)))
        x = self.enc_res2(self.enc_down2(x))
        moments = self.enc_out(silu(self.enc_norm(x)))
        c, g = self._latent_channels, self._latent_gain
        if g == 1.0:
            return moments[..., :c], moments[..., c:]
        return moments[..., :c] * g, moments[..., c:] + float(2.0 * np.log(g))

    def decode_raw(self, latents: Tensor) -> Tensor:
        """Decoder output in [-1, 1] units, unclamped (used by the training loss)."""
        if latents.ndim != 4 or latents.shape[-1] != self._latent_channels:
            raise ShapeError(f"decode: expected [N, h, w, {self._latent_channels}] latents, got {latents.shape}")
        if self._latent_gain != 1.0:
            latents = latents * (1.0 / self._latent_gain)
        x = self.dec_res1(self.dec_in(latents))
        x = self.dec_res2(self.dec_up1(upsample_nearest(x)))
        x = self.dec_up2(upsample_nearest(x))
        return self.dec_out(silu(self.dec_norm(x)))


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return (x[None], True) if x.ndim == 3 else (x, False)


def encode_image(vae: Vae, image) -> tuple[np.ndarray, np.ndarray]:
    """Mean and log-variance over the latent grid for one image or a batch."""
    batch, single = _batched(image)
    if batch.shape[1] != batch.shape[2]:
        raise ShapeError(f"encode_image: image must be square, got {batch.shape[1]}x{batch.shape[2]}")
    with no_grad():
        mean, logvar = vae.encode(Tensor(batch))
    if single:
        return mean.data[0], logvar.data[0]
    return mean.data, logvar.data


def sample_latent(mean, log_variance, rng: RngStream | None = None, noise=None):
    """mean + exp(log_variance / 2) * eps with eps standard normal (or given)."""
    if np.shape(mean) != np.shape(log_variance):
        raise ShapeError(f"sample_latent: mean {np.shape(mean)} vs log-variance {np.shape(log_variance)}")
    if noise is None:
        if rng is None:
            raise ValueError("sample_latent needs an rng or explicit noise")
        noise = rng.normal(np.shape(mean))
    if np.shape(noise) != np.shape(mean):
        raise ShapeError(f"sample_latent: noise {np.shape(noise)} vs mean {np.shape(mean)}")
    if isinstance(mean, Tensor) or isinstance(log_variance, Tensor):
        return mean + exp(log_variance * 0.5) * Tensor(noise, dtype=mean.dtype)
    return mean + np.exp(0.5 * np.asarray(log_variance)) * noise


def decode_latent(vae: Vae, latent) -> np.ndarray:
    """Pixels in [0, 1] for one latent [h, w, c] or a batch."""
    batch, single = _batched(latent)
    with no_grad():
        raw = vae.decode_raw(Tensor(batch)).data
    images = np.clip((raw + 1.0) * 0.5, 0.0, 1.0)
    return images[0] if single else images
