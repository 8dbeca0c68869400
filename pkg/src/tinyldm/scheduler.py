"""Noise schedule, forward noising, timestep embeddings and the reverse sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad
from .tensor.rng import RngStream

if TYPE_CHECKING:
    from .networks.bundle import ModelBundle

LATENT_SCALE = 0.18215


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    latent_scale: float = LATENT_SCALE

    @property
    def train_timesteps(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> NoiseSchedule:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("schedule needs at least one beta")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars)


def build_schedule(train_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` over ``train_timesteps`` steps."""
    if train_timesteps < 1:
        raise ValueError(f"train_timesteps must be >= 1, got {train_timesteps}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, train_timesteps, dtype=np.float64))


def _check_timesteps(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("timesteps must be integers")
    if t.size and (t.min() < 0 or t.max() >= schedule.train_timesteps):
        raise ValueError(f"timestep outside [0, {schedule.train_timesteps}): {t.tolist()}")
    return t


def add_noise(schedule: NoiseSchedule, x0, noise, t):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, one timestep per batch element.

    Works on arrays or Tensors; the coefficients are constants, so gradients
    flow to ``x0`` and ``noise`` when they are Tensors.
    """
    x0_shape = x0.shape
    if noise.shape != x0_shape:
        raise ValueError(f"add_noise: noise shape {noise.shape} != latent shape {x0_shape}")
    t = _check_timesteps(schedule, t)
    dtype = x0.dtype
    abar = schedule.alpha_bars[np.atleast_1d(t)]
    if t.ndim == 0:
        bshape = ()
    else:
        if len(x0_shape) == 0 or t.shape[0] != x0_shape[0]:
            raise ValueError(f"add_noise: {t.shape[0]} timesteps for batch of {x0_shape[:1]}")
        bshape = (-1,) + (1,) * (len(x0_shape) - 1)
    a = np.sqrt(abar).astype(dtype).reshape(bshape)
    b = np.sqrt(1.0 - abar).astype(dtype).reshape(bshape)
    if isinstance(x0, Tensor) or isinstance(noise, Tensor):
        return x0 * Tensor(a, dtype=dtype) + noise * Tensor(b, dtype=dtype)
    return a * x0 + b * noise


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding: sines in the first half, cosines in the second."""
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    if t < 0:
        raise ValueError(f"timestep must be non-negative, got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


def timestep_embeddings(ts, dim: int) -> np.ndarray:
    return np.stack([timestep_embedding(int(t), dim) for t in np.asarray(ts).ravel()])


def guided_prediction(uncond, cond, w: float):
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    if np.shape(uncond) != np.shape(cond):
        raise ValueError(f"guidance: shapes {np.shape(uncond)} and {np.shape(cond)} differ")
    if w == 1:
        return cond
    if w == 0:
        return uncond
    return uncond + w * (cond - uncond)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"  # "ddim" (deterministic skip) or "ancestral"
    steps: int = 50
    guidance: float = 7.5

    def __post_init__(self):
        if self.kind not in ("ddim", "ancestral"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


def inference_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    T = schedule.train_timesteps
    if steps > T:
        raise ValueError(f"{steps} inference steps exceed {T} training timesteps")
    ts = np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)
    assert np.all(np.diff(ts) < 0) or steps == 1
    return ts


@dataclass
class Conditioning:
    """Text conditioning for one batch: conditional and unconditional context plus key masks."""

    context: np.ndarray
    mask: np.ndarray
    uncond_context: np.ndarray | None = None
    uncond_mask: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.context.shape[0]


def sample(
    model: ModelBundle,
    schedule: NoiseSchedule,
    cond: Conditioning,
    cfg: SamplerConfig,
    rng: RngStream | Sequence[RngStream],
    hooks=None,
    predictor: Callable | None = None,
) -> np.ndarray:
    """Run the reverse process from pure noise and return scaled latents.

    ``rng`` is one stream for the whole batch or one stream per image; with
    per-image streams an image does not depend on what it is batched with.

    ``predictor(x, t, context, mask)`` overrides the model's noise predictor;
    it exists so the update rule can be checked against closed forms.
    """
    ts = inference_timesteps(schedule, cfg.steps)
    shape = (cond.batch,) + model.latent_shape
    if isinstance(rng, RngStream):
        def draw():
            return rng.normal(shape, dtype=np.float32)
    else:
        if len(rng) != cond.batch:
            raise ValueError(f"got {len(rng)} rng streams for a batch of {cond.batch}")
        streams = list(rng)

        def draw():
            return np.stack([r.normal(shape[1:], dtype=np.float32) for r in streams])

    x = draw()
    guided = cfg.guidance != 1 and cond.uncond_context is not None

    if predictor is None:
        def predictor(xb, t, ctx, mask):
            with no_grad():
                temb = np.repeat(timestep_embedding(int(t), model.config.time_dim)[None], xb.shape[0], axis=0)
                return model.denoiser(Tensor(xb), Tensor(temb), Tensor(ctx), mask, hooks=hooks).data

    if guided:
        ctx = np.concatenate([cond.uncond_context, cond.context])
        mask = np.concatenate([cond.uncond_mask, cond.mask])
    abars = schedule.alpha_bars
    for i, t in enumerate(ts):
        if guided:
            both = predictor(np.concatenate([x, x]), t, ctx, mask)
            eps = guided_prediction(both[: cond.batch], both[cond.batch:], cfg.guidance)
        else:
            eps = predictor(x, t, cond.context, cond.mask)
        abar_t = abars[t]
        abar_prev = abars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (x - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
        if cfg.kind == "ddim":
            x = math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps
        else:
            sigma = math.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev))
            direction = math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0)) * eps
            x = math.sqrt(abar_prev) * x0 + direction
            if i + 1 < len(ts):
                x = x + sigma * draw()
        x = x.astype(np.float32, copy=False)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"sampler diverged at timestep {t}")
    return x
