from .attention import AdapterSet, CrossAttentionSite, attend, cross_attention
from .bundle import ModelBundle, ModelConfig
from .denoiser import SITE_IDS, Denoiser, predict_noise
from .layers import Module
from .text import TextEncoder
from .vae import Vae, decode_latent, encode_image, sample_latent


def encode_text(text_encoder: TextEncoder, token_ids):
    """Context sequence [B, L, d_txt] and key mask for padded id sequences (no gradient)."""
    import numpy as np

    from ..tensor import no_grad

    with no_grad():
        ctx, mask = text_encoder(token_ids)
    squeeze = np.asarray(token_ids).ndim == 1
    return (ctx.data[0], mask[0]) if squeeze else (ctx.data, mask)
