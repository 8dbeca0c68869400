from .dreambooth import DreamboothRun, db_generate_class_images, db_selector, db_train, finetune_plain
from .generate import generate, resolve_adapters
from .hypernetwork import HypernetArtifact, hn_build, hn_train
from .lora import LoraArtifact, lora_attach, lora_merge, lora_merge_bundle, lora_train
from .pretrain import PRETRAIN_TEMPLATES, calibrate_latent_gain, pretrain, pretrain_vae
from .step import (
    EMBEDDING,
    METHODS,
    Trainable,
    TrainableSelector,
    caption_prompt,
    diffusion_loss,
    draw_batch,
    fit,
    mse_loss,
    select_prefix,
    templated,
    train_step,
)
from .textual_inversion import TiArtifact, ti_apply, ti_extend_vocab, ti_selector, ti_train
