"""Saving and loading bundles and adapter artifacts through the checkpoint container."""

from __future__ import annotations

from pathlib import Path

from ..data.vocab import Vocab
from ..finetune import HypernetArtifact, LoraArtifact, TiArtifact
from ..networks import ModelBundle, ModelConfig
from ..tensor import Tensor
from .checkpoint import CorruptHeader, load_checkpoint, save_checkpoint


def save_bundle(path, bundle: ModelBundle) -> None:
    meta = {"kind": "bundle", "config": bundle.config.to_dict(), "vocab": bundle.vocab.to_dict(),
            "meta": {**bundle.meta, "latent_gain": bundle.vae.latent_gain}}
    save_checkpoint(path, bundle.state_arrays(), meta)


def bundle_from_checkpoint(tensors, meta) -> ModelBundle:
    if meta.get("kind") != "bundle":
        raise CorruptHeader(f"expected a bundle checkpoint, found kind {meta.get('kind')!r}")
    bundle = ModelBundle.create(ModelConfig.from_dict(meta["config"]), Vocab.from_dict(meta["vocab"]))
    bundle.load_state_arrays(tensors)
    bundle.meta = dict(meta.get("meta", {}))
    bundle.vae.latent_gain = bundle.meta.get("latent_gain", 1.0)
    return bundle


def load_bundle(path) -> ModelBundle:
    return bundle_from_checkpoint(*load_checkpoint(path))


def _trainable(arrays, prefix: str = "") -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in arrays.items()}


def save_artifact(path, artifact) -> None:
    if isinstance(artifact, TiArtifact):
        meta = {"kind": "ti", "token_id": artifact.token_id, "init_word": artifact.init_word}
        save_checkpoint(path, {artifact.placeholder: artifact.vectors}, meta)
    elif isinstance(artifact, HypernetArtifact):
        meta = {"kind": "hypernet", "name": artifact.name, "multipliers": list(artifact.multipliers),
                "activation": artifact.activation, "d_txt": artifact.d_txt}
        save_checkpoint(path, {k: p.data for k, p in artifact.params.items()}, meta)
    elif isinstance(artifact, LoraArtifact):
        meta = {"kind": "lora", "name": artifact.name, "rank": artifact.rank, "alpha": artifact.alpha}
        save_checkpoint(path, {k: p.data for k, p in artifact.params.items()}, meta)
    else:
        raise TypeError(f"cannot save {type(artifact).__name__}")


def artifact_from_checkpoint(tensors, meta):
    kind = meta.get("kind")
    if kind == "ti":
        if len(tensors) != 1:
            raise CorruptHeader(f"a textual-inversion artifact holds one tensor, found {len(tensors)}")
        ((word, vec),) = tensors.items()
        return TiArtifact(word, int(meta["token_id"]), vec, meta.get("init_word", ""))
    if kind == "hypernet":
        return HypernetArtifact(meta["name"], tuple(meta["multipliers"]), meta["activation"], int(meta["d_txt"]),
                                _trainable(tensors, "hn."))
    if kind == "lora":
        return LoraArtifact(meta["name"], int(meta["rank"]), float(meta["alpha"]), _trainable(tensors, "lora."))
    raise CorruptHeader(f"not an adapter artifact (kind {kind!r})")


def load_artifact(path):
    return artifact_from_checkpoint(*load_checkpoint(path))


def artifact_key(artifact) -> str:
    """Name a prompt uses to refer to the artifact."""
    return artifact.placeholder if isinstance(artifact, TiArtifact) else artifact.name


def load_adapters(paths) -> dict[str, object]:
    adapters = {}
    for p in paths:
        art = load_artifact(Path(p))
        key = artifact_key(art)
        if key in adapters:
            raise ValueError(f"two adapters named {key!r}")
        adapters[key] = art
    return adapters
