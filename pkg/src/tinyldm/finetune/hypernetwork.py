"""Hypernetwork: small residual MLPs on the text context feeding each site's keys and values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data.corpus import Corpus
from ..data.templates import STYLE_FILEWORDS
from ..networks import AdapterSet, ModelBundle
from ..scheduler import NoiseSchedule
from ..tensor import ACTIVATIONS, Tensor
from ..tensor.rng import RngStream
from .step import Trainable, TrainableSelector, fit, templated

INITS = ("normal", "zero-final")
INIT_STD = 0.01


@dataclass
class HypernetArtifact:
    """Per-site key/value MLP weights, named ``{site}.{k|v}.{layer}.{weight|bias}``.

    Weights are stored [d_out, d_in] like every other projection in the model.
    """

    name: str
    multipliers: tuple[int, ...]
    activation: str
    d_txt: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def sites(self) -> list[str]:
        return sorted({n.split(".")[0] for n in self.params})

    @property
    def widths(self) -> list[int]:
        return [m * self.d_txt for m in self.multipliers]

    def branch(self, site: str, side: str, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        n_layers = len(self.multipliers) - 1
        for i in range(n_layers):
            x = x @ self.params[f"{site}.{side}.{i}.weight"].T + self.params[f"{site}.{side}.{i}.bias"]
            if i + 1 < n_layers:
                x = act(x)
        return x

    def hooks(self, weight: float = 1.0, into: AdapterSet | None = None) -> AdapterSet:
        """Adapter hooks computing ``ctx + weight * mlp(ctx)`` for keys and values."""
        hooks = into if into is not None else AdapterSet()
        if weight == 0:
            return hooks
        for site in self.sites:
            def transform(keys, values, site=site):
                return (keys + self.branch(site, "k", keys) * weight,
                        values + self.branch(site, "v", values) * weight)

            hooks.add_kv(site, transform)
        return hooks


def hn_build(bundle: ModelBundle, multipliers: Sequence[int] = (1, 2, 1), activation: str = "linear",
             init: str = "normal", rng: RngStream | None = None, name: str = "coral_shell_bridge") -> HypernetArtifact:
    multipliers = tuple(int(m) for m in multipliers)
    if len(multipliers) < 2 or multipliers[0] != 1 or multipliers[-1] != 1:
        raise ValueError(f"multipliers must start and end with 1, got {multipliers}")
    if any(m < 1 for m in multipliers):
        raise ValueError(f"multipliers must be positive, got {multipliers}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; choose from {INITS}")
    rng = rng if rng is not None else RngStream(0, stream_id=0x4E)
    d = bundle.config.d_txt
    widths = [m * d for m in multipliers]
    art = HypernetArtifact(name, multipliers, activation, d)
    for s, site in enumerate(bundle.sites):
        for j, side in enumerate("kv"):
            for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
                key = f"{site.site_id}.{side}.{i}"
                if init == "zero-final" and i == len(widths) - 2:
                    w = np.zeros((w_out, w_in), dtype=np.float32)
                else:
                    w = rng.spawn(s).spawn(j).spawn(i).normal((w_out, w_in)) * np.float32(INIT_STD)
                art.params[f"{key}.weight"] = Tensor(w, requires_grad=True, name=f"hn.{key}.weight")
                art.params[f"{key}.bias"] = Tensor(np.zeros(w_out, np.float32), requires_grad=True, name=f"hn.{key}.bias")
    return art


def _check_sites(bundle: ModelBundle, artifact) -> None:
    have = {s.site_id for s in bundle.sites}
    if set(artifact.sites) != have:
        raise ValueError(f"artifact sites {artifact.sites} do not match bundle sites {sorted(have)}")


def hn_train(bundle: ModelBundle, schedule: NoiseSchedule, corpus: Corpus, artifact: HypernetArtifact, steps: int,
             rng: RngStream, lr: float = 5e-4, batch_size: int = 8, templates=STYLE_FILEWORDS,
             uncond_prob: float = 0.0, grad_hook=None) -> tuple[HypernetArtifact, list[float]]:
    """Train the artifact's MLPs in place; every bundle weight stays frozen."""
    _check_sites(bundle, artifact)
    params = {f"hn.{k}": p for k, p in artifact.params.items()}
    trainable = Trainable({**bundle.parameters(), **params}, TrainableSelector("hypernetwork", params),
                          hooks=artifact.hooks(1.0))
    losses = fit(bundle, schedule, corpus, templated(templates, artifact.name), trainable, steps, lr, rng,
                 batch_size=batch_size, uncond_prob=uncond_prob, grad_hook=grad_hook)
    return artifact, losses
