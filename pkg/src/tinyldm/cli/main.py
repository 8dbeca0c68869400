"""``tinyldm`` command line: dataset generation, training, fine-tuning, sampling, inspection."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..data import build_vocab, load_corpus, mixed_corpus, png_bytes, save_corpus, synth_bridges
from ..data.corpus import atomic_write_bytes
from ..finetune import (
    DreamboothRun,
    db_generate_class_images,
    db_train,
    generate,
    hn_build,
    hn_train,
    lora_attach,
    lora_merge_bundle,
    lora_train,
    pretrain,
    pretrain_vae,
    ti_extend_vocab,
    ti_train,
)
from ..networks import ModelBundle
from ..scheduler import SamplerConfig, build_schedule
from ..tensor.rng import RngStream
from .checkpoint import read_manifest
from .config import ConfigError, RunConfig, load_config
from .lossfile import export_loss_csv
from .store import load_adapters, load_artifact, load_bundle, save_artifact, save_bundle

log = logging.getLogger("tinyldm")

# One stream id per command keeps their randomness independent under a shared seed.
STREAMS = {"pretrain-vae": 0x20, "pretrain": 0x30, "ti": 0x41, "dreambooth": 0x42,
           "hypernet": 0x43, "lora": 0x44, "sample": 0x50}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; keep its message format
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinyldm", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, run=True):
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="base seed (default: config seed, 0)")
        if run:
            p.add_argument("--run", type=Path, required=True, help="run directory for all outputs")
        return p

    p = common(sub.add_parser("gen-dataset", help="render a synthetic bridge corpus"))
    p.add_argument("--style", action="append", help="style to render (repeatable; default: base styles)")
    p.add_argument("--count", type=int, help="number of images")

    p = common(sub.add_parser("pretrain-vae", help="create a bundle and train its VAE"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)

    p = common(sub.add_parser("pretrain", help="train the denoiser of a bundle"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    p = common(sub.add_parser("finetune", help="fine-tune with one of the four methods"))
    p.add_argument("method", choices=("ti", "dreambooth", "hypernet", "lora"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--class-images", type=Path, help="existing class-image directory (dreambooth)")

    p = common(sub.add_parser("sample", help="text-to-image sampling"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--adapter", type=Path, action="append", default=[], help="adapter checkpoint (repeatable)")
    p.add_argument("--sampler", choices=("ddim", "ancestral"))
    p.add_argument("--sampler-steps", type=int)
    p.add_argument("--guidance", type=float)

    p = common(sub.add_parser("merge-lora", help="fold a LoRA adapter into a bundle"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--adapter", type=Path, required=True)
    p.add_argument("--weight", type=float, default=1.0)

    p = sub.add_parser("inspect", help="print a checkpoint's header")
    p.add_argument("path", type=Path)
    return parser


def _method_section(args) -> str | None:
    if args.command == "finetune":
        return args.method
    return {"pretrain": "pretrain"}.get(args.command)


def resolve_config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    section = _method_section(args)
    if section is not None:
        overrides[f"{section}.steps"] = getattr(args, "steps", None)
        overrides[f"{section}.lr"] = getattr(args, "lr", None)
    if args.command == "pretrain-vae":
        overrides["pretrain.vae_steps"] = args.steps
    if args.command == "sample":
        overrides.update({"sampler.kind": args.sampler, "sampler.steps": args.sampler_steps,
                          "sampler.guidance": args.guidance})
    return load_config(args.config, overrides)


def _sampler(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(cfg.sampler.kind, cfg.sampler.steps, cfg.sampler.guidance)


def _schedule(cfg: RunConfig):
    return build_schedule(cfg.schedule.train_timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _rng(cfg: RunConfig, key: str) -> RngStream:
    return RngStream(cfg.seed, stream_id=STREAMS[key])


def _write_manifest(run: Path, args, cfg: RunConfig, outputs: list[str]) -> None:
    inputs = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()
              if k not in ("config", "quiet")}
    if isinstance(inputs.get("adapter"), list):
        inputs["adapter"] = [str(a) for a in inputs["adapter"]]
    doc = {"command": args.command, "arguments": inputs, "config": cfg.to_dict(), "outputs": sorted(outputs)}
    atomic_write_bytes(run / "run.json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def cmd_gen_dataset(args, cfg: RunConfig) -> list[str]:
    styles = args.style or list(cfg.data.base_styles)
    count = args.count if args.count is not None else cfg.data.base_count
    if count < 1:
        raise UsageError("--count must be >= 1")
    res = cfg.model.image_size
    if len(styles) == 1:
        corpus = synth_bridges(count, styles[0], res, seed=cfg.seed)
    else:
        corpus = mixed_corpus(count, tuple(styles), res, seed=cfg.seed)
    save_corpus(corpus, args.run / "data")
    return ["data/"]


def cmd_pretrain_vae(args, cfg: RunConfig) -> list[str]:
    corpus = load_corpus(args.data, cfg.model.image_size)
    vocab = build_vocab(corpus.captions(), size=256)
    bundle = ModelBundle.create(cfg.model, vocab, seed=cfg.seed)
    p = cfg.pretrain
    losses = pretrain_vae(bundle, corpus, p.vae_steps, _rng(cfg, "pretrain-vae"), lr=p.vae_lr,
                          batch_size=p.vae_batch, kl_weight=p.kl_weight)
    save_bundle(args.run / "bundle.ckpt", bundle)
    export_loss_csv(args.run / "loss.csv", losses)
    return ["bundle.ckpt", "loss.csv"]


def cmd_pretrain(args, cfg: RunConfig) -> list[str]:
    bundle = load_bundle(args.bundle)
    corpus = load_corpus(args.data, bundle.config.image_size)
    p = cfg.pretrain
    losses = pretrain(bundle, _schedule(cfg), corpus, p.steps, _rng(cfg, "pretrain"), lr=p.lr, batch_size=p.batch,
                      uncond_prob=p.uncond_prob)
    save_bundle(args.run / "bundle.ckpt", bundle)
    export_loss_csv(args.run / "loss.csv", losses)
    return ["bundle.ckpt", "loss.csv"]


def cmd_finetune(args, cfg: RunConfig) -> list[str]:
    bundle = load_bundle(args.bundle)
    corpus = load_corpus(args.data, bundle.config.image_size)
    schedule, rng = _schedule(cfg), _rng(cfg, args.method)
    outputs = ["loss.csv"]
    if args.method == "ti":
        c = cfg.ti
        ti_extend_vocab(bundle, c.placeholder, c.init_word)
        artifact, losses = ti_train(bundle, schedule, corpus, c.placeholder, c.steps, rng, lr=c.lr, batch_size=c.batch)
        save_artifact(args.run / "ti.ckpt", artifact)
        outputs.append("ti.ckpt")
    elif args.method == "dreambooth":
        c = cfg.dreambooth
        run = DreamboothRun(c.instance_token, c.class_token, None, c.prior_weight, c.class_per_instance,
                            c.train_text_encoder)
        if args.class_images is not None:
            classes = load_corpus(args.class_images, bundle.config.image_size)
        else:
            classes = db_generate_class_images(bundle, schedule, run.class_prompt, c.class_per_instance * len(corpus),
                                               _sampler(cfg), rng.spawn(1))
            outputs.append("class_images/")
        run.class_images = classes
        tuned, losses = db_train(bundle, schedule, corpus, run, c.steps, rng.spawn(0), lr=c.lr, batch_size=c.batch)
        if "class_images/" in outputs:
            save_corpus(classes, args.run / "class_images")
        save_bundle(args.run / "bundle.ckpt", tuned)
        outputs.append("bundle.ckpt")
    elif args.method == "hypernet":
        c = cfg.hypernet
        artifact = hn_build(bundle, c.multipliers, c.activation, c.init, rng.spawn(1), c.name)
        artifact, losses = hn_train(bundle, schedule, corpus, artifact, c.steps, rng.spawn(0), lr=c.lr,
                                    batch_size=c.batch)
        save_artifact(args.run / "hypernet.ckpt", artifact)
        outputs.append("hypernet.ckpt")
    else:
        c = cfg.lora
        artifact = lora_attach(bundle, c.rank, c.alpha, rng.spawn(1), c.name)
        artifact, losses = lora_train(bundle, schedule, corpus, artifact, c.steps, rng.spawn(0), lr=c.lr,
                                      batch_size=c.batch)
        save_artifact(args.run / "lora.ckpt", artifact)
        outputs.append("lora.ckpt")
    export_loss_csv(args.run / "loss.csv", losses)
    return outputs


def cmd_sample(args, cfg: RunConfig) -> list[str]:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    bundle = load_bundle(args.bundle)
    adapters = load_adapters(args.adapter)
    images = generate(bundle, _schedule(cfg), args.prompt, adapters, _sampler(cfg), _rng(cfg, "sample"), args.count)
    names = [f"sample_{i:03d}.png" for i in range(len(images))]
    for name, image in zip(names, images):
        atomic_write_bytes(args.run / name, png_bytes(image))
    return names


def cmd_merge_lora(args, cfg: RunConfig) -> list[str]:
    bundle = load_bundle(args.bundle)
    artifact = load_artifact(args.adapter)
    if not hasattr(artifact, "rank"):
        raise UsageError(f"{args.adapter} is not a LoRA artifact")
    save_bundle(args.run / "bundle.ckpt", lora_merge_bundle(bundle, artifact, args.weight))
    return ["bundle.ckpt"]


COMMANDS = {"gen-dataset": cmd_gen_dataset, "pretrain-vae": cmd_pretrain_vae, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "sample": cmd_sample, "merge-lora": cmd_merge_lora}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            print(json.dumps(read_manifest(args.path), indent=2, sort_keys=True))
            return 0
        cfg = resolve_config(args)
        outputs = COMMANDS[args.command](args, cfg)
        _write_manifest(args.run, args, cfg, outputs)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tinyldm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"tinyldm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
