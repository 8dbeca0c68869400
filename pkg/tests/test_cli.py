import json
import re
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tinyldm.cli.checkpoint import (
    CorruptHeader,
    OverlappingOffsets,
    TruncatedPayload,
    decode_checkpoint,
    decode_header,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from tinyldm.cli.config import ConfigError, RunConfig, load_config
from tinyldm.cli.lossfile import export_loss_csv, loss_csv_text, read_loss_csv
from tinyldm.cli.main import main
from tinyldm.cli.prompt import PromptDirective, PromptError, parse_prompt
from tinyldm.cli.store import load_artifact, load_bundle, save_artifact, save_bundle
from tinyldm.finetune import ti_extend_vocab

HN_TRIGGER = ("a picture of bridge, no humans, outdoors, water, scenery, sky, reflection, day, "
              "<hypernet:coral_shell_bridge:1>")
LORA_TRIGGER = "bridge,no humans,outdoors,water,scenery,sky,reflection,day,<lora:aki:1>"


class TestParsePrompt:
    def test_lora_trigger(self):
        text, ds = parse_prompt("bridge,no humans,outdoors,<lora:aki:1>")
        assert text == "bridge,no humans,outdoors"
        assert ds == [PromptDirective("lora", "aki", 1.0)]

    def test_hypernet_trigger(self):
        text, ds = parse_prompt("a picture of bridge, <hypernet:coral_shell_bridge:1>")
        assert text == "a picture of bridge"
        assert ds == [PromptDirective("hypernet", "coral_shell_bridge", 1.0)]

    def test_full_sampling_triggers(self):
        assert parse_prompt(HN_TRIGGER)[0] == HN_TRIGGER.rsplit(",", 1)[0]
        assert parse_prompt(LORA_TRIGGER)[0] == LORA_TRIGGER.rsplit(",", 1)[0]

    def test_passthrough(self):
        assert parse_prompt(" a photo of a <the core bridge> ") == (" a photo of a <the core bridge> ", [])

    def test_order_and_weights(self):
        _, ds = parse_prompt("<lora:a:0.5>, sky, <hypernet:b:-.25>")
        assert [(d.name, d.weight) for d in ds] == [("a", 0.5), ("b", -0.25)]

    @pytest.mark.parametrize("bad", ["<lora:aki>", "<lora:aki:1:2>", "<lora:aki:one>", "<style:aki:1>",
                                     "<lora::1>", "<lora:aki:1e3>"])
    def test_malformed(self, bad):
        with pytest.raises(PromptError, match=re.escape(bad)):
            parse_prompt(f"bridge, {bad}")

    @given(st.lists(st.sampled_from(["bridge", "sky", " ", ",", "<lora:aki:1>", "<hypernet:x:0.5>", "<p q>"]),
                    max_size=10))
    def test_idempotent_on_clean_text(self, parts):
        text, _ = parse_prompt("".join(parts))
        assert parse_prompt(text) == (text, [])


class TestCheckpoint:
    def test_bundle_round_trip_and_fixed_point(self, bundle, tmp_path):
        save_bundle(tmp_path / "a.ckpt", bundle)
        back = load_bundle(tmp_path / "a.ckpt")
        for name, p in bundle.parameters().items():
            assert np.array_equal(p.data, back.parameters()[name].data) and p.dtype == back.parameters()[name].dtype
        assert back.vocab == bundle.vocab and back.config == bundle.config
        save_bundle(tmp_path / "b.ckpt", back)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    @settings(max_examples=30)
    @given(st.lists(arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
                           st.tuples(st.integers(0, 3), st.integers(1, 4))), max_size=4))
    def test_arbitrary_tensors_round_trip(self, arrs):
        tensors = {f"t{i}": a for i, a in enumerate(arrs)}
        back, meta = decode_checkpoint(encode_checkpoint(tensors, {"k": [1, "x"]}))
        assert meta == {"k": [1, "x"]} and list(back) == list(tensors)
        for k, a in tensors.items():
            assert back[k].dtype == a.dtype and back[k].tobytes() == a.tobytes()

    def test_header_is_readable_text(self):
        blob = encode_checkpoint({"w": np.ones((2, 3), np.float32)}, {"kind": "test"})
        header, start = decode_header(blob)
        assert blob[:start].decode("utf-8").startswith("tinyldm-checkpoint\n")
        assert header["version"] == 1 and header["payload_length"] == 24
        assert header["tensors"] == [{"dtype": "<f4", "length": 24, "name": "w", "offset": 0, "shape": [2, 3]}]

    def test_truncated_payload(self, tmp_path):
        blob = encode_checkpoint({"w": np.ones(8, np.float32)})
        (tmp_path / "c").write_bytes(blob[:-4])
        with pytest.raises(TruncatedPayload):
            load_checkpoint(tmp_path / "c")

    def test_tampered_payload_length(self):
        blob = encode_checkpoint({"w": np.ones(8, np.float32)})
        tampered = blob.replace(b'"payload_length": 32', b'"payload_length": 36')
        with pytest.raises(TruncatedPayload):
            decode_checkpoint(tampered + b"\0" * 4)

    def test_corrupt_header(self):
        blob = encode_checkpoint({"w": np.ones(2, np.float32)})
        with pytest.raises(CorruptHeader):
            decode_checkpoint(b"garbage" + blob)
        header, start = decode_header(blob)
        with pytest.raises(CorruptHeader):
            decode_checkpoint(blob[:start - 3] + b"}}}" + blob[start:])

    def test_overlapping_offsets(self):
        blob = encode_checkpoint({"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)})
        header, start = decode_header(blob)
        header["tensors"][1]["offset"] = 4
        header["payload_length"] = 12
        text = json.dumps(header).encode()
        forged = b"tinyldm-checkpoint\nheader-bytes: %d\n" % len(text) + text + b"\0" * 12
        with pytest.raises(OverlappingOffsets):
            decode_checkpoint(forged)

    def test_failed_save_leaves_no_file(self, tmp_path):
        with pytest.raises(TypeError):
            save_checkpoint(tmp_path / "x.ckpt", {"s": np.array(["str"])})
        assert list(tmp_path.iterdir()) == []

    def test_ti_artifact_layout(self, bundle, tmp_path):
        _, art = ti_extend_vocab(bundle, "<the core bridge>", "bridge")
        save_artifact(tmp_path / "ti.ckpt", art)
        tensors, meta = load_checkpoint(tmp_path / "ti.ckpt")
        assert list(tensors) == ["<the core bridge>"] and tensors["<the core bridge>"].shape == (1, 64)
        assert meta["token_id"] == 256
        back = load_artifact(tmp_path / "ti.ckpt")
        assert back.placeholder == "<the core bridge>" and np.array_equal(back.vectors, art.vectors)


class TestLossCsv:
    def test_single_step(self, tmp_path):
        export_loss_csv(tmp_path / "loss.csv", [0.25])
        assert (tmp_path / "loss.csv").read_bytes() == b"step,loss\n1,0.250000\n"

    def test_row_count(self):
        text = loss_csv_text(np.linspace(1, 0.1, 1000))
        lines = text.splitlines()
        assert lines[0] == "step,loss" and len(lines) == 1001 and lines[-1].startswith("1000,")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            loss_csv_text([])

    @given(st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=20))
    def test_six_significant_digits(self, losses):
        text = loss_csv_text(losses)
        for value, line in zip(losses, text.splitlines()[1:]):
            rendered = line.split(",")[1]
            assert float(rendered) == pytest.approx(value, rel=5e-6)
            assert len(rendered.replace(".", "").lstrip("0")) == 6 or "e" in rendered

    def test_read_back(self, tmp_path):
        export_loss_csv(tmp_path / "l.csv", [0.5, 0.25])
        assert read_loss_csv(tmp_path / "l.csv") == [0.5, 0.25]


class TestConfig:
    def test_defaults_carry_method_settings(self):
        cfg = RunConfig()
        assert (cfg.ti.steps, cfg.dreambooth.steps, cfg.hypernet.steps, cfg.lora.steps) == (500, 400, 300, 300)
        assert cfg.hypernet.multipliers == (1, 2, 1) and cfg.hypernet.activation == "linear"
        assert cfg.dreambooth.class_per_instance == 5 and cfg.dreambooth.instance_token == "beike"
        assert cfg.lora.rank == 4 and cfg.seed == 0 and cfg.sampler.guidance == 7.5

    def test_file_and_override(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = 3\n[lora]\nrank = 2\n")
        cfg = load_config(path, {"lora.steps": 7, "seed": None})
        assert (cfg.seed, cfg.lora.rank, cfg.lora.steps) == (3, 2, 7)

    @pytest.mark.parametrize("text", ["[lora]\nrnak = 2\n", "colour = 1\n", "[lora]\nrank = 'two'\n", "seed = ["])
    def test_bad_files_rejected(self, tmp_path, text):
        path = tmp_path / "c.toml"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_round_trip(self):
        cfg = RunConfig().override({"ti.lr": 0.1})
        assert RunConfig.from_dict(cfg.to_dict()) == cfg


SMALL_RUN = """
seed = 5
[sampler]
steps = 2
[pretrain]
vae_steps = 2
vae_batch = 4
steps = 3
batch = 4
[ti]
steps = 3
batch = 4
[dreambooth]
steps = 2
batch = 2
[hypernet]
steps = 3
batch = 4
[lora]
steps = 4
batch = 4
"""


def run_cli(*argv):
    return main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(SMALL_RUN)
    assert run_cli("gen-dataset", "--config", cfg, "--count", 9, "--run", root / "base") == 0
    assert run_cli("gen-dataset", "--config", cfg, "--style", "coral", "--count", 20, "--run", root / "coral") == 0
    assert run_cli("pretrain-vae", "--config", cfg, "--data", root / "base/data", "--run", root / "vae") == 0
    assert run_cli("pretrain", "--config", cfg, "--bundle", root / "vae/bundle.ckpt", "--data", root / "base/data",
                   "--run", root / "pre") == 0
    return root, cfg


def finetune(workspace, method, run, *extra):
    root, cfg = workspace
    return run_cli("finetune", method, "--config", cfg, "--bundle", root / "pre/bundle.ckpt",
                   "--data", root / "coral/data", "--run", root / run, *extra)


class TestCommands:
    def test_dataset_layout(self, workspace):
        root, _ = workspace
        data = root / "coral/data"
        assert len(list(data.glob("*.png"))) == len(list(data.glob("*.txt"))) == 20
        manifest = json.loads((root / "coral/run.json").read_text())
        assert manifest["command"] == "gen-dataset" and manifest["config"]["seed"] == 5

    @pytest.mark.parametrize("method, artifact", [("ti", "ti.ckpt"), ("hypernet", "hypernet.ckpt"),
                                                  ("lora", "lora.ckpt")])
    def test_adapter_methods(self, workspace, method, artifact):
        root, _ = workspace
        assert finetune(workspace, method, f"ft_{method}") == 0
        assert (root / f"ft_{method}" / artifact).is_file()
        assert len(read_loss_csv(root / f"ft_{method}/loss.csv")) == {"ti": 3, "hypernet": 3, "lora": 4}[method]

    def test_steps_flag_sets_row_count(self, workspace):
        root, _ = workspace
        assert finetune(workspace, "lora", "ft_lora_steps", "--steps", 6) == 0
        assert len(read_loss_csv(root / "ft_lora_steps/loss.csv")) == 6

    def test_dreambooth_materializes_class_images(self, workspace):
        root, _ = workspace
        assert finetune(workspace, "dreambooth", "ft_db") == 0
        assert len(list((root / "ft_db/class_images").glob("*.png"))) == 100
        assert load_bundle(root / "ft_db/bundle.ckpt").meta["dreambooth"]["instance_token"] == "beike"

    def test_sample_is_byte_identical(self, workspace):
        root, cfg = workspace
        if not (root / "ft_ti/ti.ckpt").exists():
            assert finetune(workspace, "ti", "ft_ti") == 0
        for run in ("s1", "s2"):
            assert run_cli("sample", "--config", cfg, "--bundle", root / "pre/bundle.ckpt", "--adapter",
                           root / "ft_ti/ti.ckpt", "--prompt", "a photo of a <the core bridge>", "--count", 4,
                           "--seed", 7, "--run", root / run) == 0
        names = sorted(p.name for p in (root / "s1").glob("*.png"))
        assert names == [f"sample_{i:03d}.png" for i in range(4)]
        assert all((root / "s1" / n).read_bytes() == (root / "s2" / n).read_bytes() for n in names)

    def test_training_is_byte_identical(self, workspace):
        root, _ = workspace
        for run in ("lora_a", "lora_b"):
            assert finetune(workspace, "lora", run) == 0
        for name in ("lora.ckpt", "loss.csv"):
            assert (root / "lora_a" / name).read_bytes() == (root / "lora_b" / name).read_bytes()

    def test_sample_with_lora_trigger_and_merge(self, workspace):
        root, cfg = workspace
        if not (root / "ft_lora/lora.ckpt").exists():
            assert finetune(workspace, "lora", "ft_lora") == 0
        assert run_cli("sample", "--config", cfg, "--bundle", root / "pre/bundle.ckpt", "--adapter",
                       root / "ft_lora/lora.ckpt", "--prompt", LORA_TRIGGER, "--run", root / "s_lora") == 0
        assert run_cli("merge-lora", "--config", cfg, "--bundle", root / "pre/bundle.ckpt", "--adapter",
                       root / "ft_lora/lora.ckpt", "--run", root / "merged") == 0
        assert load_bundle(root / "merged/bundle.ckpt").meta["merged_lora"][0]["name"] == "aki"

    def test_inspect(self, workspace, capsys):
        root, _ = workspace
        assert main(["inspect", str(root / "pre/bundle.ckpt")]) == 0
        header = json.loads(capsys.readouterr().out)
        assert header["version"] == 1 and header["metadata"]["kind"] == "bundle"

    def test_unknown_flag_exits_2(self, workspace):
        root, cfg = workspace
        with pytest.raises(SystemExit) as exc:
            run_cli("sample", "--bundle", root / "pre/bundle.ckpt", "--prompt", "x", "--run", root / "x", "--bogus")
        assert exc.value.code == 2

    def test_unknown_config_key_exits_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[lora]\nrnak = 3\n")
        assert run_cli("gen-dataset", "--config", bad, "--run", tmp_path / "r") == 2
        assert not (tmp_path / "r").exists()

    def test_runtime_failure_exits_1_without_outputs(self, workspace, tmp_path):
        root, cfg = workspace
        broken = tmp_path / "data"
        broken.mkdir()
        (broken / "a.png").write_bytes((root / "coral/data/coral_0000.png").read_bytes())
        code = run_cli("finetune", "lora", "--config", cfg, "--bundle", root / "pre/bundle.ckpt", "--data", broken,
                       "--run", tmp_path / "out")
        assert code == 1
        assert not (tmp_path / "out").exists()

    def test_unknown_adapter_exits_1(self, workspace, tmp_path):
        root, cfg = workspace
        code = run_cli("sample", "--config", cfg, "--bundle", root / "pre/bundle.ckpt",
                       "--prompt", "bridge, <lora:nobody:1>", "--run", tmp_path / "out")
        assert code == 1 and not (tmp_path / "out").exists()

    def test_console_entry_point(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "tinyldm.cli.main", "sample", "--nope"], capture_output=True,
                             text=True)
        assert out.returncode == 2 and "usage" in out.stderr
