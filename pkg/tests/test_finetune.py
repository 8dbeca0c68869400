import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import changed, snapshot
from tinyldm.data import tokenize
from tinyldm.finetune import (
    EMBEDDING,
    DreamboothRun,
    Trainable,
    TrainableSelector,
    db_generate_class_images,
    db_selector,
    db_train,
    diffusion_loss,
    draw_batch,
    finetune_plain,
    generate,
    hn_build,
    hn_train,
    lora_attach,
    lora_merge,
    lora_merge_bundle,
    lora_train,
    mse_loss,
    pretrain,
    ti_extend_vocab,
    ti_train,
    train_step,
)
from tinyldm.finetune.step import caption_prompt
from tinyldm.networks import ModelBundle, ModelConfig, encode_text, predict_noise
from tinyldm.networks.attention import PROJECTIONS
from tinyldm.scheduler import SamplerConfig, timestep_embeddings
from tinyldm.tensor import Tensor
from tinyldm.tensor.rng import RngStream

FAST = SamplerConfig("ddim", steps=3, guidance=7.5)


def noise_inputs(bundle, seed=0, batch=2, prompt="bridge, sky"):
    x = RngStream(seed, 1).normal((batch, 8, 8, 4))
    ctx, mask = encode_text(bundle.text_encoder, np.stack([tokenize(bundle.vocab, prompt)] * batch))
    return x, timestep_embeddings([30] * batch, 64), ctx, mask


class TestLoss:
    def test_perfect_predictor_is_zero(self):
        eps = RngStream(0, 0).normal((2, 8, 8, 4))
        assert mse_loss(Tensor(eps), eps).item() == 0.0

    def test_constant_residual(self):
        eps = RngStream(0, 0).normal((2, 8, 8, 4))
        assert mse_loss(Tensor(eps + 2.0), eps).item() == pytest.approx(4.0, rel=1e-6)

    def test_prior_term_adds_with_weight(self, bundle, schedule, small_corpus):
        params = bundle.parameters()
        trainable = Trainable(params, db_selector(bundle))
        batch = draw_batch(bundle, small_corpus, caption_prompt, 2, RngStream(1, 0))
        prior = draw_batch(bundle, small_corpus, lambda p, r: "a bridge", 2, RngStream(1, 1))
        rng = RngStream(2, 2)
        inst = diffusion_loss(bundle, schedule, *batch, rng.spawn(0)).item()
        cls = diffusion_loss(bundle, schedule, *prior, rng.spawn(1)).item()
        got = train_step(bundle, schedule, batch, trainable, rng, 1e-5, prior, prior_weight=0.5)
        assert got == pytest.approx(inst + 0.5 * cls, rel=1e-6)

    def test_unknown_selector_id(self, bundle):
        with pytest.raises(KeyError, match="ghost"):
            Trainable(bundle.parameters(), TrainableSelector("lora", {"ghost"}))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            TrainableSelector("distill", set())


class TestPretrain:
    def test_zero_steps_is_noop(self, bundle, schedule, small_corpus):
        before = snapshot(bundle.parameters())
        assert pretrain(bundle, schedule, small_corpus, 0, RngStream(0, 0)) == []
        assert not changed(before, bundle.parameters())

    def test_only_denoiser_changes(self, bundle, schedule, small_corpus):
        before = snapshot(bundle.parameters())
        losses = pretrain(bundle, schedule, small_corpus, 3, RngStream(0, 0), batch_size=4)
        diff = changed(before, bundle.parameters())
        assert len(losses) == 3 and diff
        assert all(k.startswith("unet.") for k in diff)

    def test_needs_pretrained_vae(self, vocab, schedule, small_corpus):
        fresh = ModelBundle.create(ModelConfig(), vocab.copy())
        with pytest.raises(ValueError, match="VAE"):
            pretrain(fresh, schedule, small_corpus, 1, RngStream(0, 0))


class TestTextualInversion:
    def test_extend_copies_init_row(self, bundle):
        row = bundle.text_encoder.token_embedding.data[bundle.vocab.id("bridge")].copy()
        token_id, art = ti_extend_vocab(bundle, "<the core bridge>", "bridge")
        assert token_id == 256 == bundle.vocab.base_size
        assert np.array_equal(bundle.text_encoder.token_embedding.data[256], row)
        assert np.array_equal(art.vectors[0], row)

    def test_two_placeholders(self, bundle):
        a, _ = ti_extend_vocab(bundle, "<one>", "bridge")
        b, _ = ti_extend_vocab(bundle, "<two>", "bridge")
        assert (a, b) == (256, 257)
        assert bundle.text_encoder.token_embedding.shape[0] == 258

    def test_multi_token_init_rejected(self, bundle):
        with pytest.raises(ValueError):
            ti_extend_vocab(bundle, "<x>", "stone bridge")

    def test_duplicate_placeholder_rejected(self, bundle):
        ti_extend_vocab(bundle, "<x>", "bridge")
        with pytest.raises(ValueError):
            ti_extend_vocab(bundle, "<x>", "bridge")

    def test_missing_placeholder_rejected(self, bundle, schedule, style_corpus):
        with pytest.raises(KeyError):
            ti_train(bundle, schedule, style_corpus, "<never added>", 1, RngStream(0, 0))

    def test_zero_steps_keeps_init_vector(self, bundle, schedule, style_corpus):
        _, init = ti_extend_vocab(bundle, "<p>", "bridge")
        art, losses = ti_train(bundle, schedule, style_corpus, "<p>", 0, RngStream(0, 0))
        assert losses == [] and np.array_equal(art.vectors, init.vectors)

    def test_only_placeholder_row_moves(self, bundle, schedule, style_corpus):
        token_id, _ = ti_extend_vocab(bundle, "<p>", "bridge")
        before = snapshot(bundle.parameters())
        nonzero_rows = []
        hook = lambda g: nonzero_rows.append(np.flatnonzero(np.abs(g[EMBEDDING]).sum(axis=1)).tolist())  # noqa: E731
        art, _ = ti_train(bundle, schedule, style_corpus, "<p>", 4, RngStream(0, 0), batch_size=4, grad_hook=hook)
        after = bundle.parameters()
        assert changed(before, after) == {EMBEDDING}
        table_before, table_after = before[EMBEDDING], after[EMBEDDING].data
        assert np.array_equal(np.delete(table_before, token_id, 0), np.delete(table_after, token_id, 0))
        assert np.linalg.norm(table_after[token_id] - table_before[token_id]) > 0
        assert nonzero_rows == [[token_id]] * 4
        assert np.array_equal(art.vectors[0], table_after[token_id])


class TestDreambooth:
    def test_run_prompts(self):
        run = DreamboothRun()
        assert (run.instance_prompt, run.class_prompt) == ("a beike bridge", "a bridge")

    def test_same_tokens_rejected(self):
        with pytest.raises(ValueError):
            DreamboothRun(instance_token="bridge", class_token="bridge")

    def test_unknown_instance_token(self, bundle, schedule, style_corpus):
        run = DreamboothRun(instance_token="zzyzx", class_images=style_corpus)
        with pytest.raises(ValueError, match="zzyzx"):
            db_train(bundle, schedule, style_corpus, run, 1, RngStream(0, 0))

    def test_class_image_count_and_cache(self, bundle, schedule, tmp_path):
        images = db_generate_class_images(bundle, schedule, "a bridge", 20 * 5, SamplerConfig(steps=1),
                                          RngStream(0, 3), out_dir=tmp_path)
        assert len(images) == 100
        assert len(list(tmp_path.glob("*.png"))) == 100
        assert (tmp_path / "class_0000.txt").read_text().strip() == "a bridge"

    def test_class_images_deterministic(self, bundle, schedule):
        a = db_generate_class_images(bundle, schedule, "a bridge", 3, FAST, RngStream(0, 3))
        b = db_generate_class_images(bundle, schedule, "a bridge", 3, FAST, RngStream(0, 3))
        assert np.array_equal(a.images(), b.images())

    def test_zero_count_rejected(self, bundle, schedule):
        with pytest.raises(ValueError):
            db_generate_class_images(bundle, schedule, "a bridge", 0, FAST, RngStream(0, 0))

    def test_untrained_bundle_rejected(self, vocab, schedule):
        with pytest.raises(ValueError):
            db_generate_class_images(ModelBundle.create(ModelConfig(), vocab.copy()), schedule, "a bridge", 1,
                                     FAST, RngStream(0, 0))

    def test_zero_prior_weight_equals_plain_finetune(self, bundle, schedule, style_corpus, small_corpus):
        run = DreamboothRun(class_images=small_corpus, prior_weight=0.0)
        tuned, db_losses = db_train(bundle, schedule, style_corpus, run, 3, RngStream(5, 5), lr=1e-4)
        plain, plain_losses = finetune_plain(bundle, schedule, style_corpus, run.instance_prompt, 3,
                                             RngStream(5, 5), lr=1e-4)
        assert db_losses == plain_losses
        assert all(np.array_equal(p.data, plain.parameters()[k].data) for k, p in tuned.parameters().items())

    def test_only_denoiser_changes_and_input_untouched(self, bundle, schedule, style_corpus, small_corpus):
        before = snapshot(bundle.parameters())
        run = DreamboothRun(class_images=small_corpus)
        tuned, _ = db_train(bundle, schedule, style_corpus, run, 2, RngStream(5, 5), lr=1e-4)
        assert not changed(before, bundle.parameters())
        diff = changed(before, tuned.parameters())
        assert diff and all(k.startswith("unet.") for k in diff)

    def test_text_encoder_flag(self, bundle):
        off, on = db_selector(bundle), db_selector(bundle, train_text_encoder=True)
        assert not any(k.startswith("text.") for k in off.ids)
        assert any(k.startswith("text.") for k in on.ids)


class TestHypernetwork:
    def test_widths(self, bundle):
        art = hn_build(bundle, (1, 2, 1))
        assert art.widths == [64, 128, 64]
        site = bundle.sites[0].site_id
        assert art.params[f"{site}.k.0.weight"].shape == (128, 64)
        assert art.params[f"{site}.k.1.weight"].shape == (64, 128)
        assert art.activation == "linear"

    def test_normal_init_statistics(self, bundle):
        art = hn_build(bundle, init="normal", rng=RngStream(1, 1))
        weights = np.concatenate([p.data.ravel() for k, p in art.params.items() if k.endswith("weight")])
        assert abs(weights.std() - 0.01) < 5e-4
        assert all(not p.data.any() for k, p in art.params.items() if k.endswith("bias"))

    @pytest.mark.parametrize("mults", [(1, 2), (2, 1), (1,)])
    def test_bad_multipliers(self, bundle, mults):
        with pytest.raises(ValueError):
            hn_build(bundle, mults)

    def test_unknown_activation(self, bundle):
        with pytest.raises(ValueError):
            hn_build(bundle, activation="tanh")

    def test_zero_final_is_passthrough(self, bundle):
        art = hn_build(bundle, init="zero-final", activation="relu", rng=RngStream(2, 2))
        args = noise_inputs(bundle)
        plain = predict_noise(bundle.denoiser, *args).data
        hooked = predict_noise(bundle.denoiser, *args, art.hooks(1.0)).data
        assert np.array_equal(plain, hooked)

    def test_site_mismatch(self, bundle, schedule, style_corpus):
        art = hn_build(bundle)
        art.params = {k: v for k, v in art.params.items() if not k.startswith(bundle.sites[0].site_id)}
        with pytest.raises(ValueError, match="sites"):
            hn_train(bundle, schedule, style_corpus, art, 1, RngStream(0, 0))

    def test_only_hypernetwork_changes(self, bundle, schedule, style_corpus):
        art = hn_build(bundle, rng=RngStream(3, 3))
        before, art_before = snapshot(bundle.parameters()), snapshot(art.params)
        _, losses = hn_train(bundle, schedule, style_corpus, art, 2, RngStream(0, 0), batch_size=4)
        assert len(losses) == 2
        assert not changed(before, bundle.parameters())
        assert changed(art_before, art.params) == set(art.params)


class TestLora:
    def test_fresh_adapter_is_bit_identical(self, bundle):
        art = lora_attach(bundle, rank=4, rng=RngStream(1, 1))
        args = noise_inputs(bundle)
        assert np.array_equal(predict_noise(bundle.denoiser, *args).data,
                              predict_noise(bundle.denoiser, *args, art.hooks()).data)

    def test_shapes_and_defaults(self, bundle):
        art = lora_attach(bundle)
        assert art.rank == 4 and art.scale == 1.0
        site = bundle.sites[0]
        for proj in PROJECTIONS:
            a, b = art.pair(site.site_id, proj)
            assert a.shape == (4, site.projection(proj).shape[1])
            assert b.shape == (site.projection(proj).shape[0], 4) and not b.data.any()

    def test_rank_32_at_full_width(self, vocab):
        big = ModelBundle.create(ModelConfig(d_model=320, d_txt=768, heads=8, text_layers=1), vocab.copy())
        art = lora_attach(big, rank=32)
        assert art.pair(big.sites[0].site_id, "k")[0].shape == (32, 768)

    @pytest.mark.parametrize("rank", [0, 65])
    def test_rank_bounds(self, bundle, rank):
        with pytest.raises(ValueError):
            lora_attach(bundle, rank=rank)

    def test_merge_hand_example(self):
        merged = lora_merge(np.eye(2), np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]), alpha=1, rank=1)
        np.testing.assert_array_equal(merged, [[4.0, 6.0], [4.0, 9.0]])

    def test_merge_zero_b(self):
        w = RngStream(0, 0).normal((3, 5))
        assert np.array_equal(lora_merge(w, np.ones((2, 5)), np.zeros((3, 2)), 2.0, 2), w)

    def test_merge_shape_mismatch(self):
        with pytest.raises(ValueError):
            lora_merge(np.eye(3), np.ones((2, 4)), np.ones((3, 2)), 1.0, 2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.floats(0.5, 8.0), st.integers(0, 10_000))
    def test_merge_then_subtract_recovers(self, rank, alpha, seed):
        r = RngStream(seed, 0)
        w, a, b = r.spawn(0).normal((6, 5)), r.spawn(1).normal((rank, 5)), r.spawn(2).normal((6, rank))
        merged = lora_merge(w, a, b, alpha, rank)
        np.testing.assert_allclose(merged - (alpha / rank) * (b @ a), w, atol=1e-6)

    def test_merged_matches_runtime(self, bundle):
        art = lora_attach(bundle, rank=4, rng=RngStream(1, 1))
        for i, p in enumerate(art.params.values()):
            if p.name.endswith(".B"):
                p.data = RngStream(7, i).normal(p.shape) * np.float32(0.05)
        merged = lora_merge_bundle(bundle, art)
        worst = 0.0
        for k in range(100):
            args = noise_inputs(bundle, seed=k, batch=1)
            runtime = predict_noise(bundle.denoiser, *args, art.hooks()).data
            folded = predict_noise(merged.denoiser, *args).data
            worst = max(worst, float(np.abs(runtime - folded).max()))
        assert worst <= 1e-5

    def test_only_lora_changes(self, bundle, schedule, style_corpus):
        art = lora_attach(bundle, rng=RngStream(3, 3))
        before, art_before = snapshot(bundle.parameters()), snapshot(art.params)
        _, losses = lora_train(bundle, schedule, style_corpus, art, 2, RngStream(0, 0), batch_size=4, lr=1e-2)
        assert len(losses) == 2
        assert not changed(before, bundle.parameters())
        assert {k.rsplit(".", 1)[1] for k in changed(art_before, art.params)} >= {"B"}


class TestGenerate:
    def test_deterministic(self, bundle, schedule):
        a = generate(bundle, schedule, "a bridge", {}, FAST, RngStream(4, 4), count=2)
        b = generate(bundle, schedule, "a bridge", {}, FAST, RngStream(4, 4), count=2)
        assert a.shape == (2, 32, 32, 3) and np.array_equal(a, b)

    def test_chunking_only_changes_rounding(self, bundle, schedule):
        a = generate(bundle, schedule, "a bridge", {}, FAST, RngStream(4, 4), count=3)
        b = generate(bundle, schedule, "a bridge", {}, FAST, RngStream(4, 4), count=3, chunk=1)
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_zero_weight_adapters_are_inert(self, bundle, schedule):
        lora = lora_attach(bundle, rng=RngStream(1, 1))
        for p in lora.params.values():
            p.data = p.data + np.float32(0.1)
        hn = hn_build(bundle, rng=RngStream(2, 2))
        adapters = {"aki": lora, "coral_shell_bridge": hn}
        base = generate(bundle, schedule, "bridge, sky", {}, FAST, RngStream(4, 4))
        zero = generate(bundle, schedule, "bridge, sky, <lora:aki:0>, <hypernet:coral_shell_bridge:0>", adapters,
                        FAST, RngStream(4, 4))
        full = generate(bundle, schedule, "bridge, sky, <lora:aki:1>", adapters, FAST, RngStream(4, 4))
        assert np.array_equal(base, zero)
        assert not np.array_equal(base, full)

    def test_unknown_adapter_lists_available(self, bundle, schedule):
        adapters = {"aki": lora_attach(bundle)}
        with pytest.raises(KeyError, match="aki"):
            generate(bundle, schedule, "bridge, <hypernet:missing:1>", adapters, FAST, RngStream(0, 0))

    def test_ti_placeholder_resolves_without_touching_base(self, bundle, schedule, vocab):
        trained = bundle.clone()
        _, art = ti_extend_vocab(trained, "<the core bridge>", "bridge")
        out = generate(bundle, schedule, "a photo of a <the core bridge>", {"ti": art}, FAST, RngStream(0, 0))
        assert out.shape == (1, 32, 32, 3)
        assert "<the core bridge>" not in bundle.vocab

