import subprocess
import sys
import threading

import numpy as np
import pytest

from capattack.encoders import (
    ContentCache,
    ToyCaptioner,
    ToyClip,
    ToyEncoder,
    cached_caption,
    cached_encode_image,
    caption,
    encode_image,
    encode_text,
    grad_wrt_image,
    load_captioner,
    load_clip,
    load_image_encoder,
)
from capattack.encoders.base import ImageEncoderAdapter, resize_bilinear, value_and_grad
from capattack.encoders.cache import image_digest
from capattack.errors import ConfigError, EncoderFailure, NonFiniteGradient, PipelineFailure, ShapeMismatch
from capattack.objectives import ObjectiveSpec, cs_loss, cs_loss_grad, sim_loss, sim_loss_grad, total_loss
from capattack.types import Embedding, ImageTensor

from conftest import random_image
from oracles import central_difference, relative_error


class TestToyEncoder:
    def test_protocol_and_shapes(self, toy):
        assert isinstance(toy, ImageEncoderAdapter)
        assert toy.encoder_id == "toy:seed=7,size=16x16,patch=4,dim=32,hidden=64"
        emb = encode_image(toy, random_image(np.random.default_rng(0)))
        assert emb.dim == 32 and emb.source == "image_encoder"

    def test_deterministic_across_instances(self, rng):
        img = random_image(rng)
        a = encode_image(ToyEncoder(), img).values
        b = encode_image(ToyEncoder(), img).values
        assert np.array_equal(a, b)

    def test_weight_seed_changes_model(self, rng):
        img = random_image(rng)
        assert not np.allclose(encode_image(ToyEncoder(1), img).values, encode_image(ToyEncoder(2), img).values)

    def test_resizes_to_input_size(self, toy, rng):
        big = ImageTensor(rng.random((32, 32, 3)))
        emb = encode_image(toy, big)
        assert emb.dim == toy.embedding_dim

    def test_rejects_byte_domain(self, toy):
        with pytest.raises(ShapeMismatch):
            encode_image(toy, ImageTensor(np.zeros((16, 16, 3), dtype=np.uint8), "byte"))

    def test_small_perturbations_move_embedding_little(self, toy, rng):
        img = random_image(rng)
        base = encode_image(toy, img).values
        for _ in range(5):
            noise = rng.uniform(-1e-4, 1e-4, img.shape)
            moved = encode_image(toy, ImageTensor(np.clip(img.data + noise, 0, 1))).values
            assert np.linalg.norm(moved - base) < 1e-2

    def test_pullback_matches_finite_differences(self, toy, rng):
        img = random_image(rng)
        w = rng.standard_normal(toy.embedding_dim)
        fd = central_difference(lambda x: float(w @ toy.encode(x)), img.data, h=1e-6)
        got = grad_wrt_image(toy, img, lambda e: (float(w @ e), w))
        assert relative_error(got, fd) < 1e-6

    def test_constant_loss_has_zero_gradient(self, toy, rng):
        grad = grad_wrt_image(toy, random_image(rng), lambda e: (3.0, np.zeros_like(e)))
        assert not np.any(grad)

    def test_grad_requires_encoder_resolution(self, toy, rng):
        with pytest.raises(ShapeMismatch):
            grad_wrt_image(toy, ImageTensor(rng.random((8, 8, 3))), lambda e: (0.0, e))


@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
def test_composite_gradient_matches_finite_differences(toy, rng, mode):
    clean = random_image(rng)
    ref = Embedding(toy.encode(random_image(rng).data))
    spec = ObjectiveSpec(mode, 0.1, ref, clean)
    x = np.clip(clean.data + rng.uniform(-0.05, 0.05, clean.shape), 0, 1)

    def f(z):
        return total_loss(spec, z, toy.encode(z))

    _, value, g = value_and_grad(toy, x, lambda e: (cs_loss(spec, e), cs_loss_grad(spec, e)))
    g = g + 0.1 * sim_loss_grad(clean.data, x)
    assert value + 0.1 * sim_loss(clean.data, x) == pytest.approx(f(x), abs=1e-12)
    assert relative_error(g, central_difference(f, x, h=1e-6)) < 1e-5


def test_lambda_zero_gradient_is_pure_cs(toy, rng):
    clean = random_image(rng)
    ref = Embedding(toy.encode(random_image(rng).data))
    spec = ObjectiveSpec("targeted", 0.0, ref, clean)
    x = np.clip(clean.data + 0.02, 0, 1)
    fd = central_difference(lambda z: cs_loss(spec, toy.encode(z)), x, h=1e-6)
    _, _, g = value_and_grad(toy, x, lambda e: (cs_loss(spec, e), cs_loss_grad(spec, e)))
    assert relative_error(g, fd) < 1e-5


class _Broken:
    encoder_id = "broken"
    embedding_dim = 4
    input_size = (16, 16)

    def __init__(self, value=np.nan, raise_exc=None):
        self.value = value
        self.raise_exc = raise_exc

    def forward(self, pixels):
        if self.raise_exc:
            raise self.raise_exc
        return np.full(4, 1.0), lambda cot: np.full(pixels.shape, self.value)

    def encode(self, pixels):
        if self.raise_exc:
            raise self.raise_exc
        return np.full(4, self.value)


def test_non_finite_gradient_detected(rng):
    with pytest.raises(NonFiniteGradient):
        value_and_grad(_Broken(), random_image(rng).data, lambda e: (1.0, e))


def test_backend_errors_become_encoder_failure(rng):
    with pytest.raises(EncoderFailure):
        encode_image(_Broken(raise_exc=RuntimeError("oom")), random_image(rng))
    with pytest.raises(EncoderFailure):
        value_and_grad(_Broken(raise_exc=RuntimeError("oom")), random_image(rng).data, lambda e: (1.0, e))


def test_resize_bilinear_identity_and_constant(rng):
    x = rng.random((6, 6, 3))
    assert resize_bilinear(x, (6, 6)) is x
    c = np.full((5, 7, 3), 0.25)
    assert np.allclose(resize_bilinear(c, (11, 3)), 0.25)


class TestToyText:
    def test_captions_are_nonempty_and_deterministic(self, rng):
        cap = ToyCaptioner(ToyEncoder())
        img = random_image(rng)
        text = caption(cap, img)
        assert text and text == caption(cap, img)
        assert cap.decoding == "greedy"

    def test_text_encoder(self):
        clip = ToyClip(ToyEncoder())
        a = encode_text(clip.text_encoder, "A dog runs in the park")
        b = encode_text(clip.text_encoder, "a DOG runs in the park.")
        assert np.allclose(a.values, b.values)
        assert a.source == "text_encoder"
        with pytest.raises(ValueError):
            encode_text(clip.text_encoder, "   ")

    def test_empty_caption_is_pipeline_failure(self, rng):
        class Silent:
            pipeline_id = "silent"
            decoding = "greedy"

            def caption(self, pixels):
                return ""

        with pytest.raises(PipelineFailure):
            caption(Silent(), random_image(rng))


class TestRegistry:
    def test_toy_ids(self):
        enc = load_image_encoder("toy:seed=3,size=8x8,patch=4,dim=16,hidden=8")
        assert enc.input_size == (8, 8) and enc.embedding_dim == 16
        assert load_image_encoder("toy").encoder_id == ToyEncoder().encoder_id
        assert load_captioner("toy").pipeline_id.startswith("toycap:")
        assert load_clip("toy").clip_id.startswith("toyclip:")

    @pytest.mark.parametrize("bad", ["toy:seed", "toy:colour=3", "toy:dim=x", "resnet", "hf:"])
    def test_bad_ids(self, bad):
        with pytest.raises(ConfigError):
            load_image_encoder(bad)

    def test_bad_beam_suffix(self):
        with pytest.raises(ConfigError):
            load_captioner("hf:some/repo#wide")


class TestCache:
    def test_digest_keys_on_8bit_content(self, rng):
        byte = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
        unit = ImageTensor(byte / 255.0)
        assert image_digest(unit) == image_digest(ImageTensor(byte / 255.0))
        off_grid = ImageTensor(np.clip(unit.data + 1e-4, 0, 1))
        assert image_digest(off_grid) != image_digest(unit)

    def test_embedding_roundtrip_and_counts(self, tmp_path, toy, rng):
        cache = ContentCache(tmp_path)
        img = random_image(rng)
        first = cached_encode_image(toy, img, cache)
        second = cached_encode_image(toy, img, cache)
        assert np.array_equal(first.values, second.values)
        assert (cache.hits, cache.misses) == (1, 1)

    def test_caption_cache_bypasses_model(self, tmp_path, rng):
        cache = ContentCache(tmp_path)
        img = random_image(rng)
        cap = ToyCaptioner(ToyEncoder())
        text = cached_caption(cap, img, cache)

        class Exploding:
            pipeline_id = cap.pipeline_id
            decoding = "greedy"

            def caption(self, pixels):
                raise AssertionError("should have been served from cache")

        assert cached_caption(Exploding(), img, cache) == text

    def test_concurrent_writers(self, tmp_path, toy, rng):
        cache = ContentCache(tmp_path)
        imgs = [random_image(rng) for _ in range(4)]
        expected = [toy.encode(i.data) for i in imgs]

        def work():
            for img in imgs:
                cached_encode_image(toy, img, cache)

        threads = [threading.Thread(target=work) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for img, exp in zip(imgs, expected):
            assert np.array_equal(cache.get_embedding(toy.encoder_id, img), exp)
        assert not list(tmp_path.rglob(".tmp-*"))


def test_attack_engine_does_not_import_torch():
    code = (
        "import sys, capattack.attack, capattack.objectives, capattack.encoders;"
        "print(any(m in sys.modules for m in ('torch', 'transformers')))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"


torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")


def _tiny_vit():
    cfg = transformers.ViTConfig(
        image_size=16, patch_size=4, hidden_size=8, num_hidden_layers=1,
        num_attention_heads=2, intermediate_size=16, hidden_act="tanh",
    )
    torch.manual_seed(0)
    return transformers.ViTModel(cfg, add_pooling_layer=False).double()


class TestHFAdapters:
    @pytest.mark.parametrize("pooling, dim", [("cls", 8), ("mean", 8), ("flatten", 17 * 8)])
    def test_image_encoder_gradient(self, rng, pooling, dim):
        from capattack.encoders.hf import HFImageEncoder

        enc = HFImageEncoder(_tiny_vit(), "tiny", [0.5] * 3, [0.5] * 3, (16, 16), pooling)
        assert enc.embedding_dim == dim
        img = random_image(rng)
        w = rng.standard_normal(dim)
        fd = central_difference(lambda x: float(w @ enc.encode(x)), img.data, h=1e-6)
        got = grad_wrt_image(enc, img, lambda e: (float(w @ e), w))
        assert relative_error(got, fd) < 1e-6
        assert np.allclose(enc.forward(img.data)[0], enc.encode(img.data))

    def test_image_encoder_resizes_inside(self, rng):
        from capattack.encoders.hf import HFImageEncoder

        enc = HFImageEncoder(_tiny_vit(), "tiny", [0.5] * 3, [0.5] * 3, (16, 16))
        x = rng.random((16, 16, 3))
        emb, pull = enc.forward(x)
        assert pull(np.ones_like(emb)).shape == x.shape

    def test_clip_adapter(self, rng):
        from capattack.encoders.hf import HFClip

        cfg = transformers.CLIPConfig(
            text_config=dict(vocab_size=50, hidden_size=8, intermediate_size=16, num_hidden_layers=1,
                             num_attention_heads=2, max_position_embeddings=16),
            vision_config=dict(image_size=16, patch_size=4, hidden_size=8, intermediate_size=16,
                               num_hidden_layers=1, num_attention_heads=2),
            projection_dim=6,
        )
        torch.manual_seed(0)
        model = transformers.CLIPModel(cfg).double()

        def tokenizer(texts, **_):
            ids = [[1 + (sum(map(ord, w)) % 48) for w in t.split()] + [49] for t in texts]
            return {"input_ids": torch.tensor(ids), "attention_mask": torch.ones(len(ids), len(ids[0]), dtype=torch.long)}

        clip = HFClip(model, tokenizer, "tinyclip", [0.5] * 3, [0.5] * 3, (16, 16))
        img = random_image(rng)
        assert encode_image(clip.image_encoder, img).dim == 6
        assert encode_text(clip.text_encoder, "a dog runs").dim == 6
        w = rng.standard_normal(6)
        fd = central_difference(lambda x: float(w @ clip.image_encoder.encode(x)), img.data, h=1e-6)
        got = grad_wrt_image(clip.image_encoder, img, lambda e: (float(w @ e), w))
        assert relative_error(got, fd) < 1e-6

    def test_captioner_greedy_is_deterministic(self, rng):
        from capattack.encoders.hf import HFCaptioner

        enc = transformers.ViTConfig(image_size=16, patch_size=4, hidden_size=8, num_hidden_layers=1,
                                     num_attention_heads=2, intermediate_size=16)
        dec = transformers.GPT2Config(vocab_size=20, n_embd=8, n_layer=1, n_head=2, n_positions=32,
                                      bos_token_id=0, eos_token_id=19, add_cross_attention=True, is_decoder=True)
        cfg = transformers.VisionEncoderDecoderConfig.from_encoder_decoder_configs(enc, dec)
        cfg.decoder_start_token_id, cfg.pad_token_id, cfg.eos_token_id = 0, 19, 19
        torch.manual_seed(0)
        model = transformers.VisionEncoderDecoderModel(cfg)

        class Tok:
            def batch_decode(self, ids, skip_special_tokens=True):
                return [" ".join(f"w{int(i)}" for i in row if int(i) not in (0, 19)) for row in ids]

        cap = HFCaptioner(model, Tok(), "tinycap", [0.5] * 3, [0.5] * 3, (16, 16))
        img = random_image(rng)
        assert cap.decoding == "greedy"
        assert caption(cap, img) == caption(cap, img)
