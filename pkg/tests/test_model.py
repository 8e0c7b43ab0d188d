import numpy as np
import pytest

from aaformer import tensor as T
from aaformer.model import AAformer, ConfigError, ModelConfig, ModelOutput, extract_descriptor, patchify
from aaformer.tensor import Tensor

from conftest import check_grads


def small_cfg(**kw):
    base = dict(image_h=64, image_w=48, patch_size=16, stride=16, embed_dim=32, heads=4, layers=2,
                granularity_sets=(2, 3))
    base.update(kw)
    return ModelConfig(**base)


class TestPatchify:
    def test_paper_geometry_count(self):
        cfg = ModelConfig(image_h=384, image_w=256, patch_size=16, stride=16)
        assert cfg.num_patches == 384
        assert patchify(np.zeros((384, 256, 3)), cfg).shape == (384, 768)

    def test_single_patch(self, rng):
        cfg = ModelConfig(image_h=8, image_w=8, patch_size=8, stride=8, granularity_sets=(1,))
        img = rng.random((8, 8, 3))
        out = patchify(img, cfg)
        assert out.shape == (1, 192)
        np.testing.assert_array_equal(out[0], img.ravel())

    def test_content_preserved(self, rng):
        cfg = ModelConfig(image_h=32, image_w=32, patch_size=16, stride=16, granularity_sets=(2,))
        img = rng.random((32, 32, 3))
        out = patchify(img, cfg)
        assert out.shape == (4, 768)
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))
        # row-major grid: patch 1 is the top-right block
        np.testing.assert_array_equal(out[1], img[:16, 16:].ravel())
        np.testing.assert_array_equal(out[2], img[16:, :16].ravel())

    def test_overlapping_stride(self, rng):
        # stride I-4 gives a four pixel overlap
        cfg = ModelConfig(image_h=20, image_w=12, patch_size=8, stride=4, granularity_sets=(2,))
        assert cfg.grid == (4, 2)
        img = rng.random((20, 12, 3))
        out = patchify(img, cfg)
        np.testing.assert_array_equal(out[3], img[4:12, 4:12].ravel())
        np.testing.assert_array_equal(out[7], img[12:20, 4:12].ravel())

    def test_batched(self, rng):
        cfg = small_cfg()
        imgs = rng.random((3, 64, 48, 3))
        out = patchify(imgs, cfg)
        for b in range(3):
            np.testing.assert_array_equal(out[b], patchify(imgs[b], cfg))

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_h=30, image_w=24, patch_size=8, stride=8)

    def test_wrong_image_shape(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((24, 48, 3)), ModelConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(embed_dim=30, heads=4), dict(stride=9), dict(granularity_sets=()), dict(granularity_sets=(0,)),
        dict(granularity_sets=(19,)), dict(assignment="kmeans"), dict(rounding="floor"),
        dict(epsilon=0.0), dict(label_smoothing=1.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = small_cfg(assignment="nn", part_pos_embed=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


class TestForward:
    def test_shapes(self, rng):
        cfg = small_cfg()
        assert cfg.layout.length == 18
        model = AAformer(cfg, seed=0)
        out = model.forward(rng.random((64, 48, 3)))
        assert out.cls.shape == (32,)
        assert out.part_tokens.shape == (5, 32)
        assert len(out.traces) == 2
        for tr in out.traces:
            assert [m.part_of.shape for m in tr.masks] == [(4, 12), (4, 12)]
        assert extract_descriptor(out).shape == (192,)

    def test_batch_shapes_and_identical_images(self, rng):
        model = AAformer(small_cfg(), seed=1)
        img = rng.random((64, 48, 3))
        out = model.forward(np.stack([img, img, rng.random((64, 48, 3))]))
        assert out.cls.shape == (3, 32)
        assert out.cls.data[0].tobytes() == out.cls.data[1].tobytes()
        assert out.part_tokens.data[0].tobytes() == out.part_tokens.data[1].tobytes()
        d = extract_descriptor(out)
        assert np.linalg.norm(d[0] - d[1]) == 0.0
        single = model.forward(img)
        np.testing.assert_allclose(single.cls.data, out.cls.data[0], atol=1e-12)

    def test_deterministic_init_and_forward(self, rng):
        img = rng.random((2, 64, 48, 3))
        a = AAformer(small_cfg(), seed=5).forward(img)
        b = AAformer(small_cfg(), seed=5).forward(img)
        assert a.cls.data.tobytes() == b.cls.data.tobytes()
        c = AAformer(small_cfg(), seed=6).forward(img)
        assert not np.array_equal(a.cls.data, c.cls.data)

    def test_zero_blocks_cls_is_normed_embedding(self, rng):
        cfg = small_cfg()
        model = AAformer(cfg, seed=0)
        for name, t in model.params.items():
            if name.startswith("blocks.") and ("attn." in name or "mlp." in name):
                t.data[...] = 0
        out = model.forward(rng.random((64, 48, 3)))
        x = model.params["cls_token"].data[0] + model.params["pos_embed"].data[0]
        ref = (x - x.mean()) / np.sqrt(x.var() + cfg.ln_eps)
        np.testing.assert_allclose(out.cls.data, ref, atol=1e-12)

    def test_part_tokens_input_independent_outputs_adaptive(self, rng):
        model = AAformer(small_cfg(), seed=0)
        a = model.embed(rng.random((64, 48, 3))).data
        b = model.embed(rng.random((64, 48, 3))).data
        np.testing.assert_array_equal(a[1:6], b[1:6])
        np.testing.assert_array_equal(a[1:6], model.params["part_tokens"].data)
        oa = model.forward(rng.random((64, 48, 3))).part_tokens.data
        ob = model.forward(rng.random((64, 48, 3))).part_tokens.data
        assert not np.allclose(oa, ob)

    def test_part_position_embedding_flag(self, rng):
        cfg = small_cfg(part_pos_embed=True)
        model = AAformer(cfg, seed=0)
        assert model.params["pos_embed"].shape == (18, 32)
        z = model.embed(rng.random((64, 48, 3))).data
        np.testing.assert_allclose(z[1:6], model.params["part_tokens"].data + model.params["pos_embed"].data[13:],
                                   atol=1e-15)

    def test_msa_mode_has_no_traces(self, rng):
        out = AAformer(small_cfg(), seed=0).forward(rng.random((64, 48, 3)), mode="MSA")
        assert out.traces == [None, None]

    @pytest.mark.parametrize("mode", ["ot", "nn", "stripes"])
    def test_assignment_modes_same_shapes(self, rng, mode):
        out = AAformer(small_cfg(assignment=mode), seed=0).forward(rng.random((2, 64, 48, 3)))
        assert out.part_tokens.shape == (2, 5, 32)
        assert out.traces[0].membership().shape == (2, 4, 5, 12)

    def test_descriptors_batching(self, rng):
        model = AAformer(small_cfg(), seed=0)
        imgs = rng.random((5, 64, 48, 3))
        np.testing.assert_allclose(model.descriptors(imgs, batch_size=2), model.descriptors(imgs), atol=1e-12)


def test_descriptor_without_parts():
    cls = Tensor(np.arange(4.0))
    out = ModelOutput(cls=cls, part_tokens=Tensor(np.zeros((0, 4))))
    np.testing.assert_array_equal(extract_descriptor(out), cls.data)


def test_end_to_end_gradient(rng):
    cfg = ModelConfig(image_h=12, image_w=16, patch_size=4, stride=4, embed_dim=16, heads=2, layers=1,
                      granularity_sets=(2, 3), init_std=0.3)
    model = AAformer(cfg, seed=3)
    imgs = rng.random((2, 12, 16, 3))
    fixed = [tr.membership() for tr in model.forward(imgs).traces]
    w = rng.standard_normal((2, 6, 16))

    def loss():
        out = model.forward(imgs, fixed_assignments=fixed)
        z = T.concat([out.cls.reshape(2, 1, 16), out.part_tokens], axis=1)
        return (z * Tensor(w)).sum()
    assert check_grads(loss, model.params.values(), rng, 2) < 1e-4
