import numpy as np
import pytest

from ganfp import autodiff as ad
from ganfp import nets
from ganfp.autodiff import Tape, Tensor
from ganfp.fingerprints import FingerprintSpace
from ganfp.nets import Decoder, Encoder, Generator, ModelConfig, build_models


CFG = ModelConfig(image_size=32, channels=3, d_z=64, d_c=128, d_e=64,
                  base_width=16)
TINY = ModelConfig(image_size=8, channels=3, d_z=8, d_c=16, d_e=8,
                   base_width=8, encoder_layers=3)


def models_for(cfg, seed=0, dtype=np.float32):
    return build_models(cfg, np.random.default_rng(seed), dtype=dtype)


def test_model_config_validation():
    with pytest.raises(ValueError, match="power of two"):
        ModelConfig(image_size=24)
    with pytest.raises(ValueError, match="names no generator layer"):
        ModelConfig(image_size=32, modulated_layers="64")
    assert ModelConfig(image_size=32).block_resolutions() == (8, 16, 32)
    assert ModelConfig(image_size=32, modulated_layers="16").is_modulated(16)
    assert not ModelConfig(image_size=32, modulated_layers="16").is_modulated(8)


def test_encode_deterministic_and_sensitive():
    m = models_for(CFG)
    space = FingerprintSpace(CFG.d_c)
    c = space.sample(np.random.default_rng(1))
    e1 = m.encoder.encode_fingerprint(c)
    e2 = m.encoder.encode_fingerprint(c)
    np.testing.assert_array_equal(e1, e2)
    assert e1.shape == (CFG.d_e,)

    flipped = space.sample(np.random.default_rng(1)).bits()
    flipped[0] ^= 1
    with ad.no_grad():
        e3 = m.encoder.forward(flipped[None, :]).data[0]
    assert not np.array_equal(e1, e3)


def test_encode_zero_weights_gives_zero_embedding():
    m = models_for(CFG)
    for p in m.encoder.parameters():
        p.data[...] = 0.0
    space = FingerprintSpace(CFG.d_c)
    for seed in (0, 1):
        e = m.encoder.encode_fingerprint(space.sample(np.random.default_rng(seed)))
        np.testing.assert_array_equal(e, np.zeros(CFG.d_e, dtype=np.float32))


def test_encode_length_mismatch():
    m = models_for(CFG)
    with pytest.raises(ad.ShapeError, match="does not match"):
        m.encoder.forward(np.zeros((1, 64), dtype=np.uint8))


def test_modulate_identity_and_scaling():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(nets.modulate(w, np.ones(2)), w)
    scaled = nets.modulate(w, np.array([2.0, 0.5]))
    np.testing.assert_allclose(scaled[:, 0], w[:, 0] * 2.0, rtol=1e-6)
    np.testing.assert_allclose(scaled[:, 1], w[:, 1] * 0.5, rtol=1e-6)
    with pytest.raises(ad.ShapeError):
        nets.modulate(w, np.ones(3))


def test_modulate_zero_scale_leaves_bias_only():
    m = models_for(TINY)
    block = m.generator.blocks[0]
    x = Tensor(np.random.default_rng(0).normal(size=(2, block.in_ch, 8, 8))
               .astype(np.float32))
    zero_scaled = Tensor(np.asarray(
        ad.conv2d(Tensor(x.data * 0.0), block.weight, 1, 1).data
        + block.bias.data[None, :, None, None]))
    kernel_zeroed = ad.conv2d(
        x, Tensor(nets.modulate(block.weight.data, np.zeros(block.in_ch))), 1, 1)
    np.testing.assert_allclose(
        kernel_zeroed.data + block.bias.data[None, :, None, None],
        zero_scaled.data, atol=1e-6)


def test_modulation_linearity():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(3, 5, 3, 3))
    s1 = rng.normal(size=5)
    s2 = rng.normal(size=5)
    a, b = 0.7, -1.3
    lhs = nets.modulate(w, a * s1 + b * s2)
    rhs = a * nets.modulate(w, s1) + b * nets.modulate(w, s2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-7)


def test_generate_shape_and_determinism():
    m = models_for(CFG)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, CFG.d_z)).astype(np.float32)
    bits = FingerprintSpace(CFG.d_c).sample_bits(rng, 2)
    with ad.no_grad():
        e = m.encoder.forward(bits)
        img1 = m.generator.forward(z, e).data
        img2 = m.generator.forward(z, e).data
    assert img1.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(img1, img2)
    assert np.all((img1 >= -1.0) & (img1 <= 1.0))


def test_generate_zeroed_affine_ignores_embedding():
    m = models_for(CFG)
    for block in m.generator.blocks:
        block.affine_w.data[...] = 0.0
        assert np.all(block.affine_b.data == 1.0)
    rng = np.random.default_rng(6)
    z = rng.normal(size=(1, CFG.d_z)).astype(np.float32)
    bits = FingerprintSpace(CFG.d_c).sample_bits(rng, 2)
    with ad.no_grad():
        ea = m.encoder.forward(bits[:1])
        eb = m.encoder.forward(bits[1:])
        img_a = m.generator.forward(z, ea).data
        img_b = m.generator.forward(z, eb).data
    np.testing.assert_array_equal(img_a, img_b)


def test_generate_modulation_is_live():
    m = models_for(CFG)
    rng = np.random.default_rng(7)
    z = rng.normal(size=(1, CFG.d_z)).astype(np.float32)
    bits = FingerprintSpace(CFG.d_c).sample_bits(rng, 2)
    with ad.no_grad():
        img_a = m.generator.forward(z, m.encoder.forward(bits[:1])).data
        img_b = m.generator.forward(z, m.encoder.forward(bits[1:])).data
    assert not np.array_equal(img_a, img_b)


def test_modulated_layer_selection_keeps_kernel_count():
    def kernel_params(cfg):
        m = models_for(cfg)
        return {name: t.data.shape for name, t in m.generator.named_parameters()
                if not name.endswith("affine.weight")
                and not name.endswith("affine.bias")}

    all_cfg = ModelConfig(image_size=32, base_width=16, modulated_layers="all")
    one_cfg = ModelConfig(image_size=32, base_width=16, modulated_layers="16")
    assert kernel_params(all_cfg) == kernel_params(one_cfg)

    m_one = models_for(one_cfg)
    assert [b.modulated for b in m_one.generator.blocks] == [False, True, False]


def test_discriminator_contract():
    m = models_for(CFG)
    rng = np.random.default_rng(8)
    imgs = rng.uniform(-1, 1, size=(5, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        s1 = m.discriminator.forward(imgs).data
        s2 = m.discriminator.forward(imgs).data
    assert s1.shape == (5, 1)
    np.testing.assert_array_equal(s1, s2)

    m.discriminator.head2_w.data *= 2.0
    m.discriminator.head2_b.data *= 2.0
    with ad.no_grad():
        doubled = m.discriminator.forward(imgs).data
    np.testing.assert_allclose(doubled, 2.0 * s1, rtol=1e-4)

    with pytest.raises(ad.ShapeError, match="does not match config"):
        m.discriminator.forward(np.zeros((1, 3, 16, 16), dtype=np.float32))


def test_decoder_contract():
    m = models_for(CFG)
    rng = np.random.default_rng(9)
    imgs = rng.uniform(-1, 1, size=(4, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        out = m.decoder.forward(imgs)
        z_hat, c_logits = m.decoder.split(out)
    assert out.shape == (4, CFG.d_z + CFG.d_c) == (4, 192)
    assert z_hat.shape == (4, 64)
    assert c_logits.shape == (4, 128)
    np.testing.assert_array_equal(
        np.concatenate([z_hat.data, c_logits.data], axis=1), out.data)


def test_decode_bits_sign_rule():
    logits = np.array([[-3.2, 0.1, -0.0001, 7.0]])
    np.testing.assert_array_equal(nets.decode_bits(logits), [[0, 1, 0, 1]])


def test_generate_end_to_end_gradients():
    cfg = TINY
    m = models_for(cfg, seed=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    z = Tensor(rng.normal(size=(1, cfg.d_z)), requires_grad=True, dtype=np.float64)
    bits = FingerprintSpace(cfg.d_c).sample_bits(rng, 1)

    def forward():
        e = m.encoder.forward(bits)
        img = m.generator.forward(z, e)
        return ad.tsum(ad.mul(img, img))

    with Tape() as tape:
        loss = forward()
        ad.backward(loss, tape)
    phi_w = m.generator.blocks[0].affine_w
    assert z.grad is not None and phi_w.grad is not None
    # h small enough that the difference quotient does not step across
    # LeakyReLU kinks; float64 keeps the quotient itself accurate
    for p in (z, phi_w):
        fd = ad.finite_difference_grad(forward, p, h=1e-5)
        assert ad.max_rel_err(p.grad, fd) < 1e-3
