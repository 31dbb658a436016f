import time

import numpy as np
import pytest

from ganfp import deploy
from ganfp.autodiff import ShapeError, no_grad
from ganfp.errors import FormatError
from ganfp.fingerprints import FingerprintSpace, fingerprint_digest
from ganfp.nets import ModelConfig, build_models
from ganfp.seeding import named_rng


CFG = ModelConfig(image_size=16, d_z=16, d_c=32, d_e=16, base_width=16,
                  encoder_layers=3)


@pytest.fixture(scope="module")
def models():
    return build_models(CFG, named_rng(42, "init"))


def dynamic_generate(models, z, c):
    with no_grad():
        e = models.encoder.forward(c.bits()[None, :])
        return models.generator.forward(z, e).data


def test_bake_equivalence(models):
    space = FingerprintSpace(CFG.d_c)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        c = space.sample(rng)
        z = rng.normal(size=(4, CFG.d_z)).astype(np.float32)
        inst = deploy.bake(models.encoder, models.generator, c)
        baked = deploy.generate_from_instance(inst, z)
        dynamic = dynamic_generate(models, z, c)
        worst = max(worst, float(np.abs(baked - dynamic).max()))
    assert worst < 1e-5


def test_bake_is_fast_and_deterministic(models):
    space = FingerprintSpace(CFG.d_c)
    c = space.sample(np.random.default_rng(1))
    t0 = time.perf_counter()
    inst = deploy.bake(models.encoder, models.generator, c, created_at=123.0)
    assert time.perf_counter() - t0 < 5.0
    inst2 = deploy.bake(models.encoder, models.generator, c, created_at=123.0)
    import io
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as td:
        pa, pb = Path(td) / "a.gfpr", Path(td) / "b.gfpr"
        deploy.save_instance(inst, pa)
        deploy.save_instance(inst2, pb)
        assert pa.read_bytes() == pb.read_bytes()


def test_bake_differs_across_fingerprints(models):
    space = FingerprintSpace(CFG.d_c)
    rng = np.random.default_rng(2)
    a = deploy.bake(models.encoder, models.generator, space.sample(rng))
    b = deploy.bake(models.encoder, models.generator, space.sample(rng))
    assert any(not np.array_equal(wa, wb)
               for wa, wb in zip(a.block_weights, b.block_weights))


def test_bake_rejects_wrong_length(models):
    with pytest.raises(ShapeError, match="does not match"):
        deploy.bake(models.encoder, models.generator,
                    FingerprintSpace(8).sample(np.random.default_rng(0)))


def test_instance_round_trip(tmp_path, models):
    space = FingerprintSpace(CFG.d_c)
    c = space.sample(np.random.default_rng(3))
    inst = deploy.bake(models.encoder, models.generator, c, created_at=5.0)
    path = tmp_path / "inst.gfpr"
    deploy.save_instance(inst, path)
    loaded = deploy.load_instance(path)
    assert loaded.digest == inst.digest == fingerprint_digest(c)
    assert loaded.created_at == 5.0
    assert loaded.config == CFG
    for (na, a), (nb, b) in zip(inst.named_tensors(), loaded.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    z = np.random.default_rng(4).normal(size=(2, CFG.d_z)).astype(np.float32)
    np.testing.assert_array_equal(deploy.generate_from_instance(inst, z),
                                  deploy.generate_from_instance(loaded, z))


def test_instance_contains_no_fingerprint_bits(tmp_path, models):
    space = FingerprintSpace(CFG.d_c)
    c = space.sample(np.random.default_rng(5))
    inst = deploy.bake(models.encoder, models.generator, c, created_at=0.0)
    path = tmp_path / "inst.gfpr"
    deploy.save_instance(inst, path)
    blob = path.read_bytes()
    assert c.packed_bytes() not in blob
    assert inst.digest.hex().encode() in blob
    # only baked generator tensors make it into the file: no encoder
    # stack, no per-layer affines
    names = [name for name, _ in deploy.load_instance(path).named_tensors()]
    assert names and not any("affine" in n or n.startswith("encoder") for n in names)


def test_instance_corruption_detected(tmp_path, models):
    c = FingerprintSpace(CFG.d_c).sample(np.random.default_rng(6))
    inst = deploy.bake(models.encoder, models.generator, c, created_at=0.0)
    path = tmp_path / "inst.gfpr"
    deploy.save_instance(inst, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        deploy.load_instance(path)


def test_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "junk.gfpr"
    path.write_bytes(b"GF")
    with pytest.raises(FormatError, match="truncated"):
        deploy.load_instance(path)
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError, match="bad magic"):
        deploy.load_instance(path)


def test_type_mismatch_between_instance_and_archive(tmp_path, models):
    arch = tmp_path / "model.gfpa"
    deploy.save_archive(models, step=7, path=arch)
    with pytest.raises(FormatError, match="model archive file"):
        deploy.load_instance(arch)

    c = FingerprintSpace(CFG.d_c).sample(np.random.default_rng(7))
    inst_path = tmp_path / "inst.gfpr"
    deploy.save_instance(deploy.bake(models.encoder, models.generator, c,
                                     created_at=0.0), inst_path)
    with pytest.raises(FormatError, match="generator instance file"):
        deploy.load_archive(inst_path)


def test_archive_round_trip(tmp_path, models):
    path = tmp_path / "model.gfpa"
    deploy.save_archive(models, step=123, path=path)
    loaded, step = deploy.load_archive(path)
    assert step == 123
    assert loaded.config == CFG
    for net_a, net_b in ((models.encoder, loaded.encoder),
                         (models.generator, loaded.generator),
                         (models.discriminator, loaded.discriminator),
                         (models.decoder, loaded.decoder)):
        for (na, ta), (nb, tb) in zip(net_a.named_parameters(),
                                      net_b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
    assert deploy.archive_step(path) == 123

    # saving the loaded archive reproduces the file byte for byte
    path2 = tmp_path / "again.gfpa"
    deploy.save_archive(loaded, step=123, path=path2)
    assert path.read_bytes() == path2.read_bytes()


def test_generate_from_instance_contract(models):
    c = FingerprintSpace(CFG.d_c).sample(np.random.default_rng(8))
    inst = deploy.bake(models.encoder, models.generator, c)
    z = np.random.default_rng(9).normal(size=(3, CFG.d_z)).astype(np.float32)
    out = deploy.generate_from_instance(inst, z)
    assert out.shape == (3, CFG.channels, CFG.image_size, CFG.image_size)
    np.testing.assert_array_equal(out, deploy.generate_from_instance(inst, z))
    with pytest.raises(ShapeError):
        deploy.generate_from_instance(inst, np.zeros((1, 7), dtype=np.float32))
