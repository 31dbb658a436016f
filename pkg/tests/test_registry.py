import math
from datetime import datetime, timezone

import numpy as np
import pytest

from ganfp.errors import RegistryError, RegistryFullError
from ganfp.fingerprints import (Fingerprint, FingerprintSpace, null_p_value)
from ganfp.registry import (AttributionResult, Registry, RegistryRecord,
                            load_registry, save_registry)


def test_first_registration_succeeds():
    reg = Registry(d_c=128)
    rec = reg.register("alice", np.random.default_rng(0))
    assert rec.user_id == "alice"
    assert rec.fingerprint.d_c == 128
    assert len(rec.digest) == 16
    assert len(reg) == 1


def test_registrations_enforce_separation():
    reg = Registry(d_c=128)
    rng = np.random.default_rng(1)
    for i in range(50):
        reg.register(f"user{i}", rng)
    assert reg.min_pairwise_distance() > 128 - 121


def test_register_validation():
    reg = Registry(d_c=32)
    with pytest.raises(ValueError, match="non-empty"):
        reg.register("", np.random.default_rng(0))
    with pytest.raises(ValueError, match="tabs"):
        reg.register("a\tb", np.random.default_rng(0))


def test_capacity_exhaustion_small_space():
    reg = Registry(d_c=4, threshold=4)
    rng = np.random.default_rng(3)
    registered = 0
    try:
        for i in range(16):
            reg.register(f"u{i}", rng)
            registered += 1
    except RegistryFullError:
        pytest.skip("seed exhausted resampling before filling the space")
    assert registered == 16
    with pytest.raises(RegistryFullError, match="effectively full"):
        reg.register("overflow", rng)


def test_attribute_empty_registry_is_real():
    reg = Registry(d_c=128)
    decoded = FingerprintSpace(128).sample(np.random.default_rng(0))
    res = reg.attribute(decoded)
    assert res.verdict == "real" and not res.attributed
    assert str(res) == "Real"


def test_attribute_exact_and_flipped():
    reg = Registry(d_c=128)
    rng = np.random.default_rng(5)
    rec = reg.register("alice", rng)
    reg.register("bob", rng)

    exact = reg.attribute(rec.fingerprint)
    assert exact.attributed and exact.user_id == "alice"
    assert exact.matching == 128
    assert exact.p_value == null_p_value(128, 128)
    assert exact.p_value == pytest.approx(0.5 ** 128)

    flip5 = Fingerprint(rec.fingerprint.value ^ ((1 << 5) - 1), 128)
    res5 = reg.attribute(flip5, threshold=121)
    assert res5.attributed and res5.user_id == "alice" and res5.matching == 123

    flip10 = Fingerprint(rec.fingerprint.value ^ ((1 << 10) - 1), 128)
    res10 = reg.attribute(flip10, threshold=121)
    assert not res10.attributed


def test_attribute_insertion_order_invariant():
    rng = np.random.default_rng(7)
    space = FingerprintSpace(64)
    fps = [space.sample(rng) for _ in range(6)]
    now = datetime.now(timezone.utc)

    def build(order):
        reg = Registry(d_c=64)
        for i in order:
            reg.records.append(RegistryRecord(fps[i], f"u{i}", b"\0" * 16, now))
        reg._packed = None
        return reg

    fwd = build(range(6))
    rev = build(reversed(range(6)))
    queries = [space.sample(rng) for _ in range(20)] + fps
    for q in queries:
        a, b = fwd.attribute(q), rev.attribute(q)
        assert (a.verdict, a.user_id, a.matching) == (b.verdict, b.user_id, b.matching)


def test_attribute_length_mismatch():
    reg = Registry(d_c=128)
    with pytest.raises(ValueError, match="mismatch"):
        reg.attribute(FingerprintSpace(64).sample(np.random.default_rng(0)))


def test_journal_round_trip(tmp_path):
    reg = Registry(d_c=128)
    rng = np.random.default_rng(8)
    for i in range(1000):
        reg.register(f"user{i}", rng, note=f"batch {i % 7}")
    path = tmp_path / "registry.tsv"
    save_registry(reg, path)
    loaded = load_registry(path)
    assert len(loaded) == 1000
    assert loaded.d_c == 128
    for a, b in zip(reg.records, loaded.records):
        assert a == b


def test_journal_append_on_register(tmp_path):
    path = tmp_path / "reg.tsv"
    path.touch()
    reg = load_registry(path, d_c=64)
    rng = np.random.default_rng(9)
    reg.register("alice", rng)
    reg.register("bob", rng)
    again = load_registry(path)
    assert [r.user_id for r in again.records] == ["alice", "bob"]
    assert again.records == reg.records


def test_journal_garbage_line(tmp_path):
    reg = Registry(d_c=64)
    reg.register("alice", np.random.default_rng(0))
    path = tmp_path / "reg.tsv"
    save_registry(reg, path)
    with open(path, "a") as fh:
        fh.write("this is not a record\n")
    with pytest.raises(RegistryError, match="line 2"):
        load_registry(path)


def test_empty_journal(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("")
    reg = load_registry(path, d_c=32)
    assert len(reg) == 0
    assert reg.d_c == 32


def test_duplicate_user_warns(tmp_path):
    reg = Registry(d_c=64)
    rng = np.random.default_rng(1)
    reg.register("alice", rng)
    reg.register("alice", rng)
    path = tmp_path / "reg.tsv"
    save_registry(reg, path)
    with pytest.warns(UserWarning, match="duplicate user_id"):
        load_registry(path)


def test_mixed_length_journal(tmp_path):
    r64 = Registry(d_c=64)
    r64.register("a", np.random.default_rng(0))
    r32 = Registry(d_c=32)
    r32.register("b", np.random.default_rng(0))
    path = tmp_path / "mixed.tsv"
    with open(path, "w") as fh:
        fh.write(r64.records[0].to_line() + "\n")
        fh.write(r32.records[0].to_line() + "\n")
    with pytest.raises(RegistryError, match="line 2"):
        load_registry(path)


def test_stats():
    reg = Registry(d_c=128)
    rng = np.random.default_rng(2)
    for i in range(10):
        reg.register(f"u{i}", rng)
    st = reg.stats()
    assert st["records"] == 10
    assert st["threshold"] == 121
    assert st["min_pairwise_distance"] == reg.min_pairwise_distance()
    assert st["capacity_magnitude"] == 36  # floor(121 * log10(2))
    assert st["headroom_magnitude"] == 35


def test_simulated_attribution_soundness_small():
    # scaled-down rehearsal of the acceptance-scale soundness run
    reg = Registry(d_c=128)
    rng = np.random.default_rng(11)
    for i in range(200):
        reg.register(f"u{i}", rng)
    flips = np.random.default_rng(12)
    correct = 0
    trials = 500
    for t in range(trials):
        idx = int(flips.integers(0, 200))
        bits = reg.records[idx].fingerprint.bits().copy()
        mask = flips.random(128) < 0.01
        bits[mask] ^= 1
        res = reg.attribute(Fingerprint.from_bits(bits))
        if res.attributed and res.user_id == f"u{idx}":
            correct += 1
    assert correct / trials >= 0.999

    space = FingerprintSpace(128)
    for t in range(500):
        res = reg.attribute(space.sample(flips))
        assert not res.attributed
