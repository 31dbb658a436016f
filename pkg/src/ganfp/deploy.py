"""Baking fingerprints into standalone generator instances, plus the
serialization container shared by instances and full model archives.

Baking computes the fingerprint embedding once, folds every selected
layer's per-channel scale into its kernel, and keeps nothing else: the
resulting instance has no encoder, no affine maps, and no fingerprint
bits, only a 16-byte digest for registry cross-checks.  Its single input
is the latent vector.

File container ("GFPR" for instances, "GFPA" for archives): magic,
little-endian uint32 format version, a block of length-prefixed UTF-8
key=value header lines (config echo plus an ordered tensor manifest),
the float32 little-endian parameter payload, and a trailing CRC-32 of
everything between the version field and the checksum.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError
from .fingerprints import Fingerprint, fingerprint_digest
from .nets import (Decoder, Discriminator, Encoder, Generator, ModelConfig,
                   Models, modulate)

__all__ = [
    "GeneratorInstance", "bake", "generate_from_instance",
    "save_instance", "load_instance",
    "save_archive", "load_archive", "archive_step",
    "INSTANCE_MAGIC", "ARCHIVE_MAGIC", "FORMAT_VERSION",
]

INSTANCE_MAGIC = b"GFPR"
ARCHIVE_MAGIC = b"GFPA"
FORMAT_VERSION = 1


@dataclass
class GeneratorInstance:
    """Encoder-free generator with one fingerprint folded into its kernels."""

    config: ModelConfig
    seed_w: np.ndarray
    seed_b: np.ndarray
    block_weights: list[np.ndarray]   # baked kernels, OIHW, one per block
    block_biases: list[np.ndarray]
    rgb_w: np.ndarray
    rgb_b: np.ndarray
    digest: bytes                     # 16-byte fingerprint digest, not the bits
    created_at: float                 # unix seconds
    version: int = FORMAT_VERSION

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("seed.weight", self.seed_w), ("seed.bias", self.seed_b)]
        for r, wt, bs in zip(self.config.block_resolutions(),
                             self.block_weights, self.block_biases):
            out.append((f"b{r}.weight", wt))
            out.append((f"b{r}.bias", bs))
        out.append(("rgb.weight", self.rgb_w))
        out.append(("rgb.bias", self.rgb_b))
        return out


def bake(encoder: Encoder, generator: Generator, c: Fingerprint,
         created_at: float | None = None) -> GeneratorInstance:
    """Fold the fingerprint's per-layer scales into the generator kernels.

    ``created_at`` defaults to the wall clock; pass a fixed value when
    byte-identical instance files matter.
    """
    cfg = generator.config
    if c.d_c != cfg.d_c:
        raise ad.ShapeError(f"fingerprint length {c.d_c} does not match "
                            f"d_c={cfg.d_c}")
    embedding = encoder.encode_fingerprint(c)
    weights, biases = [], []
    with ad.no_grad():
        for block in generator.blocks:
            w = block.weight.data
            if block.modulated:
                scale = block.scales(Tensor(embedding[None, :])).data[0]
                w = modulate(w, scale)
            weights.append(np.array(w, dtype=np.float32))
            biases.append(np.array(block.bias.data, dtype=np.float32))
    return GeneratorInstance(
        config=cfg,
        seed_w=np.array(generator.seed_w.data, dtype=np.float32),
        seed_b=np.array(generator.seed_b.data, dtype=np.float32),
        block_weights=weights,
        block_biases=biases,
        rgb_w=np.array(generator.rgb_w.data, dtype=np.float32),
        rgb_b=np.array(generator.rgb_b.data, dtype=np.float32),
        digest=fingerprint_digest(c),
        created_at=time.time() if created_at is None else float(created_at),
    )


def generate_from_instance(inst: GeneratorInstance, z) -> np.ndarray:
    """Forward pass over baked kernels; the latent is the only input."""
    cfg = inst.config
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    if z.shape[1] != cfg.d_z:
        raise ad.ShapeError(f"latent length {z.shape[1]} does not match "
                            f"d_z={cfg.d_z}")
    n = z.shape[0]
    with ad.no_grad():
        x = ad.leaky_relu(ad.fully_connected(
            Tensor(z), Tensor(inst.seed_w), Tensor(inst.seed_b)), 0.2)
        x = ad.reshape(x, (n, 4, 4, cfg.width(4)))
        for w, b in zip(inst.block_weights, inst.block_biases):
            x = ad.upsample_nearest2_nhwc(x)
            x = ad.conv2d_nhwc(x, Tensor(w.transpose(2, 3, 1, 0)), 1, 1)
            x = ad.leaky_relu(ad.add(x, Tensor(b.reshape(1, 1, 1, -1))), 0.2)
        x = ad.conv2d_nhwc(x, Tensor(inst.rgb_w.transpose(2, 3, 1, 0)), 1, 0)
        x = ad.add(x, Tensor(inst.rgb_b.reshape(1, 1, 1, -1)))
        return ad.permute(ad.tanh(x), (0, 3, 1, 2)).data


# ---------------------------------------------------------------------------
# container encoding


def _config_items(config: ModelConfig) -> list[tuple[str, str]]:
    return [(f.name, str(getattr(config, f.name)))
            for f in dataclass_fields(ModelConfig)]


def _config_from_items(items: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclass_fields(ModelConfig):
        raw = items[f"config.{f.name}"]
        kwargs[f.name] = raw if f.type == "str" else int(raw)
    return ModelConfig(**kwargs)


def _encode_container(magic: bytes, headers: list[tuple[str, str]],
                      tensors: list[tuple[str, np.ndarray]]) -> bytes:
    lines = list(headers)
    for name, arr in tensors:
        shape = "x".join(str(d) for d in arr.shape)
        lines.append((f"tensor.{name}", shape))
    body = bytearray()
    body += np.uint32(len(lines)).tobytes()
    for key, value in lines:
        raw = f"{key}={value}".encode("utf-8")
        body += np.uint32(len(raw)).tobytes()
        body += raw
    for _, arr in tensors:
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body))
    blob = magic + np.uint32(FORMAT_VERSION).tobytes() + bytes(body) \
        + np.uint32(crc).tobytes()
    return blob


def _decode_container(blob: bytes, magic: bytes, path) -> tuple[dict, dict]:
    kind = {INSTANCE_MAGIC: "generator instance", ARCHIVE_MAGIC: "model archive"}
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated file")
    found = blob[:4]
    if found != magic:
        if found in kind:
            raise FormatError(f"{path}: this is a {kind[found]} file, "
                              f"expected a {kind[magic]}")
        raise FormatError(f"{path}: bad magic {found!r}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    body = blob[8:-4]
    crc_stored = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if zlib.crc32(body) != crc_stored:
        raise FormatError(f"{path}: checksum mismatch, file is corrupted")

    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(body):
            raise FormatError(f"{path}: truncated header")
        chunk = body[pos:pos + nbytes]
        pos += nbytes
        return chunk

    n_lines = int(np.frombuffer(take(4), dtype="<u4")[0])
    headers: dict[str, str] = {}
    tensor_shapes: list[tuple[str, tuple]] = []
    for _ in range(n_lines):
        ln = int(np.frombuffer(take(4), dtype="<u4")[0])
        key, _, value = take(ln).decode("utf-8").partition("=")
        if key.startswith("tensor."):
            shape = tuple(int(d) for d in value.split("x")) if value else ()
            tensor_shapes.append((key[len("tensor."):], shape))
        else:
            headers[key] = value
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} trailing payload bytes")
    return headers, tensors


def _write_atomic(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# instances


def save_instance(inst: GeneratorInstance, path) -> None:
    headers = [("artifact", "generator-instance"),
               ("digest", inst.digest.hex()),
               ("created_at", repr(inst.created_at))]
    headers += [(f"config.{k}", v) for k, v in _config_items(inst.config)]
    _write_atomic(path, _encode_container(INSTANCE_MAGIC, headers,
                                          inst.named_tensors()))


def load_instance(path) -> GeneratorInstance:
    headers, tensors = _decode_container(Path(path).read_bytes(),
                                         INSTANCE_MAGIC, path)
    config = _config_from_items(headers)
    try:
        blocks_w = [tensors[f"b{r}.weight"] for r in config.block_resolutions()]
        blocks_b = [tensors[f"b{r}.bias"] for r in config.block_resolutions()]
        inst = GeneratorInstance(
            config=config,
            seed_w=tensors["seed.weight"], seed_b=tensors["seed.bias"],
            block_weights=blocks_w, block_biases=blocks_b,
            rgb_w=tensors["rgb.weight"], rgb_b=tensors["rgb.bias"],
            digest=bytes.fromhex(headers["digest"]),
            created_at=float(headers["created_at"]),
            version=FORMAT_VERSION,
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor or header {exc}") from None
    return inst


# ---------------------------------------------------------------------------
# archives (all four networks + config + training step)


def save_archive(models: Models, step: int, path) -> None:
    headers = [("artifact", "model-archive"), ("step", str(int(step)))]
    headers += [(f"config.{k}", v) for k, v in _config_items(models.config)]
    tensors = []
    for prefix, net in (("encoder", models.encoder),
                        ("generator", models.generator),
                        ("discriminator", models.discriminator),
                        ("decoder", models.decoder)):
        for name, t in net.named_parameters():
            tensors.append((f"{prefix}.{name}", t.data))
    _write_atomic(path, _encode_container(ARCHIVE_MAGIC, headers, tensors))


def load_archive(path) -> tuple[Models, int]:
    headers, tensors = _decode_container(Path(path).read_bytes(),
                                         ARCHIVE_MAGIC, path)
    config = _config_from_items(headers)
    rng = np.random.default_rng(0)  # shapes are overwritten below
    models = Models(
        config=config,
        encoder=Encoder(config, rng),
        generator=Generator(config, rng),
        discriminator=Discriminator(config, rng),
        decoder=Decoder(config, rng),
    )
    for prefix, net in (("encoder", models.encoder),
                        ("generator", models.generator),
                        ("discriminator", models.discriminator),
                        ("decoder", models.decoder)):
        for name, t in net.named_parameters():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor {key}")
            stored = tensors[key]
            if stored.shape != t.data.shape:
                raise FormatError(f"{path}: tensor {key} has shape "
                                  f"{stored.shape}, expected {t.data.shape}")
            t.data = stored.astype(np.float32)
    step = int(headers.get("step", "0"))
    return models, step


def archive_step(path) -> int:
    headers, _ = _decode_container(Path(path).read_bytes(), ARCHIVE_MAGIC, path)
    return int(headers.get("step", "0"))
