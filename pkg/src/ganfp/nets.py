"""The four networks: fingerprint encoder, modulated generator,
discriminator, and decoder.

The generator seeds a 4x4 feature map from the latent vector, then runs
(nearest-upsample, modulated 3x3 conv, LeakyReLU) blocks up to the target
resolution, and finishes with a 1x1 conv and tanh.  Each modulated layer
owns an affine map from the fingerprint embedding to one scale per kernel
input channel.  Scaling input channel k of the kernel equals scaling
activation channel k of the input, so training applies the per-sample
scales to activations and shares one kernel across the batch; deployment
folds the scales into the kernel itself (see deploy.bake) and both paths
agree to float rounding.

Discriminator and decoder are mirrored downsampling stacks ending in
fully-connected heads; they differ only in output width (1 logit vs
d_z + d_c).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fingerprints import Fingerprint

__all__ = [
    "ModelConfig", "Encoder", "Generator", "Discriminator", "Decoder",
    "Models", "build_models", "bits_to_inputs", "decode_bits", "modulate",
]

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by all four networks."""

    image_size: int = 32
    channels: int = 3
    d_z: int = 64
    d_c: int = 128
    d_e: int = 64
    base_width: int = 48
    min_width: int = 8
    encoder_layers: int = 8
    modulated_layers: str = "all"   # "all" or one block resolution, e.g. "16"

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ValueError(f"image_size must be a power of two >= 8, got {s}")
        for name in ("channels", "d_z", "d_c", "d_e", "base_width", "encoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.modulated_layers != "all":
            try:
                r = int(self.modulated_layers)
            except ValueError:
                raise ValueError(
                    f"modulated_layers must be 'all' or a block resolution, "
                    f"got {self.modulated_layers!r}") from None
            if r not in self.block_resolutions():
                raise ValueError(
                    f"modulated_layers={r} names no generator layer; "
                    f"available: {self.block_resolutions()}")

    def block_resolutions(self) -> tuple:
        """Output resolutions of the generator conv blocks: 8, 16, ..., size."""
        res = []
        r = 8
        while r <= self.image_size:
            res.append(r)
            r *= 2
        return tuple(res)

    def width(self, resolution: int) -> int:
        """Feature-map channel count at a given resolution."""
        return max(self.min_width, self.base_width * 8 // max(resolution, 8))

    def is_modulated(self, resolution: int) -> bool:
        if self.modulated_layers == "all":
            return True
        return int(self.modulated_layers) == resolution


def bits_to_inputs(bits: np.ndarray) -> np.ndarray:
    """{0,1} bit matrix -> {-1,+1} float32 network inputs."""
    return (np.asarray(bits, dtype=np.float32) * 2.0 - 1.0)


def decode_bits(c_logits) -> np.ndarray:
    """Threshold decoder logits at 0 (sigmoid at 0.5) into a bit matrix."""
    data = c_logits.data if isinstance(c_logits, Tensor) else np.asarray(c_logits)
    return (data > 0).astype(np.uint8)


def modulate(weight: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Scale every kernel entry at input channel k by scale[k].

    weight: (O, I, kh, kw); scale: (I,).  Out-channel and spatial axes are
    untouched; no demodulation or normalization of any kind.
    """
    weight = np.asarray(weight)
    scale = np.asarray(scale, dtype=weight.dtype).reshape(-1)
    if scale.shape[0] != weight.shape[1]:
        raise ad.ShapeError(
            f"scale length {scale.shape[0]} does not match kernel input "
            f"channels {weight.shape[1]}")
    return weight * scale[None, :, None, None]


class _Net:
    """Base for parameter bookkeeping: ordered (name, tensor) registry."""

    def __init__(self, dtype=np.float32):
        self._params: list[tuple[str, Tensor]] = []
        self._dtype = dtype

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(self._dtype), requires_grad=True, dtype=None)
        self._params.append((name, t))
        return t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._params]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)


# variance-preserving gain for layers feeding LeakyReLU: plain 1/fan_in
# attenuates activations by ~0.52 per layer, which flatlines the 8-layer
# encoder (embedding std ~0.07) and with it the whole fingerprint path
_LRELU_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))


def _fc_init(rng: np.random.Generator, out_dim: int, in_dim: int,
             gain: float = _LRELU_GAIN) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(in_dim), size=(out_dim, in_dim))


def _conv_init(rng: np.random.Generator, o: int, i: int, k: int,
               gain: float = _LRELU_GAIN) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(i * k * k), size=(o, i, k, k))


class Encoder(_Net):
    """Maps a fingerprint to its dense embedding through a stack of
    fully-connected layers with LeakyReLU after each."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(dtype)
        self.config = config
        self.layers = []
        in_dim = config.d_c
        for i in range(config.encoder_layers):
            w = self._param(f"fc{i}.weight", _fc_init(rng, config.d_e, in_dim))
            b = self._param(f"fc{i}.bias", np.zeros(config.d_e))
            self.layers.append((w, b))
            in_dim = config.d_e

    def forward(self, bits) -> Tensor:
        """bits: (N, d_c) {0,1} matrix or a ready (N, d_c) Tensor of inputs."""
        if isinstance(bits, Tensor):
            x = bits
        else:
            bits = np.atleast_2d(np.asarray(bits))
            if bits.shape[1] != self.config.d_c:
                raise ad.ShapeError(
                    f"fingerprint length {bits.shape[1]} does not match "
                    f"d_c={self.config.d_c}")
            x = Tensor(bits_to_inputs(bits))
        for w, b in self.layers:
            x = ad.leaky_relu(ad.fully_connected(x, w, b), LEAKY_SLOPE)
        return x

    def encode_fingerprint(self, c: Fingerprint) -> np.ndarray:
        if c.d_c != self.config.d_c:
            raise ad.ShapeError(f"fingerprint length {c.d_c} does not match "
                                f"d_c={self.config.d_c}")
        with ad.no_grad():
            return self.forward(c.bits()[None, :]).data[0]


class ModulatedConv:
    """3x3 conv whose kernel input channels are scaled per sample by an
    affine function of the fingerprint embedding."""

    def __init__(self, net: _Net, name: str, rng: np.random.Generator,
                 in_ch: int, out_ch: int, d_e: int, modulated: bool):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.modulated = modulated
        self.weight = net._param(f"{name}.weight", _conv_init(rng, out_ch, in_ch, 3))
        self.bias = net._param(f"{name}.bias", np.zeros(out_ch))
        if modulated:
            # bias starts at 1 so an untrained affine is a near-identity scale
            self.affine_w = net._param(f"{name}.affine.weight",
                                       _fc_init(rng, in_ch, d_e, gain=0.1))
            self.affine_b = net._param(f"{name}.affine.bias", np.ones(in_ch))
        else:
            self.affine_w = None
            self.affine_b = None

    def scales(self, e: Tensor) -> Tensor:
        return ad.fully_connected(e, self.affine_w, self.affine_b)

    def forward(self, x: Tensor, e: Tensor | None) -> Tensor:
        """x is channels-last (N,H,W,C); scaling activation channel k
        before the shared kernel equals scaling kernel input channel k."""
        if self.modulated:
            if e is None:
                raise ad.ShapeError("modulated layer needs a fingerprint embedding")
            s = self.scales(e)
            x = ad.mul(x, ad.reshape(s, (s.shape[0], 1, 1, self.in_ch)))
        y = ad.conv2d_nhwc(x, ad.permute(self.weight, (2, 3, 1, 0)),
                           stride=1, padding=1)
        return ad.add(y, ad.reshape(self.bias, (1, 1, 1, self.out_ch)))


class Generator(_Net):
    """Latent + fingerprint embedding -> image in [-1, 1]."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(dtype)
        self.config = config
        w4 = config.width(4)
        self.seed_w = self._param("seed.weight", _fc_init(rng, w4 * 16, config.d_z))
        self.seed_b = self._param("seed.bias", np.zeros(w4 * 16))
        self.blocks: list[ModulatedConv] = []
        prev = w4
        for r in config.block_resolutions():
            ch = config.width(r)
            self.blocks.append(ModulatedConv(
                self, f"b{r}", rng, prev, ch, config.d_e,
                modulated=config.is_modulated(r)))
            prev = ch
        self.rgb_w = self._param("rgb.weight",
                                 _conv_init(rng, config.channels, prev, 1, gain=1.0))
        self.rgb_b = self._param("rgb.bias", np.zeros(config.channels))

    def forward(self, z, e: Tensor | None) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(np.atleast_2d(np.asarray(z, dtype=np.float32)))
        if z.shape[1] != self.config.d_z:
            raise ad.ShapeError(f"latent length {z.shape[1]} does not match "
                                f"d_z={self.config.d_z}")
        n = z.shape[0]
        w4 = self.config.width(4)
        x = ad.leaky_relu(ad.fully_connected(z, self.seed_w, self.seed_b),
                          LEAKY_SLOPE)
        x = ad.reshape(x, (n, 4, 4, w4))
        for block in self.blocks:
            x = ad.upsample_nearest2_nhwc(x)
            x = ad.leaky_relu(block.forward(x, e), LEAKY_SLOPE)
        x = ad.conv2d_nhwc(x, ad.permute(self.rgb_w, (2, 3, 1, 0)),
                           stride=1, padding=0)
        x = ad.add(x, ad.reshape(self.rgb_b, (1, 1, 1, self.config.channels)))
        return ad.permute(ad.tanh(x), (0, 3, 1, 2))


class _ConvStack(_Net):
    """Shared downsampling trunk for discriminator and decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, out_dim: int,
                 dtype=np.float32):
        super().__init__(dtype)
        self.config = config
        self.out_dim = out_dim
        s = config.image_size
        w_in = config.width(s)
        self.rgb_w = self._param("rgb.weight", _conv_init(rng, w_in, config.channels, 3))
        self.rgb_b = self._param("rgb.bias", np.zeros(w_in))
        self.convs = []
        r = s
        prev = w_in
        while r > 4:
            ch = config.width(r // 2)
            w = self._param(f"d{r}.weight", _conv_init(rng, ch, prev, 3))
            b = self._param(f"d{r}.bias", np.zeros(ch))
            self.convs.append((w, b))
            prev = ch
            r //= 2
        flat = prev * 16
        hidden = config.width(4)
        self.head1_w = self._param("head1.weight", _fc_init(rng, hidden, flat))
        self.head1_b = self._param("head1.bias", np.zeros(hidden))
        self.head2_w = self._param("head2.weight",
                                   _fc_init(rng, out_dim, hidden, gain=1.0))
        self.head2_b = self._param("head2.bias", np.zeros(out_dim))

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != self.config.channels \
                or x.shape[2] != self.config.image_size \
                or x.shape[3] != self.config.image_size:
            raise ad.ShapeError(
                f"image batch shape {x.shape} does not match config "
                f"({self.config.channels}x{self.config.image_size}"
                f"x{self.config.image_size})")
        n = x.shape[0]
        h = ad.permute(x, (0, 2, 3, 1))
        h = ad.conv2d_nhwc(h, ad.permute(self.rgb_w, (2, 3, 1, 0)),
                           stride=1, padding=1)
        h = ad.leaky_relu(ad.add(h, ad.reshape(self.rgb_b, (1, 1, 1, -1))),
                          LEAKY_SLOPE)
        for w, b in self.convs:
            h = ad.conv2d_nhwc(h, ad.permute(w, (2, 3, 1, 0)), stride=1, padding=1)
            h = ad.leaky_relu(ad.add(h, ad.reshape(b, (1, 1, 1, -1))), LEAKY_SLOPE)
            h = ad.avg_pool2_nhwc(h)
        h = ad.reshape(h, (n, -1))
        h = ad.leaky_relu(ad.fully_connected(h, self.head1_w, self.head1_b),
                          LEAKY_SLOPE)
        return ad.fully_connected(h, self.head2_w, self.head2_b)


class Discriminator(_ConvStack):
    """Image -> single pre-sigmoid real/fake logit per batch element."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(config, rng, out_dim=1, dtype=dtype)


class Decoder(_ConvStack):
    """Image -> concatenated (latent estimate, fingerprint logits)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(config, rng, out_dim=config.d_z + config.d_c, dtype=dtype)

    def split(self, out: Tensor) -> tuple[Tensor, Tensor]:
        """First d_z columns estimate the latent; the rest are bit logits."""
        z_hat = ad.narrow(out, 1, 0, self.config.d_z)
        c_logits = ad.narrow(out, 1, self.config.d_z, self.config.d_c)
        return z_hat, c_logits

    def decode(self, x) -> tuple[Tensor, Tensor]:
        return self.split(self.forward(x))


@dataclass
class Models:
    config: ModelConfig
    encoder: Encoder
    generator: Generator
    discriminator: Discriminator
    decoder: Decoder

    def generator_side_parameters(self) -> list[Tensor]:
        """Everything the joint (non-discriminator) update optimizes."""
        return (self.encoder.parameters() + self.generator.parameters()
                + self.decoder.parameters())


def build_models(config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32) -> Models:
    r_enc, r_gen, r_dis, r_dec = rng.spawn(4)
    return Models(
        config=config,
        encoder=Encoder(config, r_enc, dtype),
        generator=Generator(config, r_gen, dtype),
        discriminator=Discriminator(config, r_dis, dtype),
        decoder=Decoder(config, r_dec, dtype),
    )
