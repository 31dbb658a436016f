"""The four losses and the alternating adversarial training loop.

Each step runs one discriminator update on the adversarial loss, then one
joint update of encoder, generator (with its per-layer affines), and
decoder on the weighted sum of adversarial, latent-reconstruction,
fingerprint-reconstruction, and cross-fingerprint consistency terms.
Latents and fingerprints are sampled fresh every step (or drawn from a
fixed finite pool, which is how the scalability baselines are built).
With immunization enabled, generated images pass the configured
perturbation pipeline before they reach the decoder.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import TrainingDivergedError
from .fingerprints import FingerprintSpace
from .nets import Models, decode_bits
from .perturb import PerturbationSpec, apply_spec, apply_spec_graph
from .optim import Adam
from .seeding import named_rng

__all__ = [
    "TrainingConfig", "LossRow", "TrainingReport", "Trainer",
    "adv_losses", "d_adv_loss", "g_adv_loss", "latent_recon_loss",
    "fingerprint_recon_loss", "consistency_loss", "bit_accuracy",
    "matching_counts", "LOSS_CSV_HEADER", "loss_csv_rows",
]


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one training run."""

    lambda_adv: float = 1.0
    lambda_z: float = 1.0
    lambda_c: float = 2.0
    lambda_const: float = 2.0
    use_z_loss: bool = True
    use_c_loss: bool = True
    use_const_loss: bool = True
    batch_size: int = 32
    total_steps: int = 2000
    eval_interval: int = 100
    eval_samples: int = 256
    checkpoint_interval: int = 0      # 0 disables periodic checkpoints
    pool_size: int | None = None      # None samples fingerprints on the fly
    immunize: PerturbationSpec | None = None
    learning_rate: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    target_bit_acc: float | None = None  # early stop once reached at an eval
    # bootstrap schedule: hold L_z and L_const out until the decoder has
    # locked onto the modulation, then ramp them to full weight; both
    # losses punish fingerprint-induced image variation, and engaged from
    # step one at desk scale they absorb training into a no-fingerprint
    # collapse (the final objective is unchanged)
    recon_warmup_start: int = 0
    recon_warmup_steps: int = 0   # 0 = no schedule, full weights throughout
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_z", "lambda_c", "lambda_const"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_adv <= 0:
            raise ValueError("lambda_adv must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError("fixed fingerprint pool needs size >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    @property
    def z_active(self) -> bool:
        return self.use_z_loss and self.lambda_z > 0

    @property
    def c_active(self) -> bool:
        return self.use_c_loss and self.lambda_c > 0

    @property
    def const_active(self) -> bool:
        return self.use_const_loss and self.lambda_const > 0

    def warmup_factor(self, step: int) -> float:
        """Multiplier on lambda_z and lambda_const at a given step."""
        if self.recon_warmup_steps <= 0:
            return 1.0
        return min(1.0, max(0.0, (step - self.recon_warmup_start)
                            / self.recon_warmup_steps))


@dataclass
class LossRow:
    """Per-step loss report; disabled terms stay None."""

    step: int
    d_loss: float
    g_loss: float
    loss_z: float | None
    loss_c: float | None
    loss_const: float | None
    total: float
    bit_acc: float | None


LOSS_CSV_HEADER = ["step", "d_loss", "g_loss", "L_z", "L_c", "L_const", "bit_acc"]


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def loss_csv_rows(rows: list[LossRow]) -> list[list[str]]:
    return [[str(r.step), _cell(r.d_loss), _cell(r.g_loss), _cell(r.loss_z),
             _cell(r.loss_c), _cell(r.loss_const), _cell(r.bit_acc)]
            for r in rows]


@dataclass
class TrainingReport:
    rows: list[LossRow]
    steps_run: int
    final_bit_acc: float | None
    wall_clock_s: float


# ---------------------------------------------------------------------------
# loss terms


def d_adv_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """softplus(D(fake)) + softplus(-D(real)), batch means."""
    return ad.add(ad.tmean(ad.softplus(fake_logits)),
                  ad.tmean(ad.softplus(-real_logits)))


def g_adv_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator term: softplus(-D(fake)), batch mean."""
    return ad.tmean(ad.softplus(-fake_logits))


def adv_losses(discriminator, real_batch, fake_batch) -> tuple[Tensor, Tensor]:
    """Both adversarial objectives for a real/fake image batch pair."""
    real_batch = np.asarray(real_batch)
    fake_batch = np.asarray(fake_batch)
    if real_batch.shape[0] == 0 or fake_batch.shape[0] == 0:
        raise ValueError("adversarial losses need non-empty batches")
    if real_batch.shape[1:] != fake_batch.shape[1:]:
        raise ad.ShapeError(f"real/fake image shapes disagree: "
                            f"{real_batch.shape} vs {fake_batch.shape}")
    real_logits = discriminator.forward(real_batch)
    fake_logits = discriminator.forward(fake_batch)
    return d_adv_loss(real_logits, fake_logits), g_adv_loss(fake_logits)


def latent_recon_loss(z, z_hat: Tensor) -> Tensor:
    """Mean over the batch of the summed squared latent error."""
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if z_t.shape != z_hat.shape:
        raise ad.ShapeError(f"latent shapes disagree: {z_t.shape} vs {z_hat.shape}")
    diff = ad.sub(z_t, z_hat)
    n = z_t.shape[0]
    return ad.mul(ad.tsum(ad.mul(diff, diff)), Tensor(1.0 / n, dtype=None))


def fingerprint_recon_loss(c_bits, c_logits: Tensor) -> Tensor:
    """Summed per-bit binary cross-entropy against the true bits, batch
    mean; stabilized via softplus identities."""
    bits = np.asarray(c_bits, dtype=np.float32)
    if bits.shape != tuple(c_logits.shape):
        raise ad.ShapeError(f"bit/logit shapes disagree: {bits.shape} "
                            f"vs {c_logits.shape}")
    c1 = Tensor(bits)
    c0 = Tensor(1.0 - bits)
    per_bit = ad.add(ad.mul(c1, ad.softplus(-c_logits)),
                     ad.mul(c0, ad.softplus(c_logits)))
    n = bits.shape[0]
    return ad.mul(ad.tsum(per_bit), Tensor(1.0 / n, dtype=None))


def consistency_loss(img1: Tensor, img2: Tensor) -> Tensor:
    """Mean over the batch of the summed squared pixel difference."""
    if tuple(img1.shape) != tuple(img2.shape):
        raise ad.ShapeError(f"image shapes disagree: {img1.shape} vs {img2.shape}")
    diff = ad.sub(img1, img2)
    n = img1.shape[0]
    return ad.mul(ad.tsum(ad.mul(diff, diff)), Tensor(1.0 / n, dtype=None))


# ---------------------------------------------------------------------------
# evaluation


def matching_counts(models: Models, n_samples: int, rng: np.random.Generator,
                    batch_size: int = 64,
                    perturb: PerturbationSpec | None = None,
                    perturb_rng: np.random.Generator | None = None,
                    pool_bits: np.ndarray | None = None) -> np.ndarray:
    """Per-sample count of correctly decoded bits over fresh (z, c) draws.

    ``pool_bits`` restricts fingerprint draws to the given pool rows (the
    scalability studies evaluate train-pool accuracy this way).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = models.config
    space = FingerprintSpace(cfg.d_c)
    counts = []
    done = 0
    while done < n_samples:
        n = min(batch_size, n_samples - done)
        z = rng.normal(size=(n, cfg.d_z)).astype(np.float32)
        if pool_bits is None:
            c = space.sample_bits(rng, n)
        else:
            c = pool_bits[rng.integers(0, pool_bits.shape[0], size=n)]
        with ad.no_grad():
            e = models.encoder.forward(c)
            imgs = models.generator.forward(z, e)
            if perturb is not None:
                prng = perturb_rng if perturb_rng is not None else rng
                imgs = Tensor(apply_spec(perturb, imgs.data, prng))
            _, c_logits = models.decoder.decode(imgs)
        decoded = decode_bits(c_logits)
        counts.append((decoded == c).sum(axis=1))
        done += n
    return np.concatenate(counts)


def bit_accuracy(models: Models, n_samples: int, rng: np.random.Generator,
                 **kwargs) -> float:
    """Mean fraction of correctly decoded fingerprint bits."""
    counts = matching_counts(models, n_samples, rng, **kwargs)
    return float(counts.sum() / (counts.size * models.config.d_c))


# ---------------------------------------------------------------------------
# the loop


class Trainer:
    """Owns the optimizer state and the per-step schedule."""

    def __init__(self, models: Models, dataset, config: TrainingConfig):
        self.models = models
        self.config = config
        self.space = FingerprintSpace(models.config.d_c)
        self.rng_data = named_rng(config.seed, "data")
        self.rng_latents = named_rng(config.seed, "latents")
        self.rng_fingerprints = named_rng(config.seed, "fingerprints")
        self.rng_perturb = named_rng(config.seed, "perturbations")
        self.rng_eval = named_rng(config.seed, "eval")
        self.opt_d = Adam(models.discriminator.parameters(),
                          lr=config.learning_rate, beta1=config.beta1,
                          beta2=config.beta2)
        self.opt_g = Adam(models.generator_side_parameters(),
                          lr=config.learning_rate, beta1=config.beta1,
                          beta2=config.beta2)
        if config.pool_size is not None:
            self.pool_bits = self.space.sample_bits(self.rng_fingerprints,
                                                    config.pool_size)
        else:
            self.pool_bits = None
        self._batches = dataset.batches(config.batch_size, self.rng_data)
        self.step_count = 0
        self.last_bit_acc: float | None = None

    # -- sampling

    def build_batch(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(z, c1, c2): one latent per row shared by both fingerprints."""
        n = self.config.batch_size
        z = self.rng_latents.normal(size=(n, self.models.config.d_z)) \
            .astype(np.float32)
        if self.pool_bits is None:
            c1 = self.space.sample_bits(self.rng_fingerprints, n)
            c2 = self.space.sample_bits(self.rng_fingerprints, n)
        else:
            m = self.pool_bits.shape[0]
            c1 = self.pool_bits[self.rng_fingerprints.integers(0, m, size=n)]
            c2 = self.pool_bits[self.rng_fingerprints.integers(0, m, size=n)]
        return z, c1, c2

    # -- one step

    def _finite(self, name: str, value: float) -> float:
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"{name} became non-finite at step {self.step_count}")
        return float(value)

    def train_step(self, real_batch: np.ndarray) -> LossRow:
        cfg = self.config
        m = self.models
        self.step_count += 1
        z, c1, c2 = self.build_batch()

        # discriminator phase; fakes are detached by running outside a tape
        with ad.no_grad():
            fake_detached = m.generator.forward(z, m.encoder.forward(c1)).data
        with Tape() as tape:
            real_logits = m.discriminator.forward(real_batch)
            fake_logits = m.discriminator.forward(fake_detached)
            d_loss = d_adv_loss(real_logits, fake_logits)
            d_total = ad.mul(d_loss, Tensor(cfg.lambda_adv, dtype=None))
            self._finite("d_loss", d_loss.item())
            self.opt_d.zero_grad()
            ad.backward(d_total, tape)
            self.opt_d.step()

        # joint encoder/generator/decoder phase against the updated D
        with Tape() as tape:
            warm = cfg.warmup_factor(self.step_count)
            e1 = m.encoder.forward(c1)
            fake1 = m.generator.forward(z, e1)
            g_loss = g_adv_loss(m.discriminator.forward(fake1))
            total = ad.mul(g_loss, Tensor(cfg.lambda_adv, dtype=None))
            loss_z = loss_c = loss_const = None
            if cfg.z_active or cfg.c_active:
                decoder_in = fake1
                if cfg.immunize is not None:
                    decoder_in = apply_spec_graph(cfg.immunize, fake1,
                                                  self.rng_perturb)
                z_hat, c_logits = m.decoder.decode(decoder_in)
                if cfg.z_active:
                    lz = latent_recon_loss(z, z_hat)
                    loss_z = self._finite("L_z", lz.item())
                    total = ad.add(total, ad.mul(
                        lz, Tensor(cfg.lambda_z * warm, dtype=None)))
                if cfg.c_active:
                    lc = fingerprint_recon_loss(c1, c_logits)
                    loss_c = self._finite("L_c", lc.item())
                    total = ad.add(total, ad.mul(lc, Tensor(cfg.lambda_c, dtype=None)))
            if cfg.const_active:
                fake2 = m.generator.forward(z, m.encoder.forward(c2))
                lconst = consistency_loss(fake1, fake2)
                loss_const = self._finite("L_const", lconst.item())
                total = ad.add(total, ad.mul(
                    lconst, Tensor(cfg.lambda_const * warm, dtype=None)))
            self._finite("g_loss", g_loss.item())
            self._finite("total", total.item())
            self.opt_g.zero_grad()
            ad.backward(total, tape)
            self.opt_g.step()

        return LossRow(step=self.step_count, d_loss=float(d_loss.item()),
                       g_loss=float(g_loss.item()), loss_z=loss_z,
                       loss_c=loss_c, loss_const=loss_const,
                       total=float(total.item()), bit_acc=self.last_bit_acc)

    # -- evaluation and the loop

    def evaluate_bit_accuracy(self) -> float:
        """Fresh-sample decoding accuracy; immunized runs measure through
        their own perturbation pipeline (that is the optimized quantity)."""
        acc = bit_accuracy(self.models, self.config.eval_samples, self.rng_eval,
                           perturb=self.config.immunize,
                           perturb_rng=self.rng_perturb
                           if self.config.immunize is not None else None)
        self.last_bit_acc = acc
        return acc

    def train(self, dataset=None, on_checkpoint=None, log=None) -> TrainingReport:
        """Run up to ``total_steps``, stopping early once
        ``target_bit_acc`` is reached at an evaluation point."""
        cfg = self.config
        rows: list[LossRow] = []
        started = time.perf_counter()
        for _ in range(cfg.total_steps):
            real = next(self._batches)
            row = self.train_step(real)
            stop = False
            if self.step_count % cfg.eval_interval == 0 \
                    or self.step_count == cfg.total_steps:
                row.bit_acc = self.evaluate_bit_accuracy() if cfg.c_active else None
                if log is not None:
                    log(row)
                if cfg.target_bit_acc is not None and row.bit_acc is not None \
                        and row.bit_acc >= cfg.target_bit_acc:
                    stop = True
            rows.append(row)
            if on_checkpoint is not None and cfg.checkpoint_interval > 0 \
                    and self.step_count % cfg.checkpoint_interval == 0:
                on_checkpoint(self)
            if stop:
                break
        return TrainingReport(rows=rows, steps_run=self.step_count,
                              final_bit_acc=self.last_bit_acc,
                              wall_clock_s=time.perf_counter() - started)
