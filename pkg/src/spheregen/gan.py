"""GAN on spherical angles.

The generator maps standard-normal latents to ``d - 1`` angles through the
angle-range head of :class:`~spheregen.neuralnet.MlpNetwork`; the
discriminator outputs a logit whose sigmoid is the probability that an
angle vector came from the data.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import geometry
from .neuralnet import AdamState, MlpNetwork, adam_step

logger = logging.getLogger(__name__)

#: Floor on the arguments of log in the adversarial losses.
LOG_CLAMP = 1e-12


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-4
    seed: int = 0
    #: Adam first-moment decay for both networks.
    beta1: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")


@dataclass
class GanModel:
    generator: MlpNetwork
    discriminator: MlpNetwork
    latent_dim: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.generator.layer_dims[0] != self.latent_dim:
            raise ValueError("generator input width must equal latent_dim")
        if self.generator.output_head != "angle_head":
            raise ValueError("generator must use the angle head")
        if self.discriminator.layer_dims[0] != self.generator.layer_dims[-1]:
            raise ValueError("discriminator input width must equal the number of angles")
        if self.discriminator.layer_dims[-1] != 1:
            raise ValueError("discriminator must output a single logit")

    @classmethod
    def create(cls, d, hidden=(128, 128, 128, 128), latent_dim=None, rng=None):
        latent_dim = d - 1 if latent_dim is None else latent_dim
        gen = MlpNetwork([latent_dim, *hidden, d - 1], "relu", "angle_head", rng=rng)
        disc = MlpNetwork([d - 1, *hidden, 1], "leaky_relu", "linear", rng=rng)
        return cls(gen, disc, latent_dim)

    @property
    def d(self):
        return self.generator.layer_dims[-1] + 1


def generator_forward(model, z):
    return model.generator.forward(z)


def _clamped_log(p):
    """``log(max(p, LOG_CLAMP))`` and its derivative w.r.t. ``p``."""
    live = p > LOG_CLAMP
    # np.maximum keeps NaN so a broken discriminator is caught downstream
    value = np.log(np.maximum(p, LOG_CLAMP))
    deriv = np.where(live, 1.0 / np.where(live, p, 1.0), 0.0)
    return value, deriv


def discriminator_loss(model, real, z, need_grad=True):
    """``-[mean log D(real) + mean log(1 - D(G(z)))]`` and discriminator gradients."""
    disc = model.discriminator
    fake = model.generator.forward(z)
    both = np.vstack([real, fake])
    logits, cache = disc.forward(both, return_cache=True)
    p = _sigmoid(logits[:, 0])
    nr = real.shape[0]
    nf = fake.shape[0]
    log_real, dlog_real = _clamped_log(p[:nr])
    log_fake, dlog_fake = _clamped_log(1.0 - p[nr:])
    loss = -(log_real.mean() + log_fake.mean())
    if not need_grad:
        return float(loss), None
    dp = p * (1.0 - p)
    g = np.empty_like(logits)
    g[:nr, 0] = -dlog_real * dp[:nr] / nr
    g[nr:, 0] = dlog_fake * dp[nr:] / nf
    grads, _ = disc.backward(cache, g)
    return float(loss), grads


def generator_loss(model, z, need_grad=True):
    """Non-saturating generator loss ``-mean log D(G(z))`` and generator gradients."""
    fake, gcache = model.generator.forward(z, return_cache=True)
    logits, dcache = model.discriminator.forward(fake, return_cache=True)
    p = _sigmoid(logits[:, 0])
    log_p, dlog_p = _clamped_log(p)
    m = z.shape[0]
    loss = -log_p.mean()
    if not need_grad:
        return float(loss), None
    g = (-dlog_p * p * (1.0 - p) / m)[:, None]
    _, g_fake = model.discriminator.backward(dcache, g)
    grads, _ = model.generator.backward(gcache, g_fake)
    return float(loss), grads


def gan_losses(model, real_batch, z_batch, need_grad=True):
    """Discriminator and generator losses (plus gradients) on one batch.

    Returns ``(d_loss, g_loss, d_grads, g_grads)``; gradients are ``None``
    when ``need_grad`` is false.
    """
    real_batch = np.asarray(real_batch, dtype=float)
    z_batch = np.asarray(z_batch, dtype=float)
    d_loss, d_grads = discriminator_loss(model, real_batch, z_batch, need_grad)
    g_loss, g_grads = generator_loss(model, z_batch, need_grad)
    for name, value in (("discriminator", d_loss), ("generator", g_loss)):
        if not np.isfinite(value):
            raise FloatingPointError(f"{name} loss is not finite")
    return d_loss, g_loss, d_grads, g_grads


def minmax_value(model, real, z):
    """The adversarial objective ``E log D(x) + E log(1 - D(G(z)))``."""
    d_loss, _ = discriminator_loss(model, real, z, need_grad=False)
    return -d_loss


def train_gan(data, cfg=GanTrainConfig(), hidden=(128, 128, 128, 128), latent_dim=None):
    """Alternate one discriminator and one generator Adam step per minibatch.

    Runs exactly ``cfg.epochs`` passes over shuffled minibatches of the full
    data set; there is no validation split or early stopping.
    """
    real = np.asarray(getattr(data, "rows", data), dtype=float)
    geometry.check_angles(real)
    n = real.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6A4]))
    model = GanModel.create(real.shape[1] + 1, hidden, latent_dim, rng=init_rng)
    d_state = AdamState(lr=cfg.lr, beta1=cfg.beta1)
    g_state = AdamState(lr=cfg.lr, beta1=cfg.beta1)
    d_params = model.discriminator.params
    g_params = model.generator.params
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        d_total = g_total = 0.0
        batches = 0
        for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
            batch = real[order[start : start + cfg.batch_size]]
            m = batch.shape[0]
            z = rng.standard_normal((m, model.latent_dim))
            d_loss, d_grads = discriminator_loss(model, batch, z)
            if not np.isfinite(d_loss):
                raise FloatingPointError(f"non-finite discriminator loss at epoch {epoch}, batch {batch_idx}")
            adam_step(d_state, d_params, d_grads)
            z = rng.standard_normal((m, model.latent_dim))
            g_loss, g_grads = generator_loss(model, z)
            if not np.isfinite(g_loss):
                raise FloatingPointError(f"non-finite generator loss at epoch {epoch}, batch {batch_idx}")
            adam_step(g_state, g_params, g_grads)
            d_total += d_loss
            g_total += g_loss
            batches += 1
        model.history.append({"epoch": epoch, "d_loss": d_total / batches, "g_loss": g_total / batches})
    return model


def sample_gan(model, n, rng, chunk=50000):
    """Generate ``n`` angle vectors from fresh standard-normal latents."""
    out = np.empty((n, model.d - 1))
    z = rng.standard_normal((n, model.latent_dim))
    for start in range(0, n, chunk):
        out[start : start + chunk] = model.generator.forward(z[start : start + chunk])
    return out
