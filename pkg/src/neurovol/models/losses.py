"""VAE, introspective-VAE and GAN objective terms.

All losses are written in minimization form. The reconstruction term is a
per-voxel error; the KL term is the closed form for a diagonal Gaussian
posterior against a standard normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..tensor import RngStream, Tensor, ops
from ..tensor.tensor import record
from .architecture import LOG_SIGMA_MAX, LOG_SIGMA_MIN


class NonFiniteLatent(ValueError):
    """The encoder produced a non-finite mean or log-scale."""


@dataclass
class LatentCode:
    mu: Tensor
    log_sigma: Tensor
    sample: Tensor
    eps: np.ndarray


def reparameterize(mu: Tensor, log_sigma: Tensor, rng: RngStream) -> LatentCode:
    """``z = mu + exp(log_sigma) * eps`` with ``eps ~ N(0, I)`` drawn from ``rng``.

    ``log_sigma`` is clamped to [-30, 10] first; gradients reach ``mu`` and
    ``log_sigma`` but not ``eps``.
    """
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_sigma.data))):
        raise NonFiniteLatent("reparameterize needs finite mu and log_sigma")
    ls = ops.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    eps = rng.normal(mu.shape, dtype=mu.dtype)
    z = ops.add(mu, ops.mul(ops.exp(ls), eps))
    return LatentCode(mu, log_sigma, z, eps)


def kl_divergence(mu, log_sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis.

    ``0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)``; a batch ``(N, L)`` gives
    one value per row.
    """
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=np.float64))
    ls = log_sigma if isinstance(log_sigma, Tensor) else Tensor(np.asarray(log_sigma, dtype=np.float64))
    if mu.shape != ls.shape:
        raise ValueError(f"mu {mu.shape} and log_sigma {ls.shape} differ")
    m, s = mu.data, ls.data
    var = np.exp(2 * s)
    out = 0.5 * (m * m + var - 1.0 - 2.0 * s).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * m, g * (var - 1.0)

    return record("kl_divergence", (mu, ls), np.asarray(out, dtype=m.dtype), backward)


def _flat(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def reconstruction_loss(x, x_hat, kind: str = "mse") -> Tensor:
    """Mean per-voxel error over the whole batch.

    ``mse``: mean of ``(x_hat - x)^2``. ``bce``: mean Bernoulli cross-entropy
    with ``x_hat`` clipped to ``[1e-7, 1 - 1e-7]``.
    """
    x, x_hat = _flat(x), _flat(x_hat)
    if x.data.size != x_hat.data.size or x.shape[0] != x_hat.shape[0]:
        raise ValueError(f"reconstruction_loss: shape mismatch {x.shape} vs {x_hat.shape}")
    if x.shape != x_hat.shape:
        x = ops.reshape(x, x_hat.shape)
    xd, yd = x.data, x_hat.data
    n = xd.size
    if kind == "mse":
        diff = yd - xd
        out = np.asarray((diff * diff).sum() / n, dtype=yd.dtype)

        def backward(g):
            gy = (2.0 / n) * g * diff
            return -gy, gy
    elif kind == "bce":
        p = np.clip(yd, 1e-7, 1 - 1e-7)
        out = np.asarray(-(xd * np.log(p) + (1 - xd) * np.log(1 - p)).sum() / n, dtype=yd.dtype)
        inside = (yd >= 1e-7) & (yd <= 1 - 1e-7)

        def backward(g):
            gy = g / n * (p - xd) / (p * (1 - p)) * inside
            gx = g / n * (np.log(1 - p) - np.log(p))
            return gx, gy
    else:
        raise ValueError(f"unknown reconstruction kind {kind!r}")
    return record(f"recon_{kind}", (x, x_hat), out, backward)


@dataclass
class VaeLoss:
    total: Tensor
    recon: Tensor
    kl: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.recon.item(), self.kl.item()


def vae_loss(x, model, beta: float = 1.0, rng: RngStream | None = None, train: bool = True,
             recon: str = "mse") -> VaeLoss:
    """``recon + beta * mean_batch(KL)`` for one batch (minimization form)."""
    rng = rng or RngStream(0)
    mu, ls = model.encode_stats(x, train=train, rng=rng)
    code = reparameterize(mu, ls, rng)
    x_hat = model.decode(code.sample, train=train, rng=rng)
    r = reconstruction_loss(x, x_hat, recon)
    kl = ops.mean(kl_divergence(mu, ls))
    total = ops.add(r, ops.mul(kl, beta)) if beta else r
    return VaeLoss(total, r, kl)


@dataclass
class IvaeLoss:
    total: Tensor
    e_real: Tensor
    e_fake: Tensor
    adversarial: Tensor
    recon: Tensor


def hinge(values: Tensor, margin: float) -> Tensor:
    """Per-sample ``max(0, margin - values)``."""
    return ops.relu(ops.sub(np.full(values.shape, margin, dtype=values.dtype), values))


def ivae_encoder_loss(x, z_prior, model, m: float, rng: RngStream, beta: float = 1.0,
                      train: bool = True, recon: str = "mse",
                      decoder_snapshot: bool | Mapping[str, np.ndarray] = True,
                      adv_reconstructions: bool = False) -> IvaeLoss:
    """``L_AE(x) + beta * (E(x) + mean_i max(0, m - E(G(z_i))))``.

    ``E`` is the KL of the encoder posterior. Decoder parameters enter only as
    constants (``decoder_snapshot``), so the gradient reaches the encoder only;
    ``G(z_prior)`` is generated without any gradient path.
    """
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    mu, ls = model.encode_stats(x, train=train, rng=rng)
    code = reparameterize(mu, ls, rng)
    x_rec = model.decode(code.sample, train=train, rng=rng, frozen=decoder_snapshot)
    r = reconstruction_loss(x, x_rec, recon)
    e_real = ops.mean(kl_divergence(mu, ls))
    x_fake = model.decode(z_prior, train=train, rng=rng, frozen=decoder_snapshot).detach()
    mu_f, ls_f = model.encode_stats(x_fake, train=train, rng=rng)
    e_fake_each = kl_divergence(mu_f, ls_f)
    adv = ops.mean(hinge(e_fake_each, m))
    if adv_reconstructions:
        mu_r, ls_r = model.encode_stats(x_rec.detach(), train=train, rng=rng)
        adv = ops.add(adv, ops.mean(hinge(kl_divergence(mu_r, ls_r), m)))
    total = ops.add(r, ops.mul(ops.add(e_real, adv), beta))
    return IvaeLoss(total, e_real, ops.mean(e_fake_each), adv, r)


def ivae_generator_loss(x, z_prior, model, rng: RngStream, beta: float = 1.0, train: bool = True,
                        recon: str = "mse", encoder_snapshot: bool | Mapping[str, np.ndarray] = True,
                        adv_reconstructions: bool = False) -> IvaeLoss:
    """``L_AE(x) + beta * mean_i E(G(z_i))`` with the encoder held fixed.

    Encoder parameters enter only as constants (``encoder_snapshot``); the
    gradient flows through the fixed encoder into the generated volumes and
    from there to the decoder parameters.
    """
    mu, ls = model.encode_stats(x, train=train, rng=rng, frozen=encoder_snapshot)
    code = reparameterize(mu, ls, rng)
    x_rec = model.decode(code.sample, train=train, rng=rng)
    r = reconstruction_loss(x, x_rec, recon)
    x_fake = model.decode(z_prior, train=train, rng=rng)
    mu_f, ls_f = model.encode_stats(x_fake, train=train, rng=rng, frozen=encoder_snapshot)
    e_fake = ops.mean(kl_divergence(mu_f, ls_f))
    adv = e_fake
    if adv_reconstructions:
        mu_r, ls_r = model.encode_stats(x_rec, train=train, rng=rng, frozen=encoder_snapshot)
        adv = ops.add(adv, ops.mean(kl_divergence(mu_r, ls_r)))
    total = ops.add(r, ops.mul(adv, beta))
    return IvaeLoss(total, ops.mean(kl_divergence(mu, ls)), e_fake, adv, r)


def gan_objective_value(d_real, d_fake) -> float:
    """``mean log D(x) + mean log(1 - D(G(z)))`` for discriminator outputs in (0, 1)."""
    dr = np.asarray(d_real, dtype=np.float64)
    df = np.asarray(d_fake, dtype=np.float64)
    for name, a in (("d_real", dr), ("d_fake", df)):
        if a.size == 0 or np.any(a <= 0) or np.any(a >= 1):
            raise ValueError(f"{name} must be non-empty with values in (0, 1)")
    return float(np.mean(np.log(dr)) + np.mean(np.log1p(-df)))
