"""Inference helpers: encode, decode, prior sampling and reconstruction (eval mode)."""

from __future__ import annotations

import numpy as np

from ..tensor import RngStream, Tensor
from .architecture import VAEModel
from .losses import LatentCode, reparameterize


def _batched(fn, items: np.ndarray, batch: int):
    outs = [fn(items[i:i + batch]) for i in range(0, len(items), batch)]
    return np.concatenate(outs, axis=0)


def encode(x, model: VAEModel, rng: RngStream | None = None) -> LatentCode:
    """Posterior parameters and one reparameterized sample for a volume batch."""
    mu, ls = model.encode_stats(np.asarray(x, dtype=np.float32), train=False)
    return reparameterize(mu, ls, rng or RngStream(0))


def encode_means(volumes, model: VAEModel, batch: int = 32) -> np.ndarray:
    """Encoder means ``mu`` for a stack of volumes, shape (N, latent_dim)."""
    x = np.asarray(volumes, dtype=np.float32)
    return _batched(lambda b: model.encode_stats(b, train=False)[0].data, x, batch)


def decode(z, model: VAEModel, batch: int = 32) -> np.ndarray:
    """Volumes (N, X, Y, Z) for codes (N, latent_dim)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    if z.shape[1] != model.latent_dim:
        raise ValueError(f"latent length {z.shape[1]} != model latent_dim {model.latent_dim}")
    return _batched(lambda b: model.decode(b, train=False).data[:, 0], z, batch)


def sample_prior(model: VAEModel, n: int, rng: RngStream) -> np.ndarray:
    """Decode ``n`` codes drawn from the standard normal prior."""
    z = rng.normal((n, model.latent_dim), dtype=np.float32)
    return decode(z, model)


def reconstruct(x, model: VAEModel, use_mean: bool = True, rng: RngStream | None = None) -> np.ndarray:
    """Decode the posterior mean (deterministic) or a posterior sample."""
    x = np.asarray(x, dtype=np.float32)
    mu, ls = model.encode_stats(x, train=False)
    if use_mean:
        z = mu.data
    else:
        z = reparameterize(mu, ls, rng or RngStream(0)).sample.data
    return decode(z, model)
