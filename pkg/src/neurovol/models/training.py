"""Mini-batch training loops for the VAE and the introspective VAE."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..io import atomic_write_bytes
from ..tensor import RngStream, Tape, Tensor
from ..tensor.rng import mix_seed
from .architecture import DECODER, ENCODER, ArchitectureConfig, VAEModel
from .checkpoint import checkpoint_from_model, save_checkpoint
from .losses import NonFiniteLatent, ivae_encoder_loss, ivae_generator_loss, vae_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    beta: float = 1.0
    margin: float = 5.0
    recon: str = "mse"
    adv_reconstructions: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


class Optimizer:
    """Adam (default) or SGD with momentum over a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params] if cfg.optimizer == "adam" else None

    def step(self, grads: Sequence[np.ndarray]) -> None:
        cfg = self.cfg
        self.step_count += 1
        if cfg.lr == 0:
            return
        t = self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if cfg.optimizer == "adam":
                b1, b2 = cfg.betas
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
                mhat = self.m[i] / (1 - b1 ** t)
                vhat = self.v[i] / (1 - b2 ** t)
                p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)
            else:
                self.m[i] = cfg.momentum * self.m[i] + g
                p.data -= (cfg.lr * self.m[i]).astype(p.dtype)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: Path | None):
        super().__init__(f"non-finite loss in epoch {epoch}; last good checkpoint: {last_good}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class TrainResult:
    model: VAEModel
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    batch_log: list[list[str]] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history])


def batches(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _prepare(volumes) -> np.ndarray:
    x = np.asarray(volumes, dtype=np.float32)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, X, Y, Z) stack, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("training needs at least two volumes")
    return x


CSV_VAE = ["epoch", "loss_total", "loss_recon", "loss_kl"]
CSV_IVAE = CSV_VAE + ["loss_E", "loss_G", "e_fake"]


def loss_csv(history: list[dict], ivae: bool = False) -> str:
    cols = CSV_IVAE if ivae else CSV_VAE
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for h in history:
        w.writerow([h["epoch"]] + [repr(float(h[c])) for c in cols[1:]])
    return out.getvalue()


class _Checkpointer:
    def __init__(self, model, cfg: TrainConfig, out_dir, kind: str, extra: dict):
        self.model, self.cfg, self.kind, self.extra = model, cfg, kind, extra
        self.dir = Path(out_dir) if out_dir is not None else None
        self.paths: list[Path] = []
        self.last_good: Path | None = None

    def write(self, epoch: int, name: str | None = None) -> Path | None:
        if self.dir is None:
            return None
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / (name or f"{self.kind}_epoch{epoch:04d}.ckpt")
        ckpt = checkpoint_from_model(self.model, epoch, self.cfg.digest(), model_kind=self.kind, **self.extra)
        save_checkpoint(path, ckpt)
        self.paths.append(path)
        self.last_good = path
        return path


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def train_vae(volumes, arch: ArchitectureConfig, cfg: TrainConfig, image_ids: Sequence[str] | None = None,
              out_dir: str | Path | None = None, model: VAEModel | None = None,
              checkpoint_extra: dict | None = None) -> TrainResult:
    """Adam (or SGD) on ``recon + beta * KL`` over shuffled mini-batches.

    One history entry per epoch holds the batch-size-weighted means of the
    loss terms. Checkpoints go to ``out_dir`` every ``checkpoint_every``
    epochs and after the last epoch.
    """
    x_all = _prepare(volumes)
    model = model or VAEModel(arch, seed=cfg.seed)
    params = model.store.tensors()
    opt = Optimizer(params, cfg)
    ck = _Checkpointer(model, cfg, out_dir, "vae", checkpoint_extra or {})
    result = TrainResult(model)
    for epoch in range(1, cfg.epochs + 1):
        erng = RngStream(mix_seed(cfg.seed, 0xE90C, epoch))
        sums = np.zeros(3)
        n_seen = 0
        for idx in batches(len(x_all), cfg.batch_size, erng):
            if image_ids is not None:
                result.batch_log.append([image_ids[i] for i in idx])
            snap, bsnap = model.store.snapshot(), model.store.buffer_snapshot()
            try:
                with Tape() as tape:
                    loss = vae_loss(x_all[idx], model, cfg.beta, erng, train=True, recon=cfg.recon)
                vals = loss.values()
            except NonFiniteLatent:
                vals = (math.nan,) * 3
            if not _finite(*vals):
                model.store.restore(snap)
                model.store.restore_buffers(bsnap)
                raise TrainingDiverged(epoch, ck.write(epoch - 1, "vae_last_good.ckpt"))
            opt.step(tape.backward(loss.total, params))
            sums += np.array(vals) * len(idx)
            n_seen += len(idx)
        total, recon, kl = sums / n_seen
        result.history.append({"epoch": epoch, "loss_total": total, "loss_recon": recon, "loss_kl": kl})
        log.info("vae epoch %d total %.5f recon %.5f kl %.4f", epoch, total, recon, kl)
        if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or epoch == cfg.epochs:
            ck.write(epoch)
    result.checkpoints = ck.paths
    return result


def train_ivae(volumes, arch: ArchitectureConfig, cfg: TrainConfig, image_ids: Sequence[str] | None = None,
               out_dir: str | Path | None = None, model: VAEModel | None = None,
               checkpoint_extra: dict | None = None) -> TrainResult:
    """Alternating introspective updates per batch.

    First the encoder minimizes the encoder loss with decoder parameters held
    as constants; then the decoder minimizes the generator loss with the
    freshly updated encoder held as constants. Prior codes ``z ~ N(0, I)`` are
    drawn once per batch and shared by both steps.
    """
    x_all = _prepare(volumes)
    model = model or VAEModel(arch, seed=cfg.seed)
    enc, dec = model.store.tensors(ENCODER), model.store.tensors(DECODER)
    opt_e, opt_g = Optimizer(enc, cfg), Optimizer(dec, cfg)
    ck = _Checkpointer(model, cfg, out_dir, "ivae", checkpoint_extra or {})
    result = TrainResult(model)
    lat = arch.latent_dim
    for epoch in range(1, cfg.epochs + 1):
        erng = RngStream(mix_seed(cfg.seed, 0x1BAE, epoch))
        keys = ("loss_E", "loss_G", "loss_recon", "loss_kl", "e_fake")
        sums = dict.fromkeys(keys, 0.0)
        n_seen = 0
        for idx in batches(len(x_all), cfg.batch_size, erng):
            if image_ids is not None:
                result.batch_log.append([image_ids[i] for i in idx])
            snap, bsnap = model.store.snapshot(), model.store.buffer_snapshot()
            xb = x_all[idx]
            z_prior = erng.normal((len(idx), lat), dtype=np.float32)

            try:
                with Tape() as tape:
                    le = ivae_encoder_loss(xb, z_prior, model, cfg.margin, erng, cfg.beta, recon=cfg.recon,
                                           adv_reconstructions=cfg.adv_reconstructions)
                e_vals = (le.total.item(), le.recon.item(), le.e_real.item(), le.e_fake.item())
                if _finite(*e_vals):
                    opt_e.step(tape.backward(le.total, enc))
                    enc_now = model.store.snapshot(ENCODER)
                    with Tape() as tape:
                        lg = ivae_generator_loss(xb, z_prior, model, erng, cfg.beta, recon=cfg.recon,
                                                 encoder_snapshot=enc_now,
                                                 adv_reconstructions=cfg.adv_reconstructions)
                    g_val = lg.total.item()
                else:
                    g_val = math.nan
            except NonFiniteLatent:
                e_vals, g_val = (math.nan,) * 4, math.nan
            if not _finite(*e_vals, g_val):
                model.store.restore(snap)
                model.store.restore_buffers(bsnap)
                raise TrainingDiverged(epoch, ck.write(epoch - 1, "ivae_last_good.ckpt"))
            opt_g.step(tape.backward(lg.total, dec))

            b = len(idx)
            sums["loss_E"] += e_vals[0] * b
            sums["loss_G"] += g_val * b
            sums["loss_recon"] += e_vals[1] * b
            sums["loss_kl"] += e_vals[2] * b
            sums["e_fake"] += e_vals[3] * b
            n_seen += b
        h = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
        h["loss_total"] = h["loss_recon"] + cfg.beta * h["loss_kl"]
        result.history.append(h)
        log.info("ivae epoch %d L_E %.4f L_G %.4f recon %.5f E(x) %.3f E(G(z)) %.3f", epoch,
                 h["loss_E"], h["loss_G"], h["loss_recon"], h["loss_kl"], h["e_fake"])
        if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or epoch == cfg.epochs:
            ck.write(epoch)
    result.checkpoints = ck.paths
    return result


def write_loss_csv(path: str | Path, result: TrainResult, ivae: bool = False) -> None:
    atomic_write_bytes(path, loss_csv(result.history, ivae).encode())
