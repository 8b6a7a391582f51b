"""Adversarial autoencoder over flat grayscale images.

The encoder predicts a diagonal Gaussian (k means, k log-variances), the
decoder maps latents back to sigmoid pixel intensities, and the
discriminator scores how plausible a latent point is under the N(0, I)
prior. Training alternates a reconstruction phase (encoder + decoder) with a
regularization phase (discriminator, then encoder as generator).
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ShapeError, TrainingDivergenceError
from .nncore import Mlp, TrainConfig, loss_and_grad, make_optimizer
from .seeding import derive_seed

log = logging.getLogger(__name__)

_MAGIC = b"AAE1"
_LOGVAR_RANGE = (-20.0, 10.0)


@dataclass
class AaeTrainConfig:
    k: int = 4
    recon_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=30, batch_size=128))
    reg_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=5e-4, epochs=30, batch_size=128, beta1=0.5))
    validity_threshold: float = 0.5
    hidden: tuple[int, ...] = (256, 128)
    disc_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0.0 < self.validity_threshold < 1.0:
            raise ValueError("validity_threshold must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be positive")


@dataclass
class AaeModel:
    encoder: Mlp
    decoder: Mlp
    discriminator: Mlp
    n: int
    k: int
    validity_threshold: float = 0.5
    history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        if self.encoder.in_dim != self.n or self.encoder.out_dim != 2 * self.k:
            raise ShapeError(f"encoder must map {self.n} -> {2 * self.k}")
        if self.decoder.in_dim != self.k or self.decoder.out_dim != self.n:
            raise ShapeError(f"decoder must map {self.k} -> {self.n}")
        if self.discriminator.in_dim != self.k or self.discriminator.out_dim != 1:
            raise ShapeError(f"discriminator must map {self.k} -> 1")
        if self.decoder.layers[-1].activation != "sigmoid" or self.discriminator.layers[-1].activation != "sigmoid":
            raise ValueError("decoder and discriminator need a sigmoid output")
        if not self.k < self.n:
            raise ShapeError("latent dimension must be smaller than the pixel count")

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<IId", self.n, self.k, self.validity_threshold))
        for net in (self.encoder, self.decoder, self.discriminator):
            net.write(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AaeModel":
        buf = io.BytesIO(data)
        if buf.read(4) != _MAGIC:
            raise ValueError("not an AAE1 checkpoint")
        n, k, threshold = struct.unpack("<IId", buf.read(16))
        enc, dec, disc = (Mlp.read(buf) for _ in range(3))
        return cls(enc, dec, disc, n=n, k=k, validity_threshold=threshold)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AaeModel":
        return cls.from_bytes(Path(path).read_bytes())


def _as_batch(x, width: int, what: str):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ShapeError(f"{what} must have {width} components, got shape {arr.shape}")
    return batch, single


def encode_params(model: AaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Means and log-variances of q(z|x) for an image or a batch."""
    batch, single = _as_batch(x, model.n, "image")
    out = model.encoder.forward(batch)
    mu, logvar = out[:, : model.k], out[:, model.k :]
    return (mu[0], logvar[0]) if single else (mu, logvar)


def encode(model: AaeModel, x, mode: str = "mean", seed: int | None = None) -> np.ndarray:
    """Latent point(s) for ``x``: the mean of q(z|x), or one seeded draw from it."""
    mu, logvar = encode_params(model, x)
    if mode == "mean":
        return mu
    if mode != "sample":
        raise ValueError(f"unknown encode mode {mode!r}")
    eta = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eta


def decode(model: AaeModel, z) -> np.ndarray:
    batch, single = _as_batch(z, model.k, "latent point")
    out = model.decoder.forward(batch)
    return out[0] if single else out


def discriminate(model: AaeModel, z):
    """Validity score in [0, 1]; a float for one point, an array for a batch."""
    batch, single = _as_batch(z, model.k, "latent point")
    out = model.discriminator.forward(batch)[:, 0]
    return float(out[0]) if single else out


class Valid(NamedTuple):
    latent: np.ndarray
    image: np.ndarray


def disde(model: AaeModel, h, threshold: float | None = None) -> Valid | None:
    """Decode ``h`` if the discriminator accepts it (score >= threshold), else None."""
    threshold = model.validity_threshold if threshold is None else threshold
    h = np.asarray(h, dtype=np.float64)
    if discriminate(model, h) >= threshold:
        return Valid(h, decode(model, h))
    return None


def disde_batch(model: AaeModel, latents, threshold: float | None = None):
    """Vectorised :func:`disde`: returns ``(mask, scores)``; decode the survivors yourself."""
    threshold = model.validity_threshold if threshold is None else threshold
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, model.k)
    scores = discriminate(model, latents)
    return scores >= threshold, scores


def init_aae(n: int, cfg: AaeTrainConfig, seed: int) -> AaeModel:
    k = cfg.k
    hid = tuple(cfg.hidden)
    enc = Mlp.build([n, *hid, 2 * k], ["relu"] * len(hid) + ["linear"], seed=derive_seed(seed, "aae.encoder"))
    dec = Mlp.build([k, *hid[::-1], n], ["relu"] * len(hid) + ["sigmoid"], seed=derive_seed(seed, "aae.decoder"))
    dhid = tuple(cfg.disc_hidden)
    disc = Mlp.build([k, *dhid, 1], ["relu"] * len(dhid) + ["sigmoid"], seed=derive_seed(seed, "aae.discriminator"))
    return AaeModel(enc, dec, disc, n=n, k=k, validity_threshold=cfg.validity_threshold)


def _sample_latent(model, enc_out, eta):
    k = model.k
    mu = enc_out[:, :k]
    raw = enc_out[:, k:]
    logvar = np.clip(raw, *_LOGVAR_RANGE)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eta
    inside = (raw > _LOGVAR_RANGE[0]) & (raw < _LOGVAR_RANGE[1])
    return z, sigma, inside


def _encoder_grad(grad_z, sigma, eta, inside):
    # z = mu + exp(logvar / 2) * eta
    return np.hstack([grad_z, grad_z * eta * 0.5 * sigma * inside])


def _check(value: float, phase: str, epoch: int):
    if not np.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite loss in {phase} phase, epoch {epoch}", stage="train_aae", phase=phase, epoch=epoch
        )


def train_aae(images, cfg: AaeTrainConfig, seed: int = 0) -> AaeModel:
    """Two-phase AAE training over ``recon_cfg.epochs`` passes of the data.

    Per minibatch: (a) encoder + decoder step on pixelwise BCE of the
    reconstruction from a sampled latent; (b) discriminator step with prior
    draws labelled 1 and encoded draws labelled 0, then an encoder step on
    -log D(z) so the encoded draws look like prior draws.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or len(images) == 0:
        raise ValueError("need a non-empty (count, n) image array")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("pixel intensities must lie in [0, 1]")
    model = init_aae(images.shape[1], cfg, seed)
    enc, dec, disc = model.encoder, model.decoder, model.discriminator
    rng = np.random.default_rng(derive_seed(seed, "aae.train"))
    rc, gc = cfg.recon_cfg, cfg.reg_cfg
    opt_enc, opt_dec = make_optimizer(rc), make_optimizer(rc)
    opt_disc, opt_gen = make_optimizer(gc), make_optimizer(gc)
    bs = rc.batch_size

    for epoch in range(rc.epochs):
        order = rng.permutation(len(images))
        sums = np.zeros(3)
        for start in range(0, len(order), bs):
            xb = images[order[start : start + bs]]
            m = len(xb)

            # reconstruction phase
            enc_out, enc_cache = enc.forward_cached(xb)
            eta = rng.standard_normal((m, model.k))
            z, sigma, inside = _sample_latent(model, enc_out, eta)
            recon, dec_cache = dec.forward_cached(z)
            rec_loss, g, fused = loss_and_grad("bce", recon, xb, "sigmoid")
            _check(rec_loss, "reconstruction", epoch)
            dec_grads, grad_z = dec.backward(dec_cache, g, pre_activation=fused)
            enc_grads, _ = enc.backward(enc_cache, _encoder_grad(grad_z, sigma, eta, inside))
            opt_dec.step(dec.parameters(), dec_grads)
            opt_enc.step(enc.parameters(), enc_grads)

            # regularization phase: discriminator
            enc_out, enc_cache = enc.forward_cached(xb)
            eta = rng.standard_normal((m, model.k))
            z_fake, sigma, inside = _sample_latent(model, enc_out, eta)
            z_real = rng.standard_normal((m, model.k))
            d_in = np.vstack([z_real, z_fake])
            d_target = np.concatenate([np.ones(m), np.zeros(m)])[:, None]
            d_out, d_cache = disc.forward_cached(d_in)
            d_loss, g, fused = loss_and_grad("bce", d_out, d_target, "sigmoid")
            _check(d_loss, "regularization", epoch)
            d_grads, _ = disc.backward(d_cache, g, pre_activation=fused)
            opt_disc.step(disc.parameters(), d_grads)

            # regularization phase: encoder as generator, target "real"
            g_out, g_cache = disc.forward_cached(z_fake)
            g_loss, g, fused = loss_and_grad("bce", g_out, np.ones_like(g_out), "sigmoid")
            _check(g_loss, "generator", epoch)
            _, grad_z = disc.backward(g_cache, g, pre_activation=fused)
            enc_grads, _ = enc.backward(enc_cache, _encoder_grad(grad_z, sigma, eta, inside))
            opt_gen.step(enc.parameters(), enc_grads)

            sums += np.array([rec_loss, d_loss, g_loss]) * m
        rec, dl, gl = sums / len(order)
        model.history.append({"epoch": epoch, "reconstruction": rec, "discriminator": dl, "generator": gl})
        log.info("aae epoch %d: recon %.4f disc %.4f gen %.4f", epoch, rec, dl, gl)
    return model


def rmse_255(images, reconstructions) -> float:
    """Root mean squared pixel error on the 0-255 intensity scale."""
    a = np.asarray(images, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.size == 0:
        raise ValueError("RMSE of an empty dataset is undefined")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)) * 255.0)


def reconstruction_rmse(model: AaeModel, images, batch_size: int = 1024) -> float:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or len(images) == 0:
        raise ValueError("RMSE of an empty dataset is undefined")
    sq = 0.0
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        recon = decode(model, encode(model, xb))
        sq += float(np.sum((xb - recon) ** 2))
    return float(np.sqrt(sq / images.size) * 255.0)
