"""Tiny fully connected GAN with non-saturating and WGAN-GP objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset
from ..errors import InvalidInputError, TrainingDivergedError
from ..numkit import Rng
from .mlp import (AdamState, Mlp, adam_step, directional_param_grad, init_mlp, mlp_forward,
                  mlp_grad)

LOSS_KINDS = ("non-saturating", "wasserstein-gp")


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 32
    hidden: int = 128
    loss_kind: str = "non-saturating"
    gp_lambda: float = 10.0
    spectral_norm: bool = False
    # power-iteration steps per discriminator update; the top singular pair of
    # these layers is nearly degenerate and moves every step, one is too few
    sn_power_iters: int = 20
    steps: int = 5000
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    d_steps_per_g: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if self.gp_lambda < 0:
            raise InvalidInputError("gp_lambda must be >= 0")
        if self.sn_power_iters < 1:
            raise InvalidInputError("sn_power_iters must be >= 1")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise InvalidInputError("batch_size and latent_dim must be positive")

    @property
    def n_critic(self) -> int:
        if self.d_steps_per_g is not None:
            return self.d_steps_per_g
        return 5 if self.loss_kind == "wasserstein-gp" else 1


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def gradient_penalty(disc: Mlp, x_real, x_fake, rng: Rng):
    """``mean((|grad_x D(x_hat)| - 1)^2)`` on random interpolates and its parameter gradients.

    ``x_hat = e * x_real + (1 - e) * x_fake`` with one ``e ~ U(0, 1)`` per row.
    """
    xr = np.asarray(x_real, dtype=np.float64).reshape(len(x_real), -1)
    xf = np.asarray(x_fake, dtype=np.float64).reshape(len(x_fake), -1)
    if xr.shape != xf.shape:
        raise InvalidInputError(f"batch shapes differ: {xr.shape} vs {xf.shape}")
    e = rng.uniform(0.0, 1.0, size=(xr.shape[0], 1))
    return penalty_at(disc, e * xr + (1.0 - e) * xf)


def penalty_at(disc: Mlp, x_hat):
    n = x_hat.shape[0]
    _, cache = mlp_forward(disc, x_hat)
    _, gx = mlp_grad(disc, x_hat, np.ones((n, 1)), cache)
    norms = np.linalg.norm(gx, axis=1)
    value = float(np.mean((norms - 1.0) ** 2))
    safe = np.where(norms > 0, norms, 1.0)
    direction = (2.0 / n) * ((norms - 1.0) / safe)[:, None] * gx
    direction[norms == 0] = 0.0
    return value, directional_param_grad(disc, x_hat, direction)


class GanTrainer:
    """Holds both networks, optimizer states and the training stream.

    :meth:`train` may be called repeatedly; every call continues where the last
    one stopped, which is what long-training needs.
    """

    def __init__(self, data: Dataset, cfg: GanConfig, rng: Rng | None = None):
        self.cfg = cfg
        self.side = data.side
        self.x = data.flat()
        self.rng = rng if rng is not None else Rng(cfg.seed, 7)
        dim = self.x.shape[1]
        h = cfg.hidden
        self.gen = init_mlp([cfg.latent_dim, h, h, dim],
                            ["leaky_relu", "leaky_relu", "sigmoid"], self.rng)
        d_out = "identity"
        self.disc = init_mlp([dim, h, h, 1], ["leaky_relu", "leaky_relu", d_out], self.rng,
                             spectral_norm=cfg.spectral_norm)
        self.g_opt = AdamState.zeros_like(self.gen.params())
        self.d_opt = AdamState.zeros_like(self.disc.params())
        self.step = 0
        self.d_losses: list = []
        self.g_losses: list = []
        self.sn_trace: list = []

    def _adam(self, net, grads, state):
        c = self.cfg
        adam_step(net.params(), grads, state, c.lr, c.beta1, c.beta2, c.adam_eps)

    def _d_step(self):
        c, rng = self.cfg, self.rng
        bs = c.batch_size
        real = self.x[rng.integers(0, self.x.shape[0], size=bs)]
        fake = self.gen(rng.normal(size=(bs, c.latent_dim)))
        self.disc.refresh_spectral(c.sn_power_iters)
        both = np.concatenate([real, fake])
        logits, cache = mlp_forward(self.disc, both)
        lr_, lf = logits[:bs, 0], logits[bs:, 0]
        if c.loss_kind == "non-saturating":
            loss = float(np.mean(_softplus(-lr_)) + np.mean(_softplus(lf)))
            up = np.concatenate([(_sigmoid(lr_) - 1.0) / bs, _sigmoid(lf) / bs])[:, None]
            grads, _ = mlp_grad(self.disc, both, up, cache)
        else:
            loss = float(np.mean(lf) - np.mean(lr_))
            up = np.concatenate([np.full(bs, -1.0 / bs), np.full(bs, 1.0 / bs)])[:, None]
            grads, _ = mlp_grad(self.disc, both, up, cache)
            if c.gp_lambda > 0:
                gp, gp_grads = gradient_penalty(self.disc, real, fake, rng)
                loss += c.gp_lambda * gp
                grads = [g + c.gp_lambda * q for g, q in zip(grads, gp_grads)]
        self._adam(self.disc, grads, self.d_opt)
        return loss

    def _g_step(self):
        c, rng = self.cfg, self.rng
        bs = c.batch_size
        z = rng.normal(size=(bs, c.latent_dim))
        fake, g_cache = mlp_forward(self.gen, z)
        logits, d_cache = mlp_forward(self.disc, fake)
        lf = logits[:, 0]
        if c.loss_kind == "non-saturating":
            loss = float(np.mean(_softplus(-lf)))
            up = ((_sigmoid(lf) - 1.0) / bs)[:, None]
        else:
            loss = float(-np.mean(lf))
            up = np.full((bs, 1), -1.0 / bs)
        _, gx = mlp_grad(self.disc, fake, up, d_cache)
        grads, _ = mlp_grad(self.gen, z, gx, g_cache)
        self._adam(self.gen, grads, self.g_opt)
        return loss

    def train(self, steps: int, sn_check_every: int = 100) -> None:
        for _ in range(steps):
            d_loss = 0.0
            for _ in range(self.cfg.n_critic):
                d_loss = self._d_step()
            g_loss = self._g_step()
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                raise TrainingDivergedError(self.step)
            self.d_losses.append(d_loss)
            self.g_losses.append(g_loss)
            self.step += 1
            if self.disc.spectral_norm and self.step % sn_check_every == 0:
                # read out the weights the next forward pass will apply
                probe = self.disc.copy()
                probe.refresh_spectral(self.cfg.sn_power_iters)
                self.sn_trace.append((self.step, effective_top_singular(probe)))

    def generator(self):
        from .generators import Generator
        return Generator("gan", self.gen.copy(), self.side,
                         loss_trace=np.column_stack([self.d_losses, self.g_losses])
                         if self.d_losses else np.zeros((0, 2)),
                         latent_dim=self.cfg.latent_dim)


def effective_top_singular(net: Mlp, iters: int = 300) -> list:
    """Power-iteration readout of the top singular value of each effective weight."""
    out = []
    for w in net.effective_weights():
        v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
        for _ in range(iters):
            u = w @ v
            u /= np.linalg.norm(u) + 1e-300
            v = w.T @ u
            s = np.linalg.norm(v)
            v /= s + 1e-300
        out.append(float(s))
    return out


def train_gan(d: Dataset, cfg: GanConfig, rng: Rng | None = None):
    """Train a fresh GAN for ``cfg.steps`` generator updates and return its generator."""
    trainer = GanTrainer(d, cfg, rng)
    trainer.train(cfg.steps)
    return trainer.generator()
