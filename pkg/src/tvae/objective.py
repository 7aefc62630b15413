"""Training losses for the T-VAE and the VAE / VAE+ baselines.

All terms are in nats per sample, averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from .networks import GaussianLatent, TVAE, VAE, reparameterize

TVAE_TERMS = ("nllx0", "nllx1", "nllx2", "c1", "c2", "nll", "div", "kl0")
VAE_TERMS = ("nllx0", "kl0")


class NumericalError(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass
class LossBreakdown:
    nllx0: torch.Tensor
    kl0: torch.Tensor
    nllx1: Optional[torch.Tensor] = None
    nllx2: Optional[torch.Tensor] = None
    c1: Optional[torch.Tensor] = None
    c2: Optional[torch.Tensor] = None
    nll: Optional[torch.Tensor] = None
    div: Optional[torch.Tensor] = None

    def terms(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @property
    def total(self) -> torch.Tensor:
        return sum(self.terms().values())

    def values(self) -> dict:
        """Python floats for every present term plus ``total`` and ``elbo``."""
        out = {k: float(v.detach()) for k, v in self.terms().items()}
        out["total"] = float(self.total.detach())
        out["elbo"] = out["nllx0"] + out["kl0"]
        return out

    def check_finite(self):
        for name, value in self.terms().items():
            if not torch.isfinite(value).all():
                raise NumericalError(f"loss term {name} is not finite ({float(value.detach())})")
        return self


def _flat(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1)


def bernoulli_nll(x: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-sample binary cross-entropy summed over pixels, ``[B]``."""
    x, logits = _flat(x), _flat(logits)
    return F.binary_cross_entropy_with_logits(logits, x.to(logits.dtype), reduction="none").sum(-1)


def gaussian_kl_to_prior(g: GaussianLatent) -> torch.Tensor:
    """``KL(N(mean, sigma^2) || N(0, I))`` per sample, ``[B]``."""
    return 0.5 * (g.mean.pow(2) + torch.exp(2 * g.log_sigma) - 1.0 - 2 * g.log_sigma).sum(-1)


def gaussian_log_prob(z: torch.Tensor, g: Optional[GaussianLatent] = None) -> torch.Tensor:
    """Log density of ``z`` under ``g`` (standard normal when ``g`` is None), ``[B, ...]``."""
    if g is None:
        return (-0.5 * z.pow(2) - 0.5 * math.log(2 * math.pi)).sum(-1)
    eps = (z - g.mean) / g.sigma
    return (-0.5 * eps.pow(2) - g.log_sigma - 0.5 * math.log(2 * math.pi)).sum(-1)


def mmd_linear(z_posterior: torch.Tensor, z_constructed: torch.Tensor, squared: bool = True) -> torch.Tensor:
    """Per-sample linear-kernel discrepancy ``||z - z~||^2`` (or ``||z - z~||``), ``[B]``."""
    if z_posterior.shape != z_constructed.shape:
        raise ValueError(f"shape mismatch {tuple(z_posterior.shape)} vs {tuple(z_constructed.shape)}")
    sq = (z_posterior - z_constructed).pow(2).sum(-1)
    return sq if squared else sq.sqrt()


def _as_batch(x):
    return x.unsqueeze(1) if x.dim() == 3 else x


def tvae_loss(model: TVAE, x0, x1, x2, generator: Optional[torch.Generator] = None,
              mmd_squared: bool = True) -> LossBreakdown:
    x0, x1, x2 = _as_batch(x0), _as_batch(x1), _as_batch(x2)
    b = x0.shape[0]
    post = model.encode(torch.cat([x0, x1, x2]))
    z_all = reparameterize(post, generator)
    logits = model.decode(z_all)
    nllx = bernoulli_nll(torch.cat([x0, x1, x2]), logits).reshape(3, b).mean(-1)
    g0 = GaussianLatent(post.mean[:b], post.log_sigma[:b])
    z1, z2 = z_all[b:2 * b], z_all[2 * b:]

    agg = model.aggregate(z1, z2)
    z = reparameterize(agg, generator)
    tau = model.infer_tau(z1, z2)
    z1_tilde = model.act(tau, z)
    z2_tilde = model.act_inverse(tau, z)

    return LossBreakdown(
        nllx0=nllx[0],
        nllx1=nllx[1],
        nllx2=nllx[2],
        c1=mmd_linear(z1, z1_tilde, mmd_squared).mean(),
        c2=mmd_linear(z2, z2_tilde, mmd_squared).mean(),
        nll=bernoulli_nll(x0, model.decode(z)).mean(),
        div=gaussian_kl_to_prior(agg).mean(),
        kl0=gaussian_kl_to_prior(g0).mean(),
    ).check_finite()


def vae_loss(model: VAE, x, generator: Optional[torch.Generator] = None) -> LossBreakdown:
    x = _as_batch(x)
    post = model.encode(x)
    z = reparameterize(post, generator)
    return LossBreakdown(
        nllx0=bernoulli_nll(x, model.decode(z)).mean(),
        kl0=gaussian_kl_to_prior(post).mean(),
    ).check_finite()
