"""Encoder, decoder, aggregation posterior, transformation extractor and the
neural action body, plus the T-VAE / VAE model containers.

Spatial plan for the 28x28 networks (all kernels 4x4 unless noted):

    encoder  28 -p3-> 16 -p1-> 8 -p1-> 4 -p1-> 2 -p1-> 1      (stride 2 throughout)
    decoder  z (1x1) -1x1 conv-> 128 -T,s1-> 4 -T,s1-> 7 -T,s2,p1-> 14 -T,s2,p1-> 28
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .latent_algebra import (
    LatentTransform, apply_tau, apply_tau_inverse, check_variant, tau_param_dim,
)

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 7.0
MODEL_KINDS = ("tvae", "vae", "vae_plus")


@dataclass(frozen=True)
class Architecture:
    image_size: int = 28
    enc_channels: tuple = (32, 32, 64, 128)
    enc_paddings: tuple = (3, 1, 1, 1, 1)  # last entry: final conv to 2 * z_dim
    dec_projection: int = 128
    dec_layers: tuple = ((64, 1, 0), (32, 1, 0), (32, 2, 1), (1, 2, 1))  # (channels, stride, padding)
    hidden: int = 1000
    kernel: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        d["enc_paddings"] = tuple(d["enc_paddings"])
        d["dec_layers"] = tuple(tuple(x) for x in d["dec_layers"])
        return cls(**d)


STANDARD_ARCH = Architecture()
# Small stand-in for gradient checks on 8x8 inputs.
TINY_ARCH = Architecture(
    image_size=8, enc_channels=(4, 6), enc_paddings=(1, 1, 1),
    dec_projection=6, dec_layers=((4, 1, 0), (1, 2, 1)), hidden=12,
)


@dataclass
class GaussianLatent:
    mean: torch.Tensor
    log_sigma: torch.Tensor

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "GaussianLatent":
        mean, log_sigma = raw.chunk(2, dim=-1)
        return cls(mean, log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()


def reparameterize(g: GaussianLatent, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return g.mean + g.sigma * eps


class Encoder(nn.Module):
    def __init__(self, z_dim: int, arch: Architecture = STANDARD_ARCH):
        super().__init__()
        layers, c_in = [], 1
        for c_out, pad in zip(arch.enc_channels, arch.enc_paddings):
            layers += [nn.Conv2d(c_in, c_out, arch.kernel, stride=2, padding=pad), nn.ReLU()]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 2 * z_dim, arch.kernel, stride=2, padding=arch.enc_paddings[-1])
        self.z_dim = z_dim

    def forward(self, x: torch.Tensor) -> GaussianLatent:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        out = self.head(self.body(x))
        if out.shape[-2:] != (1, 1):
            raise ValueError(f"encoder expects the configured image size; got spatial output {tuple(out.shape[-2:])}")
        return GaussianLatent.from_raw(out.flatten(1))


class Decoder(nn.Module):
    def __init__(self, z_dim: int, arch: Architecture = STANDARD_ARCH):
        super().__init__()
        layers = [nn.Conv2d(z_dim, arch.dec_projection, 1), nn.ReLU()]
        c_in = arch.dec_projection
        for i, (c_out, stride, pad) in enumerate(arch.dec_layers):
            layers.append(nn.ConvTranspose2d(c_in, c_out, arch.kernel, stride=stride, padding=pad))
            if i < len(arch.dec_layers) - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        self.net = nn.Sequential(*layers)
        self.z_dim = z_dim
        self.image_size = arch.image_size

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Bernoulli logits ``[B, 1, H, W]``."""
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"decoder expects z_dim={self.z_dim}, got {z.shape[-1]}")
        return self.net(z.reshape(-1, self.z_dim, 1, 1))

    @property
    def final(self) -> nn.Module:
        return self.net[-1]


class MLP(nn.Module):
    """``in -> FC hidden -> ReLU -> FC hidden -> ReLU -> FC out``."""

    def __init__(self, d_in: int, d_out: int, hidden: int = 1000):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, d_out),
        )

    def forward(self, x):
        return self.net(x)

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]


class ActionBody(MLP):
    """Neural action network: takes ``z`` and the transform vector side by side."""

    def forward(self, z, tau_params):
        return self.net(torch.cat([z, tau_params], dim=-1))


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "tvae"
    z_dim: int = 10
    variant: str = "A"
    residual: bool = False
    neural_form: str = "skip"
    arch: Architecture = field(default_factory=Architecture)

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.kind == "tvae":
            check_variant(self.variant, self.z_dim, self.residual)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["arch"] = Architecture.from_dict(d["arch"])
        return cls(**d)


class VAE(nn.Module):
    """Plain encoder/decoder pair; also the VAE+ baseline."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec.validate()
        self.encoder = Encoder(spec.z_dim, spec.arch)
        self.decoder = Decoder(spec.z_dim, spec.arch)

    @property
    def z_dim(self) -> int:
        return self.spec.z_dim

    def encode(self, x) -> GaussianLatent:
        return self.encoder(x)

    def decode(self, z) -> torch.Tensor:
        return self.decoder(z)


class TVAE(VAE):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        d, h = spec.z_dim, spec.arch.hidden
        self.tau_dim = tau_param_dim(spec.variant, d)
        self.aggregator = MLP(2 * d, 2 * d, h)
        self.tau_net = MLP(2 * d, self.tau_dim, h)
        self.action_net = ActionBody(d + self.tau_dim, d, h) if spec.variant == "N" else None

    def aggregate(self, z1, z2) -> GaussianLatent:
        """Posterior over the shared code given both views."""
        return GaussianLatent.from_raw(self.aggregator(torch.cat([z1, z2], dim=-1)))

    def infer_tau(self, z1, z2) -> LatentTransform:
        params = self.tau_net(torch.cat([z1, z2], dim=-1))
        s = self.spec
        return LatentTransform(s.variant, params, s.z_dim, s.residual, s.neural_form)

    def act(self, tau: LatentTransform, z):
        return apply_tau(tau, z, self.action_net)

    def act_inverse(self, tau: LatentTransform, z):
        return apply_tau_inverse(tau, z, self.action_net)


def build_model(spec: ModelSpec) -> VAE:
    return TVAE(spec) if spec.kind == "tvae" else VAE(spec)


def parameter_groups(model: VAE) -> dict:
    """Parameter tensors keyed by role: decoder, encoder, aggregator, tau_net, action_net."""
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".", 1)[0], []).append((name, p))
    return groups
