"""Latent transformations and their action on latent codes.

Parameter layouts (per sample, last axis):

* ``A``  -- translation ``t``                           (z_dim)
* ``M``  -- rotation angles, one per 2-d block          (z_dim / 2)
* ``MA`` -- angles followed by offset ``b``             (z_dim / 2 + z_dim)
* ``T``  -- diagonal, super-, sub-diagonal, then ``b``  (3 z_dim - 2 + z_dim)
* ``N``  -- free vector fed to the action network      (z_dim)

Block ``i`` of the rotation variants acts on ``(z[2i], z[2i+1])``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

VARIANTS = ("A", "M", "MA", "T", "N")
NEURAL_FORMS = ("skip", "plain")


@dataclass
class LatentTransform:
    variant: str
    params: torch.Tensor  # [B, tau_param_dim]
    z_dim: int
    residual: bool = False
    neural_form: str = "skip"

    def __post_init__(self):
        check_variant(self.variant, self.z_dim, self.residual)
        want = tau_param_dim(self.variant, self.z_dim)
        if self.params.shape[-1] != want:
            raise ValueError(
                f"variant {self.variant} with z_dim={self.z_dim} needs {want} params, got {self.params.shape[-1]}"
            )
        if self.neural_form not in NEURAL_FORMS:
            raise ValueError(f"neural_form must be one of {NEURAL_FORMS}")

    def scaled(self, k: float) -> "LatentTransform":
        return LatentTransform(self.variant, self.params * k, self.z_dim, self.residual, self.neural_form)


def check_variant(variant: str, z_dim: int, residual: bool = False):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if z_dim < 1:
        raise ValueError(f"z_dim must be positive, got {z_dim}")
    if variant in ("M", "MA") and z_dim % 2:
        raise ValueError(f"variant {variant} needs an even z_dim, got {z_dim}")
    if variant == "T" and z_dim < 2:
        raise ValueError("variant T needs z_dim >= 2")
    if residual and variant == "A":
        raise ValueError("variant A has no residual form")


def tau_param_dim(variant: str, z_dim: int) -> int:
    check_variant(variant, z_dim)
    return {
        "A": z_dim,
        "M": z_dim // 2,
        "MA": z_dim // 2 + z_dim,
        "T": 3 * z_dim - 2 + z_dim,
        "N": z_dim,
    }[variant]


def identity_tau(variant: str, z_dim: int, batch: int = 1, residual: bool = False,
                 dtype=torch.float32) -> LatentTransform:
    """The transform whose action is the identity map.

    Residual matrix variants add ``z`` to the matrix action, so their identity
    is the zero matrix; the rotation parameterization cannot express it.
    """
    check_variant(variant, z_dim, residual)
    if residual and variant in ("M", "MA"):
        raise ValueError(f"residual variant {variant} has no identity element")
    params = torch.zeros(batch, tau_param_dim(variant, z_dim), dtype=dtype)
    if variant == "T" and not residual:
        params[:, :z_dim] = 1.0
    return LatentTransform(variant, params, z_dim, residual)


def rotate_blocks(z: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    pairs = z.reshape(*z.shape[:-1], -1, 2)
    c, s = torch.cos(angles), torch.sin(angles)
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack([c * a - s * b, s * a + c * b], dim=-1)
    return out.reshape(z.shape)


def tridiag_matvec(diag, upper, lower, z: torch.Tensor) -> torch.Tensor:
    """``(D + U + L) z`` with ``upper[i] = m[i, i+1]`` and ``lower[i] = m[i+1, i]``."""
    up = torch.nn.functional.pad(upper * z[..., 1:], (0, 1))
    lo = torch.nn.functional.pad(lower * z[..., :-1], (1, 0))
    return diag * z + up + lo


def split_params(tau: LatentTransform):
    p, d = tau.params, tau.z_dim
    if tau.variant == "MA":
        return p[..., : d // 2], p[..., d // 2:]
    if tau.variant == "T":
        return (p[..., :d], p[..., d: 2 * d - 1], p[..., 2 * d - 1: 3 * d - 2]), p[..., 3 * d - 2:]
    return p, None


def _check(tau: LatentTransform, z: torch.Tensor, body):
    if z.shape[-1] != tau.z_dim:
        raise ValueError(f"latent has dimension {z.shape[-1]}, transform expects {tau.z_dim}")
    if tau.variant == "N" and body is None:
        raise ValueError("variant N needs the action network")


def _neural(tau, z, params, body):
    out = body(z, params)
    if tau.neural_form == "skip" or tau.residual:
        out = z + out
    return out


def apply_tau(tau: LatentTransform, z: torch.Tensor,
              body: Optional[Callable] = None) -> torch.Tensor:
    """Forward action ``z -> tau(z)``."""
    _check(tau, z, body)
    v = tau.variant
    if v == "A":
        return z + tau.params
    if v == "N":
        return _neural(tau, z, tau.params, body)
    if v == "M":
        out = rotate_blocks(z, tau.params)
    elif v == "MA":
        angles, b = split_params(tau)
        out = rotate_blocks(z, angles) + b
    else:
        (dg, up, lo), b = split_params(tau)
        out = tridiag_matvec(dg, up, lo, z) + b
    return z + out if tau.residual else out


def apply_tau_inverse(tau: LatentTransform, z: torch.Tensor,
                      body: Optional[Callable] = None) -> torch.Tensor:
    """Inverse action ``z -> tau^-1(z)``.

    MA uses ``R(-a) z + R(-a) b`` and T uses ``m^T z + m^T b``, exactly as in
    the published action pairs; neither is the algebraic inverse of the
    forward affine map.
    """
    _check(tau, z, body)
    v = tau.variant
    if v == "A":
        return z - tau.params
    if v == "N":
        return _neural(tau, z, -tau.params, body)
    if v == "M":
        out = rotate_blocks(z, -tau.params)
    elif v == "MA":
        angles, b = split_params(tau)
        out = rotate_blocks(z, -angles) + rotate_blocks(b, -angles)
    else:
        (dg, up, lo), b = split_params(tau)
        out = tridiag_matvec(dg, lo, up, z) + tridiag_matvec(dg, lo, up, b)
    return z + out if tau.residual else out
