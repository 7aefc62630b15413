"""Pixel-space transforms and triplet construction.

A triplet is ``(x0, x1, x2)`` with ``x1 = t(x0)`` and ``x2 = t^-1(x0)``. The
inverse is exact on the parameters but only approximate on pixels, since the
rotation kind crops and zooms.

All warps are expressed as a 3x3 homography mapping output coordinates to input
coordinates in normalized ``[-1, 1]`` space (y pointing down) and are sampled
bilinearly with zero fill.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

KINDS = ("rotate_crop_zoom", "tilt", "shear")
# Focal length of the virtual camera for tilt, in half-image widths.
TILT_FOCAL = 2.0
# Lower bounds that keep each distortion clearly visible, enforced when AugConfig.strict.
MAGNITUDE_FLOORS = {"rotate_crop_zoom": 5.0, "tilt": 5.0, "shear": 0.05}


class AugmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PixelTransform:
    kind: str
    magnitude: float  # >= 0; degrees for rotate/tilt, shear factor otherwise
    direction: int = 1

    @property
    def signed(self) -> float:
        return self.direction * self.magnitude


@dataclass(frozen=True)
class AugConfig:
    kinds: tuple = KINDS
    rot_deg: tuple = (15.0, 45.0)
    tilt_deg: tuple = (10.0, 30.0)
    shear: tuple = (0.15, 0.4)
    seed: int = 0
    strict: bool = True

    def range_for(self, kind: str) -> tuple:
        return {"rotate_crop_zoom": self.rot_deg, "tilt": self.tilt_deg, "shear": self.shear}[kind]

    def validate(self):
        if not self.kinds:
            raise AugmentationConfigError("aug.kinds: no transform kind enabled")
        for kind in self.kinds:
            if kind not in KINDS:
                raise AugmentationConfigError(f"aug.kinds: unknown kind {kind!r}")
            lo, hi = self.range_for(kind)
            if not 0 <= lo <= hi:
                raise AugmentationConfigError(f"{kind}: invalid magnitude range [{lo}, {hi}]")
            if self.strict and lo < MAGNITUDE_FLOORS[kind]:
                raise AugmentationConfigError(
                    f"{kind}: minimum magnitude {lo} is below the floor {MAGNITUDE_FLOORS[kind]}"
                )
        return self


def sample_transform(rng: np.random.Generator, config: AugConfig) -> PixelTransform:
    config.validate()
    kind = config.kinds[rng.integers(len(config.kinds))]
    lo, hi = config.range_for(kind)
    magnitude = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    direction = 1 if rng.integers(2) else -1
    return PixelTransform(kind, magnitude, direction)


def sample_transforms(rng: np.random.Generator, config: AugConfig, n: int) -> list[PixelTransform]:
    return [sample_transform(rng, config) for _ in range(n)]


def invert_transform(t: PixelTransform) -> PixelTransform:
    return PixelTransform(t.kind, t.magnitude, -t.direction)


def rotation_zoom(theta_deg: float) -> float:
    """Zoom that fills the frame with the largest axis-aligned box inside a rotated square."""
    th = math.radians(theta_deg)
    return abs(math.cos(th)) + abs(math.sin(th))


def sampling_homography(t: PixelTransform, crop: bool = True) -> np.ndarray:
    """3x3 map from output to input coordinates for transform ``t``."""
    s = t.signed
    if t.kind == "rotate_crop_zoom":
        th = math.radians(s)
        c, si = math.cos(th), math.sin(th)
        # Positive angles turn the content counterclockwise on screen.
        rot = np.array([[c, -si, 0.0], [si, c, 0.0], [0.0, 0.0, 1.0]])
        zoom = rotation_zoom(s) if crop else 1.0
        return rot @ np.diag([1.0 / zoom, 1.0 / zoom, 1.0])
    if t.kind == "tilt":
        ph = math.radians(s)
        f = TILT_FOCAL
        forward = np.array([[f * math.cos(ph), 0.0, 0.0], [0.0, f, 0.0], [math.sin(ph), 0.0, f]])
        return np.linalg.inv(forward)
    if t.kind == "shear":
        return np.array([[1.0, -s, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown transform kind {t.kind!r}")


def _base_grid(h: int, w: int, dtype) -> torch.Tensor:
    ys = (2 * torch.arange(h, dtype=dtype) + 1) / h - 1
    xs = (2 * torch.arange(w, dtype=dtype) + 1) / w - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy, torch.ones_like(gx)], dim=-1)  # [H, W, 3]


def warp(images: torch.Tensor, homographies) -> torch.Tensor:
    """Warp a ``[B, H, W]`` or ``[B, 1, H, W]`` batch with per-sample sampling homographies."""
    squeeze = images.dim() == 3
    x = images.unsqueeze(1) if squeeze else images
    b, _, h, w = x.shape
    hom = torch.as_tensor(np.asarray(homographies), dtype=torch.float64).reshape(b, 3, 3)
    pts = torch.einsum("bij,hwj->bhwi", hom, _base_grid(h, w, torch.float64))
    grid = (pts[..., :2] / pts[..., 2:3]).to(x.dtype)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = out.clamp_(0.0, 1.0)
    return out.squeeze(1) if squeeze else out


def apply_transforms(images, transforms, crop: bool = True) -> torch.Tensor:
    images = torch.as_tensor(images)
    out = images.clone()
    moving = [i for i, t in enumerate(transforms) if t.magnitude != 0]
    if moving:
        out[moving] = warp(images[moving], [sampling_homography(transforms[i], crop) for i in moving])
    return out


def apply_pixel_transform(image, t: PixelTransform, crop: bool = True) -> torch.Tensor:
    """Apply one transform to a single ``[H, W]`` image."""
    return apply_transforms(torch.as_tensor(image)[None], [t], crop)[0]


@dataclass
class Triplet:
    x0: torch.Tensor
    x1: torch.Tensor
    x2: torch.Tensor
    transform: PixelTransform | list = field(default=None)


def make_triplet(image, rng: np.random.Generator, config: AugConfig) -> Triplet:
    t = sample_transform(rng, config)
    x0 = torch.as_tensor(image)
    pair = apply_transforms(torch.stack([x0, x0]), [t, invert_transform(t)])
    return Triplet(x0, pair[0], pair[1], t)


def make_triplets(images: torch.Tensor, rng: np.random.Generator, config: AugConfig) -> Triplet:
    """Batched triplets; ``images`` is ``[B, 1, H, W]`` and the transforms a list."""
    ts = sample_transforms(rng, config, len(images))
    both = apply_transforms(torch.cat([images, images]), ts + [invert_transform(t) for t in ts])
    b = len(images)
    return Triplet(images, both[:b], both[b:], ts)


def augment_single(images: torch.Tensor, rng: np.random.Generator, config: AugConfig) -> torch.Tensor:
    """One augmented view per image, with the same marginal as a triplet slot.

    Each image stays untouched with probability 1/3, otherwise a sampled
    transform or its inverse is applied with equal odds.
    """
    ts = sample_transforms(rng, config, len(images))
    slot = rng.integers(3, size=len(images))
    out = images.clone()
    idx = np.flatnonzero(slot > 0)
    if len(idx):
        chosen = [ts[i] if slot[i] == 1 else invert_transform(ts[i]) for i in idx]
        out[idx] = apply_transforms(images[idx], chosen)
    return out
