"""Synthetic CT volumes with a single deformed-superellipsoid organ.

Stands in for clinical CT + contour pairs.  Each phantom is a randomly
rotated superellipsoid whose radius is modulated by a smooth field sampled
on a sphere, so the organ has both convex and concave regions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .grid import BinaryMask, Volume
from .perturb import make_rng, smooth


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (80, 80, 80)
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    radius_range: tuple[float, float] = (15.0, 30.0)
    exponent_range: tuple[float, float] = (1.5, 3.5)
    deform_sigma_mm: float = 10.0
    deform_max_fraction: float = 0.2
    organ_hu: tuple[float, float] = (35.0, 55.0)
    background_hu: tuple[float, float] = (-45.0, -15.0)
    texture_hu: float = 8.0
    texture_sigma_mm: float = 4.0
    voxel_noise_hu: float = 20.0
    partial_volume_sigma_vox: float = 0.5
    margin_vox: int = 8
    max_retries: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        object.__setattr__(self, "exponent_range", tuple(float(r) for r in self.exponent_range))
        object.__setattr__(self, "organ_hu", tuple(float(r) for r in self.organ_hu))
        object.__setattr__(self, "background_hu", tuple(float(r) for r in self.background_hu))
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius_range {self.radius_range}")
        if not 0 < self.exponent_range[0] <= self.exponent_range[1]:
            raise ValueError(f"bad exponent_range {self.exponent_range}")
        if not 0 <= self.deform_max_fraction < 1:
            raise ValueError("deform_max_fraction must be in [0, 1)")
        extent = min(n * s for n, s in zip(self.dims, self.spacing))
        margin = self.margin_vox * max(self.spacing)
        if 2 * (lo + margin) > extent:
            raise ValueError("smallest organ cannot fit inside the volume with the required margin")

    def to_dict(self) -> dict:
        return asdict(self)


def _radial_field(rng, cfg: PhantomConfig):
    """Smooth random field on a small cube, later read on a sphere of radius ``r_ref``.

    The smoothing sigma is expressed in mm at that radius.
    """
    r_ref = float(np.mean(cfg.radius_range))
    n = 24
    step = 2.5 * r_ref / n
    field = smooth(rng.standard_normal((n, n, n)), [cfg.deform_sigma_mm / step] * 3)
    field /= np.abs(field).max()
    return field, step, r_ref


def _sample_field(field, step, r_ref, dirs):
    n = field.shape[0]
    coords = (dirs * r_ref) / step + (n - 1) / 2.0
    return ndimage.map_coordinates(field, coords.T, order=1, mode="nearest")


def _shape_mask(cfg: PhantomConfig, rng, scale: float):
    dims = np.asarray(cfg.dims)
    spacing = np.asarray(cfg.spacing)
    radii = rng.uniform(*cfg.radius_range, size=3) * scale
    expo = rng.uniform(*cfg.exponent_range)
    rot = Rotation.from_rotvec(rng.normal(size=3) * rng.uniform(0, np.pi) / np.sqrt(3))
    jitter = rng.uniform(-1, 1, size=3) * 3.0
    field, step, r_ref = _radial_field(rng, cfg)

    center = (dims - 1) * spacing / 2.0 + jitter
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) - center
    local = rot.inv().apply(pts)
    rho = (np.abs(local / radii) ** expo).sum(axis=1) ** (1.0 / expo)
    dirs = local / np.maximum(np.linalg.norm(local, axis=1, keepdims=True), 1e-9)
    limit = 1.0 + cfg.deform_max_fraction * _sample_field(field, step, r_ref, dirs)
    inside = (rho <= limit).reshape(cfg.dims)
    params = {"radii": radii.tolist(), "exponent": float(expo), "center": center.tolist()}
    return inside, params


def _largest_6_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def generate_phantom(cfg: PhantomConfig, seed: int) -> tuple[Volume, BinaryMask, dict]:
    """Return (ct, ground-truth mask, shape parameters).  Deterministic per seed."""
    rng = make_rng(seed)
    m = cfg.margin_vox
    scale = 1.0
    for _ in range(cfg.max_retries):
        inside, params = _shape_mask(cfg, rng, scale)
        inside = _largest_6_component(inside)
        idx = np.argwhere(inside)
        if len(idx) and idx.min() >= m and np.all(idx.max(axis=0) <= np.asarray(cfg.dims) - 1 - m):
            break
        scale *= 0.9
    else:
        raise PhantomError(f"seed {seed}: organ does not fit with a {m}-voxel margin")

    organ = rng.uniform(*cfg.organ_hu)
    background = rng.uniform(*cfg.background_hu)
    frac = ndimage.gaussian_filter(inside.astype(np.float64), cfg.partial_volume_sigma_vox)
    ct = background + (organ - background) * frac
    tex_sigma = [cfg.texture_sigma_mm / s for s in cfg.spacing]
    texture = smooth(rng.standard_normal(cfg.dims), tex_sigma)
    texture *= cfg.texture_hu / texture.std()
    ct += texture + rng.normal(0.0, cfg.voxel_noise_hu, size=cfg.dims)

    params.update(organ_hu=float(organ), background_hu=float(background), scale=float(scale))
    return Volume(ct, cfg.spacing), BinaryMask(inside, cfg.spacing), params
