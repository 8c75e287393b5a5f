"""Seed the initial ellipsoid set from a reconstructed density volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptySeedError, InvalidParameterError
from .geometry import EllipsoidSet
from .recon import VoxelVolume
from .rotations import random_unit_quaternions

SIGMA_FLOOR = 1e-4


@dataclass
class SeedConfig:
    """How to turn a density volume into seed ellipsoids."""

    threshold: float = 0.0  # absolute density cut tau
    count: int = 400  # target number of seeds
    seed: int = 0
    sigma_mode: str = "voxel-value"  # or "constant"
    sigma_const: float = 0.1
    scale_clamp: tuple = (0.5, 2.0)  # in units of voxel spacing

    def __post_init__(self):
        if self.threshold < 0:
            raise InvalidParameterError("threshold must be >= 0")
        if self.count < 1:
            raise InvalidParameterError("count must be >= 1")
        if self.sigma_mode not in ("voxel-value", "constant"):
            raise InvalidParameterError(f"unknown sigma mode {self.sigma_mode!r}")


def extract_points(volume: VoxelVolume, config: SeedConfig):
    """Voxel centers above the threshold, subsampled to `config.count`.

    Returns (positions (M, 3), densities (M,)), index-ordered. Raises
    EmptySeedError when nothing clears the threshold.
    """
    values = np.asarray(volume.values, dtype=np.float64)
    mask = values > config.threshold
    flat = np.flatnonzero(mask.ravel())
    if flat.size == 0:
        raise EmptySeedError(
            f"no voxels above threshold {config.threshold}; cannot seed")
    if flat.size > config.count:
        rng = np.random.default_rng(config.seed)
        flat = np.sort(rng.choice(flat, size=config.count, replace=False))
    idx = np.stack(np.unravel_index(flat, values.shape), axis=1)
    positions = volume.origin[None, :] + idx * volume.spacing[None, :]
    densities = values.ravel()[flat]
    return positions, densities


def seed_ellipsoids(positions: np.ndarray, densities: np.ndarray,
                    config: SeedConfig, voxel_spacing) -> EllipsoidSet:
    """One ellipsoid per point: isotropic KNN-sized scale, random rotation.

    Scale is the mean distance to the 3 nearest other seeds, clamped to
    `scale_clamp` times the voxel spacing; sigma comes from the voxel density
    (or a constant), floored at 1e-4.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    densities = np.asarray(densities, dtype=np.float64).reshape(-1)
    n = positions.shape[0]
    if n == 0:
        raise InvalidParameterError("seed_ellipsoids requires at least one point")
    sp = float(np.mean(np.asarray(voxel_spacing, dtype=np.float64)))
    lo, hi = config.scale_clamp[0] * sp, config.scale_clamp[1] * sp

    if n > 1:
        tree = cKDTree(positions)
        k = min(3, n - 1)
        dist, _ = tree.query(positions, k=k + 1)
        mean_dist = np.mean(dist[:, 1:], axis=1)
    else:
        mean_dist = np.zeros(1)
    scale = np.clip(mean_dist, lo, hi)
    scales = np.repeat(scale[:, None], 3, axis=1)

    rng = np.random.default_rng(config.seed)
    quats = random_unit_quaternions(rng, n)
    if config.sigma_mode == "voxel-value":
        sigmas = np.maximum(densities, SIGMA_FLOOR)
    else:
        sigmas = np.full(n, max(config.sigma_const, SIGMA_FLOOR))
    scene = EllipsoidSet(positions, scales, quats, sigmas)
    scene.validate()
    return scene


def seed_from_volume(volume: VoxelVolume, config: SeedConfig) -> EllipsoidSet:
    """Convenience wrapper: extract points, then build the seed set."""
    positions, densities = extract_points(volume, config)
    return seed_ellipsoids(positions, densities, config, volume.spacing)


def random_seed_scene(volume: VoxelVolume, config: SeedConfig) -> EllipsoidSet:
    """Position-random baseline of equal count, used for init ablations."""
    rng = np.random.default_rng(config.seed)
    lo = volume.origin
    hi = volume.origin + (np.array(volume.dims) - 1) * volume.spacing
    positions = rng.uniform(lo, hi, size=(config.count, 3))
    densities = np.full(config.count, config.sigma_const)
    return seed_ellipsoids(positions, densities,
                           SeedConfig(threshold=config.threshold, count=config.count,
                                      seed=config.seed, sigma_mode="constant",
                                      sigma_const=config.sigma_const,
                                      scale_clamp=config.scale_clamp),
                           volume.spacing)
