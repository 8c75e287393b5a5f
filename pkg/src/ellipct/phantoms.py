"""Analytic ellipsoid phantoms and their voxelizations for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, InvalidParameterError
from .geometry import EllipsoidSet
from .recon import VoxelVolume
from .rotations import quat_normalize, random_unit_quaternions

PRESETS = ("two-material-slab", "nested-shells", "random-k", "overlap-pair")


@dataclass
class PhantomSpec:
    """A named ground-truth scene plus the seed that generated it."""

    name: str
    scene: EllipsoidSet
    seed: int = 0


def _identity_quat(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def make_phantom(preset: str, seed: int = 0, k: int = 16) -> PhantomSpec:
    """Deterministic phantom scenes; all fit inside the unit ball (radius ~1)."""
    if preset == "overlap-pair":
        # Two intersecting blobs straddling the origin; the central ray at
        # angle 0 runs along +x and crosses both chords in an overlapping span.
        centers = np.array([[-0.18, 0.0, 0.0], [0.22, 0.04, 0.0]])
        scales = np.array([[0.42, 0.30, 0.30], [0.36, 0.26, 0.26]])
        quats = quat_normalize(np.array([[1.0, 0.0, 0.1, 0.0], [1.0, 0.1, 0.0, 0.1]]))
        sigmas = np.array([0.6, 1.1])
        scene = EllipsoidSet(centers, scales, quats, sigmas)
    elif preset == "two-material-slab":
        centers = np.array([[0.0, 0.0, -0.33], [0.0, 0.0, 0.33]])
        scales = np.array([[0.78, 0.78, 0.34], [0.78, 0.78, 0.34]])
        scene = EllipsoidSet(centers, scales, _identity_quat(2), np.array([0.4, 1.0]))
    elif preset == "nested-shells":
        # Innermost first: voxelization precedence is by ascending index.
        centers = np.zeros((3, 3))
        scales = np.array([[0.28, 0.24, 0.26], [0.55, 0.50, 0.52], [0.88, 0.80, 0.84]])
        scene = EllipsoidSet(centers, scales, _identity_quat(3), np.array([1.0, 0.5, 0.2]))
    elif preset == "random-k":
        scene = _random_k(seed, k)
    else:
        raise ConfigError(f"unknown phantom preset {preset!r}")
    scene.validate()
    return PhantomSpec(preset, scene, seed)


def _random_k(seed: int, k: int) -> EllipsoidSet:
    """k random non-overlapping ellipsoids (conservative center-distance test)."""
    rng = np.random.default_rng(seed)
    centers = []
    radii = []
    scales = []
    attempts = 0
    while len(centers) < k:
        attempts += 1
        if attempts > 20000:
            raise InvalidParameterError(f"could not place {k} disjoint ellipsoids")
        c = rng.uniform(-0.72, 0.72, size=3)
        if np.linalg.norm(c) > 0.78:
            continue
        s = np.exp(rng.uniform(np.log(0.09), np.log(0.26), size=3))
        r = float(np.max(s))
        if any(np.linalg.norm(c - co) < r + ro for co, ro in zip(centers, radii)):
            continue
        centers.append(c)
        radii.append(r)
        scales.append(s)
    quats = random_unit_quaternions(rng, k)
    sigmas = rng.uniform(0.3, 1.0, size=k)
    return EllipsoidSet(np.array(centers), np.array(scales), quats, sigmas)


def voxelize(spec: PhantomSpec, dims, half_extent: float = 1.25) -> VoxelVolume:
    """Sample sigma at voxel centers; the lowest-index containing ellipsoid wins."""
    dims = tuple(int(d) for d in (dims if np.iterable(dims) else (dims,) * 3))
    if min(dims) < 8:
        raise InvalidParameterError("voxelization needs dims of at least 8^3")
    vol = VoxelVolume.centered(dims, half_extent)
    X, Y, Z = vol.voxel_centers()
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    values = np.zeros(pts.shape[0])
    assigned = np.zeros(pts.shape[0], dtype=bool)
    minvs = spec.scene.covariance_inverses()
    for i in range(len(spec.scene)):
        rel = pts - spec.scene.centers[i]
        q = np.einsum("pk,kl,pl->p", rel, minvs[i], rel)
        inside = (q <= 1.0) & ~assigned
        values[inside] = spec.scene.sigmas[i]
        assigned |= inside
    return vol.like(values.reshape(dims))
