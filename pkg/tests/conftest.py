"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from ellipct import ConeBeamGeometry, Ellipsoid, EllipsoidSet, Ray
from ellipct.rotations import random_unit_quaternions


def desk_geometry(n_px=64, n_views=10, seed_angles=None):
    if seed_angles is None:
        angles = np.linspace(0, np.pi, n_views, endpoint=False)
    else:
        angles = np.sort(np.random.default_rng(seed_angles).uniform(0, np.pi, n_views))
    return ConeBeamGeometry(sod=4.0, sdd=8.0, det_width=6.0, det_height=6.0,
                            n_u=n_px, n_v=n_px, angles=angles)


def random_ellipsoid(rng, center_span=0.8, scale_range=(0.1, 0.6), sigma_range=(0.1, 1.0)):
    center = rng.uniform(-center_span, center_span, 3)
    scale = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), 3))
    quat = random_unit_quaternions(rng, 1)[0]
    sigma = rng.uniform(*sigma_range)
    return Ellipsoid(center, scale, quat, sigma)


def random_scene(rng, n, **kwargs):
    return EllipsoidSet.from_ellipsoids(random_ellipsoid(rng, **kwargs) for _ in range(n))


def random_ray(rng, span=1.5):
    origin = rng.uniform(-span, span, 3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return Ray(origin - 6.0 * direction, direction, 0.0, 12.0)


def chord_by_roots(ellipsoid, ray):
    """Independent chord oracle: solve the quadratic in the ray parameter directly.

    Returns (length, midpoint parameter) as |t2 - t1| and (t1 + t2) / 2 from
    numpy's polynomial roots of (o + t d - c)^T Sigma^-1 (o + t d - c) = 1.
    """
    from ellipct.geometry import covariance

    _, minv = covariance(ellipsoid)
    d = ray.direction
    w = ray.origin - ellipsoid.center
    a2 = d @ minv @ d
    a1 = 2.0 * (w @ minv @ d)
    a0 = w @ minv @ w - 1.0
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc <= 0:
        return 0.0, None
    roots = np.sort(np.roots([a2, a1, a0]).real)
    return float(roots[1] - roots[0]), float(0.5 * (roots[0] + roots[1]))


def interval_union_measure(intervals):
    """Lebesgue measure of a union of [lo, hi] intervals (sweep line)."""
    spans = sorted((lo, hi) for lo, hi in intervals if hi > lo)
    total = 0.0
    cur_lo, cur_hi = None, None
    for lo, hi in spans:
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
