"""Voxel-grid iterative reconstruction: CGLS, SART, TV, and the hybrid pipeline.

The system operator is a trilinear ray-driven projector with a fixed sampling
step of half the voxel spacing; its adjoint is the exact transpose of the
discretized forward map, so the conjugate-gradient machinery is sound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import ConfigError, InvalidParameterError, NumericalError
from .projector import ConeBeamGeometry, pixel_rays

TV_EPS = 1e-8


@dataclass
class VoxelVolume:
    """Regular density grid; `origin` is the world position of voxel (0,0,0)'s center."""

    values: np.ndarray  # (nx, ny, nz) float32
    spacing: np.ndarray  # (3,) > 0
    origin: np.ndarray  # (3,)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidParameterError("volume values must be a non-empty 3-d array")
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0):
            raise InvalidParameterError("voxel spacing must be positive")
        if not (np.all(np.isfinite(self.spacing)) and np.all(np.isfinite(self.origin))):
            raise InvalidParameterError("spacing and origin must be finite")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("volume values must be finite")

    @property
    def dims(self):
        return self.values.shape

    @classmethod
    def centered(cls, dims, half_extent: float, values=None) -> "VoxelVolume":
        """Cube grid covering [-half_extent, half_extent]^3."""
        dims = tuple(int(d) for d in (dims if np.iterable(dims) else (dims,) * 3))
        spacing = np.array([2.0 * half_extent / d for d in dims])
        origin = -half_extent + spacing / 2.0
        if values is None:
            values = np.zeros(dims, dtype=np.float32)
        return cls(values, spacing, origin)

    def voxel_centers(self):
        """Meshgrid arrays (X, Y, Z) of voxel-center world coordinates."""
        axes = [self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)]
        return np.meshgrid(*axes, indexing="ij")

    def like(self, values: np.ndarray) -> "VoxelVolume":
        return VoxelVolume(values, self.spacing.copy(), self.origin.copy())


class LinearProjector:
    """Ray-driven trilinear forward/adjoint pair for a cone-beam geometry."""

    def __init__(self, geometry: ConeBeamGeometry, dims, spacing, origin):
        self.geometry = geometry
        self.dims = tuple(int(d) for d in dims)
        self.spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0):
            raise InvalidParameterError("voxel spacing must be positive")
        self.step = 0.5 * float(np.min(self.spacing))
        self._rays = {}

    @classmethod
    def for_volume(cls, geometry: ConeBeamGeometry, volume: VoxelVolume) -> "LinearProjector":
        return cls(geometry, volume.dims, volume.spacing, volume.origin)

    def _view_rays(self, view: int):
        if view not in self._rays:
            frame = self.geometry.frame(view)
            src, dirs, _ = pixel_rays(frame, self.geometry)
            self._rays[view] = (src, dirs)
        return self._rays[view]

    def zero_volume(self) -> np.ndarray:
        return np.zeros(self.dims)

    def _check_volume(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.dims:
            raise InvalidParameterError(
                f"volume shape {values.shape} does not match projector dims {self.dims}")
        return np.ascontiguousarray(values)

    def _check_stack(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        want = (self.geometry.n_views, self.geometry.n_v, self.geometry.n_u)
        if images.shape != want:
            raise InvalidParameterError(
                f"projection stack shape {images.shape} does not match geometry {want}")
        return images

    def forward_view(self, values: np.ndarray, view: int) -> np.ndarray:
        values = self._check_volume(values)
        src, dirs = self._view_rays(view)
        out = _kernels.voxel_forward(values, self.origin, self.spacing, src, dirs, self.step)
        return out.reshape(self.geometry.n_v, self.geometry.n_u)

    def adjoint_view(self, image: np.ndarray, view: int) -> np.ndarray:
        image = np.ascontiguousarray(image, dtype=np.float64).reshape(-1)
        if image.size != self.geometry.n_u * self.geometry.n_v:
            raise InvalidParameterError("image size does not match the detector raster")
        src, dirs = self._view_rays(view)
        vol = np.zeros(self.dims)
        _kernels.voxel_adjoint(image, vol, self.origin, self.spacing, src, dirs, self.step)
        return vol

    def forward(self, values: np.ndarray) -> np.ndarray:
        values = self._check_volume(values)
        return np.stack([self.forward_view(values, v) for v in range(self.geometry.n_views)])

    def adjoint(self, images: np.ndarray) -> np.ndarray:
        images = self._check_stack(images)
        vol = np.zeros(self.dims)
        for v in range(self.geometry.n_views):
            vol += self.adjoint_view(images[v], v)
        return vol


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def cgls_solve(forward, adjoint, b, x0, iterations: int):
    """Generic CGLS on min ||A x - b||^2. Returns (x, residual norms).

    `forward`/`adjoint` are callables; `x0` fixes the domain shape. No
    non-negativity constraint is applied here.
    """
    if iterations < 1:
        raise InvalidParameterError("iterations must be >= 1")
    x = np.array(x0, dtype=np.float64)
    r = b - forward(x)
    s = adjoint(r)
    p = s.copy()
    gamma = float(np.sum(s * s))
    gamma0 = gamma
    residuals = [float(np.linalg.norm(r))]
    for _ in range(iterations):
        # Converged to rounding level: iterating further only amplifies noise.
        if gamma <= 1e-24 * gamma0:
            break
        q = forward(p)
        qq = float(np.sum(q * q))
        if qq == 0.0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        if not np.all(np.isfinite(x)):
            raise NumericalError("CGLS produced non-finite values; aborting")
        residuals.append(float(np.linalg.norm(r)))
        s = adjoint(r)
        gamma_new = float(np.sum(s * s))
        beta = gamma_new / gamma if gamma > 0 else 0.0
        gamma = gamma_new
        p = s + beta * p
    return x, np.asarray(residuals)


def cgls(projector: LinearProjector, projections: np.ndarray, iterations: int = 20,
         volume0: VoxelVolume | None = None):
    """CGLS reconstruction; values clamped to >= 0 only at the very end.

    Returns (VoxelVolume, residual norms per iteration).
    """
    b = projector._check_stack(projections)
    x0 = projector.zero_volume() if volume0 is None else np.asarray(volume0.values, np.float64)
    x, residuals = cgls_solve(projector.forward, projector.adjoint, b, x0, iterations)
    vol = VoxelVolume(np.maximum(x, 0.0), projector.spacing, projector.origin)
    return vol, residuals


def sart(projector: LinearProjector, projections: np.ndarray, sweeps: int = 5,
         relaxation: float = 1.0, volume0: VoxelVolume | None = None) -> VoxelVolume:
    """View-wise SART with row/column-sum normalization.

    Non-negativity is projected after each full sweep over the views.
    """
    if not 0.0 < relaxation < 2.0:
        raise InvalidParameterError("relaxation must lie in (0, 2)")
    b = projector._check_stack(projections)
    if projector.geometry.n_views == 0:
        raise InvalidParameterError("SART requires at least one view")
    x = projector.zero_volume() if volume0 is None else np.asarray(volume0.values, np.float64)

    ones_vol = np.ones(projector.dims)
    ones_img = np.ones((projector.geometry.n_v, projector.geometry.n_u))
    row_sums = [projector.forward_view(ones_vol, v) for v in range(projector.geometry.n_views)]
    col_sums = [projector.adjoint_view(ones_img, v) for v in range(projector.geometry.n_views)]

    for _ in range(sweeps):
        for v in range(projector.geometry.n_views):
            resid = b[v] - projector.forward_view(x, v)
            row = row_sums[v]
            ratio = np.where(row > 1e-12, resid / np.where(row > 1e-12, row, 1.0), 0.0)
            back = projector.adjoint_view(ratio, v)
            col = col_sums[v]
            x += relaxation * np.where(col > 1e-12, back / np.where(col > 1e-12, col, 1.0), 0.0)
        np.maximum(x, 0.0, out=x)
        if not np.all(np.isfinite(x)):
            raise NumericalError("SART produced non-finite values; aborting")
    return VoxelVolume(x, projector.spacing, projector.origin)


def tv_value(values: np.ndarray, eps: float = TV_EPS) -> float:
    """Smoothed isotropic total variation sum(sqrt(|grad|^2 + eps^2))."""
    x = np.asarray(values, dtype=np.float64)
    mag2 = np.full(x.shape, eps * eps)
    for axis in range(3):
        d = np.zeros_like(x)
        sl_hi = [slice(None)] * 3
        sl_hi[axis] = slice(None, -1)
        d[tuple(sl_hi)] = np.diff(x, axis=axis)
        mag2 += d * d
    return float(np.sum(np.sqrt(mag2)))


def _tv_gradient(x: np.ndarray, eps: float = TV_EPS) -> np.ndarray:
    diffs = []
    mag2 = np.full(x.shape, eps * eps)
    for axis in range(3):
        d = np.zeros_like(x)
        sl = [slice(None)] * 3
        sl[axis] = slice(None, -1)
        d[tuple(sl)] = np.diff(x, axis=axis)
        diffs.append(d)
        mag2 += d * d
    mag = np.sqrt(mag2)
    grad = np.zeros_like(x)
    for axis in range(3):
        p = diffs[axis] / mag
        # Adjoint of the forward difference: out[j] += p[j-1] - p[j].
        grad -= p
        sl_dst = [slice(None)] * 3
        sl_dst[axis] = slice(1, None)
        sl_src = [slice(None)] * 3
        sl_src[axis] = slice(None, -1)
        grad[tuple(sl_dst)] += p[tuple(sl_src)]
    return grad


def tv_denoise(volume: VoxelVolume, steps: int, step_size: float) -> VoxelVolume:
    """Gradient descent on smoothed isotropic TV with backtracking halving.

    The backtracking guarantees TV(output) <= TV(input) for any step size.
    """
    if step_size <= 0:
        raise InvalidParameterError("step_size must be positive")
    x = np.asarray(volume.values, dtype=np.float64)
    if steps <= 0:
        return volume.like(x)
    current = tv_value(x)
    for _ in range(steps):
        g = _tv_gradient(x)
        step = step_size
        for _ in range(30):
            cand = x - step * g
            cand_tv = tv_value(cand)
            if cand_tv <= current:
                x, current = cand, cand_tv
                break
            step *= 0.5
    return volume.like(x)


def hybrid_init(projector: LinearProjector, projections: np.ndarray,
                schedule=(20, 5, 30), relaxation: float = 1.0,
                tv_step: float | None = None, interleave: bool = False) -> VoxelVolume:
    """CGLS coarse estimate, SART refinement (warm started), then TV cleanup.

    `schedule` is (cgls_iterations, sart_sweeps, tv_steps); zero entries skip
    the stage. With `interleave`, SART sweeps and TV blocks alternate instead
    of running back to back.
    """
    cgls_iters, sart_sweeps, tv_steps = (int(s) for s in schedule)
    b = projector._check_stack(projections)
    if cgls_iters > 0:
        vol, _ = cgls(projector, b, cgls_iters)
    else:
        vol = VoxelVolume(projector.zero_volume(), projector.spacing, projector.origin)
    if tv_step is None:
        span = float(np.max(vol.values) - np.min(vol.values))
        tv_step = 0.002 * span if span > 0 else 1e-3
    if interleave and sart_sweeps > 0 and tv_steps > 0:
        per_block = max(1, tv_steps // sart_sweeps)
        for _ in range(sart_sweeps):
            vol = sart(projector, b, 1, relaxation, volume0=vol)
            vol = tv_denoise(vol, per_block, tv_step)
        return vol
    if sart_sweeps > 0:
        vol = sart(projector, b, sart_sweeps, relaxation, volume0=vol)
    if tv_steps > 0:
        vol = tv_denoise(vol, tv_steps, tv_step)
    return vol


def recon_ct(projector: LinearProjector, projections: np.ndarray, method: str = "sart",
             sweeps: int = 10, relaxation: float = 1.0, cgls_iters: int = 20,
             tv_steps: int = 20, tv_step: float | None = None) -> VoxelVolume:
    """Final CT reconstruction from a (typically dense, model-rendered) stack."""
    b = projector._check_stack(projections)
    if projector.geometry.n_views < 2:
        raise InvalidParameterError("CT reconstruction requires at least 2 views")
    if method == "sart":
        return sart(projector, b, sweeps, relaxation)
    if method == "cgls+tv":
        vol, _ = cgls(projector, b, cgls_iters)
        if tv_step is None:
            span = float(np.max(vol.values) - np.min(vol.values))
            tv_step = 0.002 * span if span > 0 else 1e-3
        vol = tv_denoise(vol, tv_steps, tv_step)
        # Attenuation is non-negative; TV descent may undershoot slightly.
        return vol.like(np.maximum(np.asarray(vol.values, np.float64), 0.0))
    raise ConfigError(f"unknown CT reconstruction method {method!r}")
