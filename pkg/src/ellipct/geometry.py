"""Analytic ray/ellipsoid geometry: chords, silhouettes, oriented boxes, tile culling.

All chord math runs in world coordinates with the frame-independent A/B/C
quadratic form; depths are ray parameters. Silhouettes are detector-plane
conics obtained by dual-quadric perspective projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateProjectionError, InvalidParameterError
from .rotations import quat_normalize, quat_to_matrix

# Radicand noise tolerance: values in [-TANGENT_EPS, 0] are tangent grazes and
# report a miss (measure zero; avoids NaN from sqrt of negative round-off).
TANGENT_EPS = 1e-12

# Conservative inflation of culling boxes, in detector units, covering the
# 1e-6 containment tolerance of the projected conic.
CULL_MARGIN = 1e-6


def _as_vec(v, n, name):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise InvalidParameterError(f"{name} must have {n} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} must be finite, got {a}")
    return a


@dataclass(frozen=True)
class Ellipsoid:
    """One material blob: center, semi-axis scales, rotation, attenuation sigma."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec(self.center, 3, "center"))
        object.__setattr__(self, "scale", _as_vec(self.scale, 3, "scale"))
        object.__setattr__(self, "rotation", _as_vec(self.rotation, 4, "rotation"))
        object.__setattr__(self, "sigma", float(self.sigma))
        if np.any(self.scale <= 0):
            raise InvalidParameterError(f"scale components must be > 0, got {self.scale}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise InvalidParameterError("rotation quaternion must be unit length within 1e-9")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise InvalidParameterError(f"sigma must be finite and >= 0, got {self.sigma}")


@dataclass
class EllipsoidSet:
    """Struct-of-arrays scene container used by the projector and optimizer."""

    centers: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3), strictly positive
    rotations: np.ndarray  # (N, 4), unit quaternions
    sigmas: np.ndarray  # (N,), >= 0

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.sigmas = np.ascontiguousarray(self.sigmas, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> None:
        for name, arr in (("centers", self.centers), ("scales", self.scales),
                          ("rotations", self.rotations), ("sigmas", self.sigmas)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contain non-finite values")
        if np.any(self.scales <= 0):
            raise InvalidParameterError("scales must be strictly positive")
        if np.any(self.sigmas < 0):
            raise InvalidParameterError("sigmas must be non-negative")
        # Loose bound: covariance construction normalizes, and finite-difference
        # probes legitimately perturb raw components; the scalar Ellipsoid type
        # keeps the strict 1e-9 invariant.
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise InvalidParameterError("rotation quaternions must be unit length within 1e-3")

    @classmethod
    def empty(cls) -> "EllipsoidSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_ellipsoids(cls, ellipsoids) -> "EllipsoidSet":
        ellipsoids = list(ellipsoids)
        if not ellipsoids:
            return cls.empty()
        return cls(
            np.stack([e.center for e in ellipsoids]),
            np.stack([e.scale for e in ellipsoids]),
            np.stack([e.rotation for e in ellipsoids]),
            np.array([e.sigma for e in ellipsoids]),
        )

    def ellipsoid(self, i: int) -> Ellipsoid:
        return Ellipsoid(self.centers[i], self.scales[i],
                         quat_normalize(self.rotations[i]), self.sigmas[i])

    def subset(self, idx) -> "EllipsoidSet":
        return EllipsoidSet(self.centers[idx], self.scales[idx],
                            self.rotations[idx], self.sigmas[idx])

    def copy(self) -> "EllipsoidSet":
        return EllipsoidSet(self.centers.copy(), self.scales.copy(),
                            self.rotations.copy(), self.sigmas.copy())

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations) if len(self) else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)

    def covariance_inverses(self) -> np.ndarray:
        R = self.rotation_matrices()
        return np.einsum("nij,nj,nkj->nik", R, self.scales**-2.0, R)


@dataclass(frozen=True)
class Ray:
    """Parametric ray o + t*d with unit direction and valid interval [t_near, t_far]."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec(self.origin, 3, "origin"))
        d = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise InvalidParameterError("direction must be a finite 3-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise InvalidParameterError("direction must be unit length within 1e-12")
        object.__setattr__(self, "direction", d)
        if not (self.t_near < self.t_far):
            raise InvalidParameterError("require t_near < t_far")

    def point(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class ChordResult:
    """Quadratic coefficients and corrected-length-free chord of a ray/ellipsoid pair."""

    A: float
    B: float
    C: float
    length: float
    depth: float  # ray parameter of the chord midpoint
    hit: bool


def covariance(ellipsoid: Ellipsoid):
    """Return (Sigma, Sigma_inv) for R diag(scale^2) R^T."""
    R = quat_to_matrix(ellipsoid.rotation)
    sigma = (R * ellipsoid.scale**2) @ R.T
    sigma_inv = (R * ellipsoid.scale**-2.0) @ R.T
    return sigma, sigma_inv


def l_max(ellipsoid: Ellipsoid, direction: np.ndarray) -> float:
    """Longest possible chord along `direction`: 2 / sqrt(d^T Sigma_inv d)."""
    d = _as_vec(direction, 3, "direction")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise InvalidParameterError("direction must be unit length")
    _, minv = covariance(ellipsoid)
    return 2.0 / np.sqrt(d @ minv @ d)


def chord(ellipsoid: Ellipsoid, ray: Ray) -> ChordResult:
    """Closed-form chord of a ray through an ellipsoid.

    Uses the displacement a = u - p_c from the ellipsoid center to the ray
    point closest to it, and the quadratic A s^2 + 2 B s + (C - 1) = 0 in the
    ray parameter offset s. The result is frame independent: the length
    equals |s2 - s1| from direct root solving, and `depth` is the ray
    parameter of the chord midpoint (where the quadratic is minimized).
    """
    _, minv = covariance(ellipsoid)
    if not np.all(np.isfinite(minv)):
        raise InvalidParameterError("degenerate covariance")
    d = ray.direction
    t_u = d @ (ellipsoid.center - ray.origin)
    a = ray.origin + t_u * d - ellipsoid.center
    A = float(d @ minv @ d)
    B = float(a @ minv @ d)
    C = float(a @ minv @ a)
    # Radicand of l = l_max * sqrt(1 - C + B^2/A); equals (B^2 - A(C-1))/A.
    rho = 1.0 - C + B * B / A
    depth = t_u - B / A
    if rho <= 0.0:
        return ChordResult(A, B, C, 0.0, depth, False)
    length = 2.0 / np.sqrt(A) * np.sqrt(rho)
    return ChordResult(A, B, C, float(length), float(depth), True)


# ---------------------------------------------------------------------------
# View frames and perspective silhouettes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewFrame:
    """One cone-beam view: point source plus an oriented flat detector."""

    source: np.ndarray
    det_center: np.ndarray
    e_u: np.ndarray  # detector column axis, unit
    e_v: np.ndarray  # detector row axis, unit
    normal: np.ndarray  # unit, points from source toward detector

    def __post_init__(self):
        for name in ("source", "det_center", "e_u", "e_v", "normal"):
            object.__setattr__(self, name, _as_vec(getattr(self, name), 3, name))

    @property
    def sdd(self) -> float:
        """Source-to-detector distance along the normal."""
        return float((self.det_center - self.source) @ self.normal)

    def projection_matrix(self) -> np.ndarray:
        """3x4 homogeneous map world -> detector (u, v, w) with u = u_h / w."""
        s, c, n = self.source, self.det_center, self.normal
        dist = self.sdd
        rows = []
        for e in (self.e_u, self.e_v):
            off = (s - c) @ e
            rows.append(np.concatenate([dist * e + off * n, [-(dist * e + off * n) @ s]]))
        rows.append(np.concatenate([n, [-(n @ s)]]))
        return np.stack(rows)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("source", "det_center", "e_u", "e_v", "normal")}

    @classmethod
    def from_dict(cls, d: dict) -> "ViewFrame":
        return cls(**{k: np.asarray(d[k], dtype=np.float64)
                      for k in ("source", "det_center", "e_u", "e_v", "normal")})


@dataclass(frozen=True)
class Conic2D:
    """Homogeneous point conic x^T M x = 0 on the detector plane."""

    matrix: np.ndarray  # (3, 3) symmetric
    degenerate: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))


@dataclass(frozen=True)
class OrientedBox2D:
    """Oriented rectangle on the detector: center, orthonormal axes (rows), half extents."""

    center: np.ndarray
    axes: np.ndarray  # (2, 2), rows are unit vectors
    half_extents: np.ndarray  # (2,), >= 0

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec(self.center, 2, "center"))
        axes = np.asarray(self.axes, dtype=np.float64).reshape(2, 2)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "half_extents", _as_vec(self.half_extents, 2, "half_extents"))
        gram = axes @ axes.T
        if np.max(np.abs(gram - np.eye(2))) > 1e-9:
            raise InvalidParameterError("box axes must be orthonormal within 1e-9")
        if np.any(self.half_extents < 0):
            raise InvalidParameterError("half extents must be >= 0")


def _dual_quadrics(scene: EllipsoidSet) -> np.ndarray:
    """(N, 4, 4) dual quadrics [cc^T - Sigma, c; c^T, 1] (tangent planes: pi^T Q* pi = 0)."""
    cov = scene.covariances()
    c = scene.centers
    n = len(scene)
    q = np.empty((n, 4, 4), dtype=np.float64)
    q[:, :3, :3] = c[:, :, None] * c[:, None, :] - cov
    q[:, :3, 3] = c
    q[:, 3, :3] = c
    q[:, 3, 3] = 1.0
    return q


def silhouette_conics(scene: EllipsoidSet, frame: ViewFrame):
    """Batched perspective silhouettes of a scene in one view.

    Returns (conics (N, 3, 3), ok (N,) bool). `ok` is False where the
    projection is degenerate (ellipsoid enclosing the source, center at or
    behind the source plane, or a non-elliptic result); callers must treat
    those conservatively.
    """
    n = len(scene)
    if n == 0:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=bool)
    P = frame.projection_matrix()
    duals = _dual_quadrics(scene)
    cstar = np.einsum("ij,njk,lk->nil", P, duals, P)
    cstar = 0.5 * (cstar + cstar.transpose(0, 2, 1))

    depth = (scene.centers - frame.source) @ frame.normal
    minv = scene.covariance_inverses()
    rel = frame.source[None, :] - scene.centers
    encloses = np.einsum("ni,nij,nj->n", rel, minv, rel) <= 1.0
    ok = (depth > 0) & ~encloses & np.all(np.isfinite(cstar), axis=(1, 2))

    dets = np.linalg.det(cstar)
    ok &= np.abs(dets) > 1e-300
    conics = np.zeros((n, 3, 3))
    if np.any(ok):
        inv = np.linalg.inv(cstar[ok])
        inv = 0.5 * (inv + inv.transpose(0, 2, 1))
        # Normalize sign so the 2x2 block is positive definite for real ellipses.
        tr = inv[:, 0, 0] + inv[:, 1, 1]
        inv *= np.where(tr < 0, -1.0, 1.0)[:, None, None]
        scale = np.max(np.abs(inv), axis=(1, 2))
        inv /= np.where(scale > 0, scale, 1.0)[:, None, None]
        conics[ok] = inv
    return conics, ok


def project_silhouette(ellipsoid: Ellipsoid, geometry, view: int) -> Conic2D:
    """Detector-plane conic bounding the ellipsoid's perspective silhouette.

    `geometry` is anything exposing `frame(view) -> ViewFrame` (a
    ConeBeamGeometry), or a ViewFrame itself.
    """
    frame = geometry if isinstance(geometry, ViewFrame) else geometry.frame(view)
    scene = EllipsoidSet.from_ellipsoids([ellipsoid])
    conics, ok = silhouette_conics(scene, frame)
    if not ok[0]:
        raise DegenerateProjectionError(
            "silhouette projection is degenerate (ellipsoid behind or enclosing the source)")
    conic = Conic2D(conics[0])
    _conic_params(conic.matrix)  # raises if not a real bounded ellipse
    return conic


def _conic_params(matrix: np.ndarray):
    """Center, principal axes (rows), and semi-axis lengths of a point conic."""
    block = matrix[:2, :2]
    rhs = -matrix[:2, 2]
    det = block[0, 0] * block[1, 1] - block[0, 1] * block[1, 0]
    if not np.isfinite(det) or abs(det) < 1e-300:
        raise DegenerateProjectionError("conic has a singular quadratic part")
    center = np.linalg.solve(block, rhs)
    k = center @ block @ center - matrix[2, 2]
    evals, evecs = np.linalg.eigh(block)
    if np.any(evals <= 0) or k <= 0:
        raise DegenerateProjectionError("conic is not a real bounded ellipse")
    extents = np.sqrt(k / evals)  # descending since evals ascend
    return center, evecs.T, extents


def conic_obb_batch(conics: np.ndarray, ok: np.ndarray):
    """Vectorized `_conic_params` over (N, 3, 3) conics; invalid entries stay masked."""
    n = conics.shape[0]
    centers = np.zeros((n, 2))
    axes = np.zeros((n, 2, 2))
    extents = np.zeros((n, 2))
    good = ok.copy()
    if not np.any(good):
        return centers, axes, extents, good
    block = conics[good][:, :2, :2]
    rhs = -conics[good][:, :2, 2]
    det = block[:, 0, 0] * block[:, 1, 1] - block[:, 0, 1] * block[:, 1, 0]
    solvable = np.abs(det) > 1e-300
    ctr = np.zeros_like(rhs)
    d = np.where(solvable, det, 1.0)
    ctr[:, 0] = (block[:, 1, 1] * rhs[:, 0] - block[:, 0, 1] * rhs[:, 1]) / d
    ctr[:, 1] = (block[:, 0, 0] * rhs[:, 1] - block[:, 1, 0] * rhs[:, 0]) / d
    k = np.einsum("ni,nij,nj->n", ctr, block, ctr) - conics[good][:, 2, 2]
    evals, evecs = np.linalg.eigh(block)
    valid = solvable & np.all(evals > 0, axis=1) & (k > 0)
    ext = np.zeros_like(ctr)
    ext[valid] = np.sqrt(k[valid, None] / evals[valid])
    centers[good] = ctr
    axes[good] = evecs.transpose(0, 2, 1)
    extents[good] = ext
    idx = np.flatnonzero(good)
    good[idx[~valid]] = False
    return centers, axes, extents, good


def obb_of_conic(conic: Conic2D) -> OrientedBox2D:
    """Oriented bounding box aligned with the conic's principal axes."""
    if conic.degenerate:
        raise DegenerateProjectionError("conic flagged degenerate")
    center, axes, extents = _conic_params(conic.matrix)
    return OrientedBox2D(center, axes, extents)


# ---------------------------------------------------------------------------
# Detector tile grids and overlap queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileGrid:
    """Uniform tiling of the detector rectangle in detector (u, v) units."""

    u0: float
    v0: float
    tile_w: float
    tile_h: float
    n_u: int
    n_v: int

    def all_tiles(self) -> set:
        return {(i, j) for j in range(self.n_v) for i in range(self.n_u)}

    def tile_bounds(self, i: int, j: int):
        lo = np.array([self.u0 + i * self.tile_w, self.v0 + j * self.tile_h])
        return lo, lo + np.array([self.tile_w, self.tile_h])


def _clip_range(lo, hi, origin, size, count):
    i0 = int(np.floor((lo - origin) / size))
    i1 = int(np.floor((hi - origin) / size))
    return max(i0, 0), min(i1, count - 1)


def aabb_tiles(box: OrientedBox2D, grid: TileGrid) -> set:
    """Baseline culling: tiles touched by the square circumscribing the ellipse."""
    r = float(np.max(box.half_extents)) + CULL_MARGIN
    iu0, iu1 = _clip_range(box.center[0] - r, box.center[0] + r, grid.u0, grid.tile_w, grid.n_u)
    iv0, iv1 = _clip_range(box.center[1] - r, box.center[1] + r, grid.v0, grid.tile_h, grid.n_v)
    return {(i, j) for j in range(iv0, iv1 + 1) for i in range(iu0, iu1 + 1)}


def _obb_overlaps_rect(box: OrientedBox2D, lo: np.ndarray, hi: np.ndarray) -> bool:
    """Separating-axis test between the box and an axis-aligned rectangle."""
    rc = 0.5 * (lo + hi)
    rh = 0.5 * (hi - lo)
    delta = box.center - rc
    ext = box.half_extents + CULL_MARGIN
    # Rectangle's coordinate axes.
    for k in range(2):
        radius = ext[0] * abs(box.axes[0, k]) + ext[1] * abs(box.axes[1, k])
        if abs(delta[k]) > radius + rh[k]:
            return False
    # Box's own axes.
    for k in range(2):
        radius = rh[0] * abs(box.axes[k, 0]) + rh[1] * abs(box.axes[k, 1])
        if abs(delta @ box.axes[k]) > radius + ext[k]:
            return False
    return True


def tiles_overlapping(box: OrientedBox2D, grid: TileGrid) -> set:
    """Tiles kept by OBB filtering: a subset of `aabb_tiles` with no misses
    of any tile that intersects the underlying ellipse."""
    return {t for t in aabb_tiles(box, grid)
            if _obb_overlaps_rect(box, *grid.tile_bounds(*t))}
