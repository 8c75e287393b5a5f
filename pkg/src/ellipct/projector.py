"""Cone-beam forward rendering of ellipsoid scenes in log-intensity space.

Per pixel: generate the ray, cull candidates by projected-silhouette tiles,
compute chords, sort by entry depth, run the first-pass overlap correction,
and accumulate sigma-weighted corrected lengths. Culling is conservative, so
obb / aabb / no culling produce bit-identical images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .exceptions import ContractViolationError, InvalidParameterError
from .geometry import (CULL_MARGIN, EllipsoidSet, Ray, TileGrid, ViewFrame,
                       conic_obb_batch, silhouette_conics)

log = logging.getLogger(__name__)

CULLING_MODES = ("obb", "aabb", "none")


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam layout: point source orbiting the z axis.

    At angle phi the view axis is n = (cos phi, sin phi, 0); the source sits
    at -sod * n and the detector center at (sdd - sod) * n. Detector u runs
    along (-sin phi, cos phi, 0), v along +z. `i0` is the linear source
    intensity used only by `render_linear`; log-space rendering never reads it.
    """

    sod: float
    sdd: float
    det_width: float
    det_height: float
    n_u: int
    n_v: int
    angles: np.ndarray
    i0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "angles",
                           np.atleast_1d(np.asarray(self.angles, dtype=np.float64)))
        if not (self.sod > 0 and self.sdd > 0):
            raise InvalidParameterError("sod and sdd must be positive")
        if self.n_u < 1 or self.n_v < 1:
            raise InvalidParameterError("detector raster must be at least 1x1")
        if not (self.det_width > 0 and self.det_height > 0):
            raise InvalidParameterError("detector size must be positive")
        if not np.all(np.isfinite(self.angles)):
            raise InvalidParameterError("angles must be finite")
        if not (np.isfinite(self.i0) and self.i0 > 0):
            raise InvalidParameterError("i0 must be positive")

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def pitch_u(self) -> float:
        return self.det_width / self.n_u

    @property
    def pitch_v(self) -> float:
        return self.det_height / self.n_v

    def frame(self, view: int) -> ViewFrame:
        if not 0 <= view < self.n_views:
            raise InvalidParameterError(f"view index {view} out of range [0, {self.n_views})")
        phi = self.angles[view]
        n = np.array([np.cos(phi), np.sin(phi), 0.0])
        e_u = np.array([-np.sin(phi), np.cos(phi), 0.0])
        e_v = np.array([0.0, 0.0, 1.0])
        return ViewFrame(source=-self.sod * n, det_center=(self.sdd - self.sod) * n,
                         e_u=e_u, e_v=e_v, normal=n)

    def detector_coords(self):
        """Pixel-center detector coordinates (u (n_u,), v (n_v,))."""
        u = (np.arange(self.n_u) + 0.5 - self.n_u / 2.0) * self.pitch_u
        v = (np.arange(self.n_v) + 0.5 - self.n_v / 2.0) * self.pitch_v
        return u, v

    def tile_grid(self, tile_px: int) -> TileGrid:
        return TileGrid(u0=-self.det_width / 2.0, v0=-self.det_height / 2.0,
                        tile_w=tile_px * self.pitch_u, tile_h=tile_px * self.pitch_v,
                        n_u=-(-self.n_u // tile_px), n_v=-(-self.n_v // tile_px))

    def with_angles(self, angles) -> "ConeBeamGeometry":
        return replace(self, angles=np.asarray(angles, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"sod": self.sod, "sdd": self.sdd,
                "det_width": self.det_width, "det_height": self.det_height,
                "n_u": self.n_u, "n_v": self.n_v,
                "angles": np.asarray(self.angles).tolist(), "i0": self.i0}

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(sod=d["sod"], sdd=d["sdd"], det_width=d["det_width"],
                   det_height=d["det_height"], n_u=int(d["n_u"]), n_v=int(d["n_v"]),
                   angles=np.asarray(d["angles"], dtype=np.float64), i0=d.get("i0", 1.0))


def pixel_rays(frame: ViewFrame, geometry: ConeBeamGeometry):
    """(origin (3,), dirs (H*W, 3) unit, tmax (H*W,)) for every pixel center, row-major."""
    u, v = geometry.detector_coords()
    pix = (frame.det_center[None, None, :]
           + u[None, :, None] * frame.e_u[None, None, :]
           + v[:, None, None] * frame.e_v[None, None, :])
    delta = pix.reshape(-1, 3) - frame.source[None, :]
    dist = np.linalg.norm(delta, axis=1)
    return frame.source.copy(), delta / dist[:, None], dist


def generate_ray(geometry: ConeBeamGeometry, view: int, pixel) -> Ray:
    """Ray from the rotated source through the center of pixel (iu, iv)."""
    iu, iv = pixel
    if not (0 <= iu < geometry.n_u and 0 <= iv < geometry.n_v):
        raise InvalidParameterError(f"pixel {pixel} outside raster "
                                    f"{geometry.n_u}x{geometry.n_v}")
    frame = geometry.frame(view)
    u, v = geometry.detector_coords()
    point = frame.det_center + u[iu] * frame.e_u + v[iv] * frame.e_v
    delta = point - frame.source
    dist = float(np.linalg.norm(delta))
    return Ray(frame.source, delta / dist, 0.0, dist)


# ---------------------------------------------------------------------------
# Segment correction (first-pass precedence, Algorithm-style scan)
# ---------------------------------------------------------------------------


@dataclass
class SegmentList:
    """Depth-ordered chord records of one ray after overlap correction."""

    indices: np.ndarray  # ellipsoid ids
    depths: np.ndarray  # chord midpoints z_i
    lengths: np.ndarray  # raw l_i
    corrected: np.ndarray  # l~_i
    regions: np.ndarray  # (n, 2) valid intervals [exit - l~, exit]


def correct_segments(segments, indices=None) -> SegmentList:
    """First-pass overlap correction of chord segments along one ray.

    `segments` is a sequence of (z_i, l_i) with z_i the chord midpoint,
    sorted ascending by entry depth z_i - l_i / 2 (the order in which the
    ellipsoids are first met along the ray). The first segment is kept whole;
    each later one keeps only the part of its span past the exit of the last
    retained segment, clamped to [0, l_i]. The running reference advances
    only when a segment retains nonzero length.
    """
    seg = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    n = seg.shape[0]
    if indices is None:
        indices = np.arange(n)
    z, l = seg[:, 0], seg[:, 1]
    if np.any(l < 0):
        raise ContractViolationError("segment lengths must be >= 0")
    entry = z - 0.5 * l
    if np.any(np.diff(entry) < 0):
        raise ContractViolationError("segments must be sorted ascending by entry depth")
    corrected = np.zeros(n)
    regions = np.zeros((n, 2))
    z_run = l_run = 0.0
    for i in range(n):
        if i == 0:
            lt = l[0]
        else:
            exit_i = z[i] + 0.5 * l[i]
            exit_run = z_run + 0.5 * l_run
            if z[i] < exit_run:
                lt = max(0.0, exit_i - exit_run)
            else:
                lt = min(l[i], exit_i - exit_run)
        if i == 0 or lt != 0.0:
            z_run, l_run = z[i], l[i]
        corrected[i] = lt
        regions[i] = (z[i] + 0.5 * l[i] - lt, z[i] + 0.5 * l[i])
    return SegmentList(np.asarray(indices), z.copy(), l.copy(), corrected, regions)


def accumulate(segments: SegmentList, sigmas) -> float:
    """Log-space intensity: sum of sigma_i * corrected length, in list order."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    total = 0.0
    for idx, lt in zip(segments.indices, segments.corrected):
        total += sigmas[idx] * lt
    return total


# ---------------------------------------------------------------------------
# Candidate culling
# ---------------------------------------------------------------------------


def _candidate_csr(scene: EllipsoidSet, frame: ViewFrame, grid: TileGrid, culling: str):
    """Per-tile candidate lists as CSR (indptr, indices), ellipsoids ascending.

    Degenerate projections (behind/enclosing the source, non-elliptic conics)
    are handled conservatively by listing those ellipsoids in every tile.
    """
    n = len(scene)
    n_tiles = grid.n_u * grid.n_v
    if culling == "none":
        indptr = np.arange(2, dtype=np.int64) * n
        return indptr, np.arange(n, dtype=np.int32), np.zeros(0, dtype=np.int64)

    conics, ok = silhouette_conics(scene, frame)
    centers, axes, extents, ok = conic_obb_batch(conics, ok)
    n_degenerate = int(np.sum(~ok))

    # AABB candidate ranges from the circumscribed-circle square.
    r = np.max(extents, axis=1) + CULL_MARGIN
    iu0 = np.clip(np.floor((centers[:, 0] - r - grid.u0) / grid.tile_w), 0, grid.n_u - 1).astype(np.int64)
    iu1 = np.clip(np.floor((centers[:, 0] + r - grid.u0) / grid.tile_w), 0, grid.n_u - 1).astype(np.int64)
    iv0 = np.clip(np.floor((centers[:, 1] - r - grid.v0) / grid.tile_h), 0, grid.n_v - 1).astype(np.int64)
    iv1 = np.clip(np.floor((centers[:, 1] + r - grid.v0) / grid.tile_h), 0, grid.n_v - 1).astype(np.int64)
    # Skip ellipsoids whose square misses the detector entirely.
    off = ((centers[:, 0] + r < grid.u0) | (centers[:, 1] + r < grid.v0)
           | (centers[:, 0] - r > grid.u0 + grid.n_u * grid.tile_w)
           | (centers[:, 1] - r > grid.v0 + grid.n_v * grid.tile_h))

    sel = np.flatnonzero(ok & ~off)
    wid = iu1[sel] - iu0[sel] + 1
    cnt = wid * (iv1[sel] - iv0[sel] + 1)
    total = int(cnt.sum())
    # Ragged expansion of per-ellipsoid tile rectangles into flat pair lists.
    seg_start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    within = np.arange(total, dtype=np.int64) - seg_start
    wrep = np.repeat(wid, cnt)
    du = within % wrep
    dv = within // wrep
    ell_ids = np.repeat(sel, cnt).astype(np.int32)
    tile_ids = (np.repeat(iv0[sel], cnt) + dv) * grid.n_u + np.repeat(iu0[sel], cnt) + du

    deg = np.flatnonzero(~ok)
    if deg.size:
        ell_ids = np.concatenate([ell_ids, np.repeat(deg, n_tiles).astype(np.int32)])
        tile_ids = np.concatenate([tile_ids,
                                   np.tile(np.arange(n_tiles, dtype=np.int64), deg.size)])

    if culling == "obb" and ell_ids.size:
        keep = _sat_filter(ell_ids, tile_ids, centers, axes, extents, ok, grid)
        ell_ids, tile_ids = ell_ids[keep], tile_ids[keep]

    order = np.lexsort((ell_ids, tile_ids))
    ell_ids, tile_ids = ell_ids[order], tile_ids[order]
    counts = np.bincount(tile_ids, minlength=n_tiles)
    indptr = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    if n_degenerate:
        log.debug("culling: %d degenerate silhouettes included conservatively", n_degenerate)
    return indptr, ell_ids, np.zeros(0, dtype=np.int64)


def _sat_filter(ell_ids, tile_ids, centers, axes, extents, ok, grid: TileGrid):
    """Vectorized separating-axis test of every (ellipsoid, tile) candidate pair."""
    tu = tile_ids % grid.n_u
    tv = tile_ids // grid.n_u
    rect_c = np.stack([grid.u0 + (tu + 0.5) * grid.tile_w,
                       grid.v0 + (tv + 0.5) * grid.tile_h], axis=1)
    rect_h = np.array([grid.tile_w / 2.0, grid.tile_h / 2.0])
    delta = centers[ell_ids] - rect_c
    ax = axes[ell_ids]  # (m, 2, 2)
    ext = extents[ell_ids] + CULL_MARGIN  # (m, 2)
    keep = np.ones(len(ell_ids), dtype=bool)
    for k in range(2):  # rectangle axes
        radius = ext[:, 0] * np.abs(ax[:, 0, k]) + ext[:, 1] * np.abs(ax[:, 1, k])
        keep &= np.abs(delta[:, k]) <= radius + rect_h[k]
    for k in range(2):  # box axes
        radius = rect_h[0] * np.abs(ax[:, k, 0]) + rect_h[1] * np.abs(ax[:, k, 1])
        proj = delta[:, 0] * ax[:, k, 0] + delta[:, 1] * ax[:, k, 1]
        keep &= np.abs(proj) <= radius + ext[:, k]
    keep |= ~ok[ell_ids]  # conservative for degenerate entries
    return keep


# ---------------------------------------------------------------------------
# View rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderGraph:
    """Saved forward intermediates required by the backward pass."""

    origin: np.ndarray
    dirs: np.ndarray
    minvs: np.ndarray
    n_slots: np.ndarray
    slot_idx: np.ndarray
    slot_case: np.ndarray
    slot_pred: np.ndarray
    slot_lt: np.ndarray
    hit_counts: np.ndarray
    mode: int


def _render_mode(ablate_correction: bool, ablate_unit_length: bool) -> int:
    if ablate_unit_length:
        return _kernels.MODE_UNIT_LENGTH
    if ablate_correction:
        return _kernels.MODE_NO_CORRECTION
    return _kernels.MODE_FULL


def render_view(scene: EllipsoidSet, geometry: ConeBeamGeometry, view,
                culling: str = "obb", tile_px: int = 16,
                ablate_correction: bool = False, ablate_unit_length: bool = False,
                with_graph: bool = False):
    """Render one view to a log-space (n_v, n_u) float64 image.

    `view` is an angle index or an explicit ViewFrame. With `with_graph`
    the saved intermediates for the analytic backward pass are returned as a
    second value.
    """
    if culling not in CULLING_MODES:
        raise InvalidParameterError(f"unknown culling mode {culling!r}")
    frame = view if isinstance(view, ViewFrame) else geometry.frame(view)
    origin, dirs, _ = pixel_rays(frame, geometry)
    shape = (geometry.n_v, geometry.n_u)
    if len(scene) == 0:
        image = np.zeros(shape)
        if with_graph:
            return image, None
        return image

    scene.validate()
    grid = geometry.tile_grid(tile_px)
    indptr, indices, _ = _candidate_csr(scene, frame, grid, culling)
    if culling == "none":
        tile_of = np.zeros(dirs.shape[0], dtype=np.int64)
    else:
        u, v = geometry.detector_coords()
        tu = np.clip(((u - grid.u0) / grid.tile_w).astype(np.int64), 0, grid.n_u - 1)
        tv = np.clip(((v - grid.v0) / grid.tile_h).astype(np.int64), 0, grid.n_v - 1)
        tile_of = (tv[:, None] * grid.n_u + tu[None, :]).ravel()
    max_slots = int(np.max(indptr[1:] - indptr[:-1])) if len(indptr) > 1 else 0
    max_slots = max(max_slots, 1)
    minvs = scene.covariance_inverses()
    mode = _render_mode(ablate_correction, ablate_unit_length)
    out = _kernels.chord_render(origin, dirs, scene.centers, minvs, scene.sigmas,
                                tile_of, indptr, indices.astype(np.int32),
                                max_slots, mode)
    image, n_slots, slot_idx, slot_case, slot_pred, slot_lt, hit_counts = out
    image = image.reshape(shape)
    if not np.all(np.isfinite(image)):
        bad = int(np.sum(~np.isfinite(image)))
        log.warning("render_view: %d non-finite pixels zeroed", bad)
        image = np.where(np.isfinite(image), image, 0.0)
    if with_graph:
        graph = RenderGraph(origin, dirs, minvs, n_slots, slot_idx, slot_case,
                            slot_pred, slot_lt, hit_counts, mode)
        return image, graph
    return image


def render_stack(scene: EllipsoidSet, geometry: ConeBeamGeometry, frames=None,
                 **kwargs) -> np.ndarray:
    """Render all views (or explicit frames) into an (n, H, W) array."""
    views = frames if frames is not None else range(geometry.n_views)
    return np.stack([render_view(scene, geometry, v, **kwargs) for v in views])


def render_linear(image: np.ndarray, i0: float) -> np.ndarray:
    """Invert the log transform: I' = i0 * exp(-I)."""
    if not i0 > 0:
        raise InvalidParameterError("i0 must be positive")
    return i0 * np.exp(-np.asarray(image, dtype=np.float64))


# ---------------------------------------------------------------------------
# Brute-force oracle (used by tests)
# ---------------------------------------------------------------------------


def oracle_raymarch(scene: EllipsoidSet, ray: Ray, step: float,
                    t_max: float | None = None) -> float:
    """Riemann-sum reference for the log-space intensity of one ray.

    At each sample the containing ellipsoid with the smallest chord-entry
    depth on this ray wins (first-pass precedence). Deliberately independent
    of the closed-form render path.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    n = len(scene)
    if n == 0:
        return 0.0
    t_hi = t_max if t_max is not None else ray.t_far
    if not np.isfinite(t_hi):
        raise InvalidParameterError("ray must have a finite far bound for marching")
    count = int((t_hi - ray.t_near) / step)
    ts = ray.t_near + (np.arange(count) + 0.5) * step
    pts = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    minvs = scene.covariance_inverses()
    rel = pts[:, None, :] - scene.centers[None, :, :]  # (S, N, 3)
    q = np.einsum("snk,nkl,snl->sn", rel, minvs, rel)
    inside = q <= 1.0

    entries = np.full(n, np.inf)
    from .geometry import chord as _chord  # local import avoids cycle at module load

    for e in range(n):
        res = _chord(scene.ellipsoid(e), ray)
        if res.hit:
            entries[e] = res.depth - res.length / 2.0
    keyed = np.where(inside, entries[None, :], np.inf)
    winner = np.argmin(keyed, axis=1)
    any_inside = np.any(inside, axis=1)
    sigma_samples = np.where(any_inside, scene.sigmas[winner], 0.0)
    return float(np.sum(sigma_samples) * step)
