"""Gradient-based fitting of ellipsoid scenes to projection stacks.

The backward pass is fully analytic: d(intensity)/d(sigma_i) is the corrected
segment length, and geometry gradients flow through the chord quadratic
coefficients and the piecewise-linear overlap correction (subgradient 0 on
the clamped side, 1 on the active side). Adaptive densification follows the
point-splatting lineage: clone small high-gradient kernels, split large ones
(scale divided by 1.6), prune negligible densities, and additionally split
along material boundaries found by KNN density and attenuation contrast.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .exceptions import InvalidParameterError, TrainingDivergedError
from .geometry import EllipsoidSet
from .metrics import SSIM_WINDOW, ssim_with_grad
from .projector import ConeBeamGeometry, render_view
from .rotations import (normalization_jacobian, quat_matrix_jacobian,
                        quat_normalize, quat_to_matrix)

log = logging.getLogger(__name__)

PARAM_GROUPS = ("center", "log_scale", "rotation", "sigma")


@dataclass
class TrainConfig:
    """Hyper-parameters; defaults follow the full-scale schedule."""

    iterations: int = 20000
    lambda_dssim: float = 0.25
    lr_position: float = 2e-4
    lr_sigma: float = 1e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    prune_sigma: float = 1e-5
    densify_interval: int = 100
    densify_start: int = 1000
    densify_end: int = 10000
    material_start: int = 15000
    material_interval: int = 100
    max_ellipsoids: int = 500000
    split_scale_divisor: float = 1.6
    knn_k: int = 8
    material_sample_frac: float = 0.1
    grad_threshold: float = 0.04
    densify_scale_frac: float = 0.02
    seed: int = 0
    checkpoint_interval: int = 0
    culling: str = "obb"
    tile_px: int = 8
    ablate_correction: bool = False
    ablate_unit_length: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    divergence_factor: float = 10.0
    divergence_window: int = 500

    def __post_init__(self):
        for name in ("lr_position", "lr_sigma", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be > 0")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise InvalidParameterError("lambda_dssim must lie in [0, 1]")
        if not self.densify_start < self.densify_end:
            raise InvalidParameterError("densify_start must be < densify_end")
        if self.iterations > 0 and self.densify_end > self.iterations:
            raise InvalidParameterError("densify_end must be <= total iterations")
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        if self.split_scale_divisor <= 1.0:
            raise InvalidParameterError("split_scale_divisor must be > 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GradientRecord:
    """Per-ellipsoid parameter gradients plus densification statistics."""

    g_center: np.ndarray
    g_log_scale: np.ndarray
    g_rotation: np.ndarray
    g_sigma: np.ndarray
    screen_grad: np.ndarray  # |projected center gradient| in pixel units
    visible: np.ndarray  # bool, had at least one retained hit
    n_nonfinite: int = 0


@dataclass
class TrainState:
    """Scene parameters, optimizer moments, and densification bookkeeping."""

    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sigmas: np.ndarray
    moments: dict
    ages: np.ndarray  # per-ellipsoid Adam step counts
    grad_accum: np.ndarray
    denom: np.ndarray
    rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def from_scene(cls, scene: EllipsoidSet, seed: int) -> "TrainState":
        n = len(scene)
        moments = {}
        for group, width in (("center", 3), ("log_scale", 3), ("rotation", 4), ("sigma", 0)):
            shape = (n, width) if width else (n,)
            moments[group] = (np.zeros(shape), np.zeros(shape))
        return cls(centers=scene.centers.copy(),
                   log_scales=np.log(scene.scales),
                   rotations=quat_normalize(scene.rotations).reshape(-1, 4),
                   sigmas=scene.sigmas.copy(),
                   moments=moments,
                   ages=np.zeros(n, dtype=np.int64),
                   grad_accum=np.zeros(n),
                   denom=np.zeros(n),
                   rng=np.random.default_rng(seed))

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def scene(self) -> EllipsoidSet:
        return EllipsoidSet(self.centers, np.exp(self.log_scales),
                            self.rotations, self.sigmas)

    def _select(self, idx) -> None:
        self.centers = self.centers[idx]
        self.log_scales = self.log_scales[idx]
        self.rotations = self.rotations[idx]
        self.sigmas = self.sigmas[idx]
        self.ages = self.ages[idx]
        self.grad_accum = self.grad_accum[idx]
        self.denom = self.denom[idx]
        self.moments = {g: (m[idx], v[idx]) for g, (m, v) in self.moments.items()}

    def _append(self, centers, log_scales, rotations, sigmas) -> None:
        n_new = centers.shape[0]
        if n_new == 0:
            return
        self.centers = np.concatenate([self.centers, centers])
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.sigmas = np.concatenate([self.sigmas, sigmas])
        self.ages = np.concatenate([self.ages, np.zeros(n_new, dtype=np.int64)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n_new)])
        self.denom = np.concatenate([self.denom, np.zeros(n_new)])
        for group, (m, v) in self.moments.items():
            pad = (n_new,) + m.shape[1:]
            self.moments[group] = (np.concatenate([m, np.zeros(pad)]),
                                   np.concatenate([v, np.zeros(pad)]))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss(pred: np.ndarray, target: np.ndarray, lambda_dssim: float = 0.25,
         data_range=None) -> float:
    """(1 - lambda) * mean |pred - target| + lambda * (1 - SSIM) / 2."""
    value, _ = _loss_impl(pred, target, lambda_dssim, data_range, need_grad=False)
    return value


def loss_and_grad(pred, target, lambda_dssim=0.25, data_range=None):
    return _loss_impl(pred, target, lambda_dssim, data_range, need_grad=True)


def _loss_impl(pred, target, lambda_dssim, data_range, need_grad):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidParameterError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    value = (1.0 - lambda_dssim) * float(np.mean(np.abs(diff)))
    grad = None
    if need_grad:
        grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    if lambda_dssim > 0.0:
        s_val, s_grad = ssim_with_grad(pred, target, data_range)
        value += lambda_dssim * (1.0 - s_val) / 2.0
        if need_grad:
            grad = grad - lambda_dssim * 0.5 * s_grad
    return value, grad


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backprop_image_grad(scene: EllipsoidSet, graph, grad_image: np.ndarray):
    """Chain a per-pixel image gradient back to scene parameter gradients.

    Returns (g_sigma, g_center, g_log_scale, g_rotation). The inverse
    covariance chain runs per ellipsoid: with M = R diag(s^-2) R^T and the
    accumulated symmetric gradient S = G + G^T of M,
      d/d m_k   = r_k^T S r_k / 2           (columns r_k of R)
      d/d log s = -2 m * (d/d m)
      d/d R     = S R diag(m), pulled back through dR/dq and q-normalization.
    """
    n = len(scene)
    g_sigma, g_center, g_msym = _kernels.chord_backward(
        graph.origin, graph.dirs, scene.centers, graph.minvs, scene.sigmas,
        graph.n_slots, graph.slot_idx, graph.slot_case, graph.slot_pred,
        graph.slot_lt, np.ascontiguousarray(grad_image, dtype=np.float64).reshape(-1),
        graph.mode)
    S = np.empty((n, 3, 3))
    S[:, 0, 0] = g_msym[:, 0]
    S[:, 1, 1] = g_msym[:, 1]
    S[:, 2, 2] = g_msym[:, 2]
    S[:, 0, 1] = S[:, 1, 0] = g_msym[:, 3]
    S[:, 0, 2] = S[:, 2, 0] = g_msym[:, 4]
    S[:, 1, 2] = S[:, 2, 1] = g_msym[:, 5]

    qhat = quat_normalize(scene.rotations)
    R = quat_to_matrix(qhat)
    m_eig = scene.scales ** -2.0
    # Columns of R are the principal directions.
    g_m = 0.5 * np.einsum("nik,nij,njk->nk", R, S, R)
    g_log_scale = -2.0 * m_eig * g_m
    g_R = np.einsum("nij,njk,nk->nik", S, R, m_eig)
    dR_dq = quat_matrix_jacobian(qhat)  # (n, 4, 3, 3)
    g_qhat = np.einsum("nij,nqij->nq", g_R, dR_dq)
    g_rotation = np.einsum("npq,np->nq", normalization_jacobian(scene.rotations), g_qhat)
    return g_sigma, g_center, g_log_scale, g_rotation


def backward(scene: EllipsoidSet, geometry: ConeBeamGeometry, view, target,
             config: TrainConfig, data_range=None):
    """Render one view, evaluate the loss, and return analytic gradients.

    Gradients match central finite differences of the loss for smooth
    configurations; rows that come back non-finite are zeroed and counted.
    """
    target = np.asarray(target, dtype=np.float64)
    image, graph = render_view(scene, geometry, view, culling=config.culling,
                               tile_px=config.tile_px,
                               ablate_correction=config.ablate_correction,
                               ablate_unit_length=config.ablate_unit_length,
                               with_graph=True)
    value, grad_image = loss_and_grad(image, target, config.lambda_dssim, data_range)
    n = len(scene)
    if n == 0 or graph is None:
        zeros = GradientRecord(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                               np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
        return zeros, value

    g_sigma, g_center, g_log_scale, g_rotation = backprop_image_grad(
        scene, graph, grad_image)

    frame = view if hasattr(view, "source") else geometry.frame(int(view))
    rel = scene.centers - frame.source
    depth = rel @ frame.normal
    dist = np.linalg.norm(rel, axis=1)
    d_hat = rel / np.where(dist > 0, dist, 1.0)[:, None]
    g_perp = g_center - (np.sum(g_center * d_hat, axis=1, keepdims=True)) * d_hat
    magnification = frame.sdd / np.where(depth > 1e-9, depth, 1e-9)
    screen = np.linalg.norm(g_perp, axis=1) * magnification / geometry.pitch_u

    bad = ~(np.all(np.isfinite(g_center), axis=1)
            & np.all(np.isfinite(g_log_scale), axis=1)
            & np.all(np.isfinite(g_rotation), axis=1)
            & np.isfinite(g_sigma) & np.isfinite(screen))
    n_bad = int(np.sum(bad))
    if n_bad:
        log.warning("backward: %d ellipsoids had non-finite gradients, excluded", n_bad)
        for arr in (g_center, g_log_scale, g_rotation):
            arr[bad] = 0.0
        g_sigma[bad] = 0.0
        screen[bad] = 0.0
    record = GradientRecord(g_center, g_log_scale, g_rotation, g_sigma, screen,
                            graph.hit_counts > 0, n_bad)
    return record, value


# ---------------------------------------------------------------------------
# Optimizer step
# ---------------------------------------------------------------------------


def step(state: TrainState, record: GradientRecord, config: TrainConfig) -> TrainState:
    """Adam-style update with per-group learning rates.

    Scales live in log space (positivity by construction), quaternions are
    renormalized after the update, and sigma is clamped at zero.
    """
    state.ages += 1
    rates = {"center": config.lr_position, "log_scale": config.lr_scale,
             "rotation": config.lr_rotation, "sigma": config.lr_sigma}
    grads = {"center": record.g_center, "log_scale": record.g_log_scale,
             "rotation": record.g_rotation, "sigma": record.g_sigma}
    params = {"center": state.centers, "log_scale": state.log_scales,
              "rotation": state.rotations, "sigma": state.sigmas}
    bc1 = 1.0 - config.beta1 ** state.ages
    bc2 = 1.0 - config.beta2 ** state.ages
    rot_update = None
    for group in PARAM_GROUPS:
        g = grads[group]
        m, v = state.moments[group]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        c1 = bc1 if m.ndim == 1 else bc1[:, None]
        c2 = bc2 if m.ndim == 1 else bc2[:, None]
        update = rates[group] * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        params[group] -= update
        if group == "rotation":
            rot_update = update
    # Renormalize only rows that moved: repeated renormalization of an
    # untouched quaternion would wiggle ulps and wake the optimizer.
    moved = np.any(rot_update != 0.0, axis=1)
    if np.any(moved):
        norms = np.linalg.norm(state.rotations[moved], axis=1, keepdims=True)
        state.rotations[moved] /= norms
    np.maximum(state.sigmas, 0.0, out=state.sigmas)
    return state


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------


def _sample_inside(rng: np.random.Generator, scales, rotations, n_children):
    """Uniform offsets inside each parent ellipsoid, n_children per parent."""
    n = scales.shape[0]
    direction = rng.normal(size=(n, n_children, 3))
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    radius = rng.uniform(size=(n, n_children, 1)) ** (1.0 / 3.0)
    local = direction * radius * scales[:, None, :]
    R = quat_to_matrix(rotations)
    return np.einsum("nij,nkj->nki", R, local)


def _split(state: TrainState, split_idx: np.ndarray, divisor: float,
           n_children: int = 2) -> None:
    """Replace each selected parent with children of scale/divisor inside it."""
    if split_idx.size == 0:
        return
    scales = np.exp(state.log_scales[split_idx])
    offsets = _sample_inside(state.rng, scales, state.rotations[split_idx], n_children)
    child_centers = (state.centers[split_idx][:, None, :] + offsets).reshape(-1, 3)
    child_log_scales = np.repeat(state.log_scales[split_idx] - np.log(divisor),
                                 n_children, axis=0)
    child_rot = np.repeat(state.rotations[split_idx], n_children, axis=0)
    child_sig = np.repeat(state.sigmas[split_idx], n_children)
    keep = np.ones(state.count, dtype=bool)
    keep[split_idx] = False
    state._select(np.flatnonzero(keep))
    state._append(child_centers, child_log_scales, child_rot, child_sig)


def _enforce_cap(state: TrainState, cap: int) -> None:
    if state.count <= cap:
        return
    order = np.argsort(-state.sigmas, kind="stable")[:cap]
    state._select(np.sort(order))


def scene_extent(state: TrainState) -> float:
    """Diameter of the center spread, floored by the largest kernel size."""
    if state.count == 0:
        return 1.0
    mean = state.centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(state.centers - mean, axis=1)))
    largest = float(np.max(np.exp(state.log_scales)))
    return max(2.0 * radius, 2.0 * largest, 1e-6)


def densify_geometry(state: TrainState, config: TrainConfig) -> TrainState:
    """Prune negligible densities, clone small high-gradient kernels, split large ones."""
    keep = state.sigmas >= config.prune_sigma
    state._select(np.flatnonzero(keep))
    if state.count == 0:
        return state
    avg = state.grad_accum / np.maximum(state.denom, 1.0)
    extent = scene_extent(state)
    high = avg > config.grad_threshold
    small = np.max(np.exp(state.log_scales), axis=1) <= config.densify_scale_frac * extent
    clone_idx = np.flatnonzero(high & small)
    split_idx = np.flatnonzero(high & ~small)
    if clone_idx.size:
        state._append(state.centers[clone_idx].copy(),
                      state.log_scales[clone_idx].copy(),
                      state.rotations[clone_idx].copy(),
                      state.sigmas[clone_idx].copy())
    _split(state, split_idx, config.split_scale_divisor)
    _enforce_cap(state, config.max_ellipsoids)
    state.grad_accum = np.zeros(state.count)
    state.denom = np.zeros(state.count)
    return state


def densify_material(state: TrainState, config: TrainConfig) -> TrainState:
    """Split a seeded subset where local density and attenuation contrast are both high.

    The attenuation gradient of a sampled ellipsoid is the maximum |sigma_i -
    sigma_j| over its k nearest neighbors divided by their mean distance;
    selection takes the top density quartile (small mean distance) AND the
    top gradient quartile of the sample.
    """
    if state.count < config.knn_k + 1:
        return state
    n_sub = max(1, math.ceil(config.material_sample_frac * state.count))
    sub = np.sort(state.rng.choice(state.count, size=n_sub, replace=False))
    tree = cKDTree(state.centers)
    dist, idx = tree.query(state.centers[sub], k=config.knn_k + 1)
    nd, neigh = dist[:, 1:], idx[:, 1:]
    mean_d = np.maximum(nd.mean(axis=1), 1e-12)
    contrast = np.max(np.abs(state.sigmas[sub][:, None] - state.sigmas[neigh]), axis=1)
    grad = contrast / mean_d
    q_density = np.quantile(mean_d, 0.25)
    q_grad = np.quantile(grad, 0.75)
    # Homogeneous material has zero contrast everywhere: nothing to refine.
    sel = sub[(mean_d <= q_density) & (grad >= q_grad) & (contrast > 0)]
    _split(state, sel, config.split_scale_divisor)
    _enforce_cap(state, config.max_ellipsoids)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(stack_images: np.ndarray, geometry: ConeBeamGeometry,
          init_scene: EllipsoidSet, config: TrainConfig,
          checkpoint_dir=None):
    """Fit the scene to the stack; returns (scene, loss log).

    Views are visited round robin. The loss log holds one (iteration, view,
    loss, count) row per iteration. Raises TrainingDivergedError when the
    loss stays above `divergence_factor` x the initial loss for
    `divergence_window` consecutive iterations.
    """
    stack_images = np.asarray(stack_images, dtype=np.float64)
    n_views = stack_images.shape[0]
    if n_views < 1:
        raise InvalidParameterError("training requires at least one view")
    if n_views != geometry.n_views:
        raise InvalidParameterError("stack size does not match geometry angle count")
    init_scene.validate()
    state = TrainState.from_scene(init_scene, config.seed)
    data_range = float(np.max(stack_images))
    data_range = data_range if data_range > 0 else 1.0
    loss_log = []
    initial_loss = None
    over_budget = 0

    for it in range(1, config.iterations + 1):
        view = (it - 1) % n_views
        record, value = backward(state.scene(), geometry, view, stack_images[view],
                                 config, data_range)
        step(state, record, config)
        state.grad_accum += record.screen_grad
        state.denom += record.visible
        loss_log.append((it, view, value, state.count))
        if initial_loss is None:
            initial_loss = value
        if not math.isfinite(value) or (
                initial_loss > 0 and value > config.divergence_factor * initial_loss):
            over_budget += 1
            if over_budget >= config.divergence_window:
                raise TrainingDivergedError(
                    f"loss {value:.4g} stayed above {config.divergence_factor} x initial "
                    f"({initial_loss:.4g}) for {over_budget} iterations")
        else:
            over_budget = 0

        if (config.densify_start <= it <= config.densify_end
                and it % config.densify_interval == 0):
            densify_geometry(state, config)
        if it >= config.material_start and it % config.material_interval == 0:
            densify_material(state, config)
        if checkpoint_dir is not None and config.checkpoint_interval > 0 \
                and it % config.checkpoint_interval == 0:
            from . import formats
            formats.write_checkpoint(checkpoint_dir, state, config, it)

    return state.scene(), loss_log
