"""Command-line pipeline: phantom -> project -> init -> train -> render/eval/recon-ct.

Exit codes: 0 success, 2 configuration/usage errors (bad flags, unknown keys,
missing files), 1 runtime failures. Every command writes the fully resolved
configuration (`run_config.json`) next to its outputs.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import formats
from .config import (RunConfig, load_config, rng_for, substream_seed,
                     write_config_echo)
from .exceptions import ConfigError, EllipctError
from .geometry import EllipsoidSet, ViewFrame
from .metrics import stack_report
from .optim import TrainConfig, train
from .phantoms import PRESETS, PhantomSpec, make_phantom, voxelize
from .projector import ConeBeamGeometry, render_stack
from .recon import LinearProjector, VoxelVolume, hybrid_init, recon_ct
from .seeding import SeedConfig, seed_from_volume


def _geometry_options(f):
    options = [
        click.option("--sod", type=float, default=None, help="Source-to-origin distance."),
        click.option("--sdd", type=float, default=None, help="Source-to-detector distance."),
        click.option("--det-width", type=float, default=None, help="Detector width (world units)."),
        click.option("--det-height", type=float, default=None, help="Detector height (world units)."),
        click.option("--nu", type=int, default=None, help="Detector columns."),
        click.option("--nv", type=int, default=None, help="Detector rows."),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _geometry_overrides(sod, sdd, det_width, det_height, nu, nv) -> dict:
    pairs = {"sod": sod, "sdd": sdd, "det_width": det_width,
             "det_height": det_height, "n_u": nu, "n_v": nv}
    return {k: v for k, v in pairs.items() if v is not None}


def _build_geometry(cfg: RunConfig, angles) -> ConeBeamGeometry:
    g = cfg.geometry
    return ConeBeamGeometry(sod=g.sod, sdd=g.sdd, det_width=g.det_width,
                            det_height=g.det_height, n_u=g.n_u, n_v=g.n_v,
                            angles=np.asarray(angles, dtype=np.float64), i0=g.i0)


def _parse_range(text: str):
    try:
        lo, hi = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--range must look like '0:180', got {text!r}") from exc
    return np.deg2rad(lo), np.deg2rad(hi)


def _uniform_angles(n: int, lo: float, hi: float) -> np.ndarray:
    if n < 1:
        raise ConfigError("--views must be >= 1")
    return lo + (hi - lo) * np.arange(n) / n


def _apply_threads(cfg: RunConfig) -> None:
    if cfg.run.threads > 0:
        import numba

        numba.set_num_threads(max(1, min(cfg.run.threads, numba.config.NUMBA_NUM_THREADS)))


@click.group()
def cli():
    """Ellipsoid attenuation fields: sparse-view X-ray synthesis and CT."""


@cli.command()
@click.option("--preset", type=click.Choice(PRESETS), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=16, show_default=True,
              help="Ellipsoid count for the random-k preset.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--voxelize", "voxel_dims", type=int, default=0,
              help="Also write a ground-truth voxelization of this size.")
@click.option("--config", "config_path", type=click.Path(), default=None)
def phantom(preset, seed, k, out, voxel_dims, config_path):
    """Write a named phantom scene (and optionally its voxelization)."""
    cfg = load_config(config_path)
    spec = make_phantom(preset, seed=seed, k=k)
    formats.write_scene(out, spec.scene)
    if voxel_dims:
        formats.write_volume(Path(out) / "gt_volume",
                             voxelize(spec, voxel_dims, cfg.resolved_half_extent()))
    write_config_echo(out, cfg, {"command": "phantom", "preset": preset,
                                 "seed": seed, "k": k})
    click.echo(f"phantom '{preset}' ({len(spec.scene)} ellipsoids) -> {out}")


@cli.command()
@click.option("--scene", "scene_dir", type=click.Path(), required=True)
@click.option("--views", type=int, default=10, show_default=True)
@click.option("--range", "angle_range", default="0:180", show_default=True,
              help="Angular range in degrees, 'lo:hi', half-open.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--png", is_flag=True, help="Also export 16-bit PNG previews.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@_geometry_options
def project(scene_dir, views, angle_range, out, png, config_path, **geo):
    """Render a projection stack of a scene at uniformly spaced angles."""
    cfg = load_config(config_path, {"geometry": _geometry_overrides(**geo)})
    _apply_threads(cfg)
    scene = formats.read_scene(scene_dir)
    lo, hi = _parse_range(angle_range)
    geometry = _build_geometry(cfg, _uniform_angles(views, lo, hi))
    images = render_stack(scene, geometry, culling=cfg.train.culling,
                          tile_px=cfg.train.tile_px)
    formats.write_stack(out, geometry, images)
    if png:
        rng = float(np.max(images)) if np.max(images) > 0 else 1.0
        for i, img in enumerate(images):
            formats.write_png16(Path(out) / f"view_{i:04d}.png", img, rng)
    write_config_echo(out, cfg, {"command": "project", "views": views,
                                 "range": angle_range, "scene": str(scene_dir)})
    click.echo(f"projected {views} views -> {out}")


@cli.command()
@click.option("--stack", "stack_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--dims", type=int, default=None, help="Init volume resolution.")
@click.option("--count", type=int, default=None, help="Seed ellipsoid count.")
@click.option("--seed", type=int, default=None, help="Seeding RNG seed.")
@click.option("--config", "config_path", type=click.Path(), default=None)
def init(stack_dir, out, dims, count, seed, config_path):
    """Hybrid classical initialization: CGLS -> SART -> TV, then ellipsoid seeding."""
    cfg = load_config(config_path)
    _apply_threads(cfg)
    geometry, images, frames = formats.read_stack(stack_dir)
    if frames is not None:
        raise ConfigError("init requires an axis-aligned angle stack, not explicit frames")
    dims = dims if dims is not None else cfg.recon.dims
    count = count if count is not None else cfg.seeding.count
    seed = seed if seed is not None else substream_seed(cfg.run.seed, "seeding")
    volume = VoxelVolume.centered(dims, cfg.resolved_half_extent())
    projector = LinearProjector.for_volume(geometry, volume)
    init_vol = hybrid_init(projector, images,
                           schedule=(cfg.recon.cgls_iters, cfg.recon.sart_sweeps,
                                     cfg.recon.tv_steps),
                           relaxation=cfg.recon.sart_relax,
                           tv_step=cfg.recon.tv_step or None,
                           interleave=cfg.recon.interleave)
    threshold = cfg.seeding.threshold_frac * float(np.max(init_vol.values))
    seed_cfg = SeedConfig(threshold=threshold, count=count, seed=seed,
                          sigma_mode=cfg.seeding.sigma_mode,
                          sigma_const=cfg.seeding.sigma_const)
    scene = seed_from_volume(init_vol, seed_cfg)
    formats.write_scene(out, scene)
    formats.write_volume(Path(out) / "init_volume", init_vol)
    write_config_echo(out, cfg, {"command": "init", "stack": str(stack_dir),
                                 "dims": dims, "count": count, "seed": seed})
    click.echo(f"init volume {dims}^3, {len(scene)} seed ellipsoids -> {out}")


@cli.command(name="train")
@click.option("--stack", "stack_dir", type=click.Path(), required=True)
@click.option("--init", "init_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--iterations", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def train_cmd(stack_dir, init_dir, out, iterations, seed, config_path):
    """Optimize the ellipsoid scene against a training stack."""
    overrides: dict = {"train": {}}
    if iterations is not None:
        overrides["train"]["iterations"] = iterations
    if seed is not None:
        overrides["train"]["seed"] = seed
    cfg = load_config(config_path, overrides)
    _apply_threads(cfg)
    geometry, images, frames = formats.read_stack(stack_dir)
    if frames is not None:
        raise ConfigError("train requires an axis-aligned angle stack, not explicit frames")
    scene = formats.read_scene(init_dir)
    out_path = Path(out)
    trained, loss_log = train(images, geometry, scene, cfg.train,
                              checkpoint_dir=out_path if cfg.train.checkpoint_interval else None)
    formats.write_scene(out_path, trained)
    formats.write_loss_log(out_path / "loss_log.csv", loss_log)
    write_config_echo(out_path, cfg, {"command": "train", "stack": str(stack_dir),
                                      "init": str(init_dir)})
    final = loss_log[-1][2] if loss_log else float("nan")
    click.echo(f"trained {cfg.train.iterations} iterations, "
               f"{len(trained)} ellipsoids, final loss {final:.5g} -> {out}")


def _orbit_frames(scene: EllipsoidSet, cfg: RunConfig, n_views: int):
    """360-degree orbit about the principal axis of the trained distribution."""
    centers = scene.centers
    mean = centers.mean(axis=0)
    cov = np.cov(centers.T) if len(scene) > 1 else np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    d0 = np.cross(axis, ref)
    d0 /= np.linalg.norm(d0)
    d1 = np.cross(axis, d0)
    g = cfg.geometry
    frames = []
    for k in range(n_views):
        theta = 2.0 * np.pi * k / n_views
        outward = np.cos(theta) * d0 + np.sin(theta) * d1
        source = mean + g.sod * outward
        n = -outward
        e_u = np.cross(axis, n)
        e_u /= np.linalg.norm(e_u)
        e_v = np.cross(n, e_u)
        frames.append(ViewFrame(source=source, det_center=mean + (g.sdd - g.sod) * n,
                                e_u=e_u, e_v=e_v, normal=n))
    return frames


@cli.command()
@click.option("--scene", "scene_dir", type=click.Path(), required=True)
@click.option("--angles", default=None, help="Comma-separated view angles in degrees.")
@click.option("--orbit", type=int, default=None,
              help="Render an n-view 360-degree orbit about the scene's principal axis.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--png", is_flag=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@_geometry_options
def render(scene_dir, angles, orbit, out, png, config_path, **geo):
    """Render novel views at explicit angles or on an out-of-distribution orbit."""
    if (angles is None) == (orbit is None):
        raise ConfigError("pass exactly one of --angles or --orbit")
    cfg = load_config(config_path, {"geometry": _geometry_overrides(**geo)})
    _apply_threads(cfg)
    scene = formats.read_scene(scene_dir)
    if angles is not None:
        try:
            values = np.deg2rad([float(a) for a in angles.split(",") if a.strip()])
        except ValueError as exc:
            raise ConfigError(f"--angles must be comma-separated numbers, got {angles!r}") from exc
        if values.size == 0:
            raise ConfigError("--angles must name at least one angle")
        geometry = _build_geometry(cfg, values)
        images = render_stack(scene, geometry, culling=cfg.train.culling,
                              tile_px=cfg.train.tile_px)
        formats.write_stack(out, geometry, images)
    else:
        geometry = _build_geometry(cfg, np.zeros(orbit))
        frames = _orbit_frames(scene, cfg, orbit)
        images = render_stack(scene, geometry, frames=frames,
                              culling=cfg.train.culling, tile_px=cfg.train.tile_px)
        formats.write_stack(out, geometry, images, frames=frames)
    if png:
        rng = float(np.max(images)) if np.max(images) > 0 else 1.0
        for i, img in enumerate(images):
            formats.write_png16(Path(out) / f"view_{i:04d}.png", img, rng)
    write_config_echo(out, cfg, {"command": "render", "scene": str(scene_dir),
                                 "angles": angles, "orbit": orbit})
    click.echo(f"rendered {images.shape[0]} views -> {out}")


@cli.command(name="recon-ct")
@click.option("--scene", "scene_dir", type=click.Path(), required=True)
@click.option("--views", type=int, default=100, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--dims", type=int, default=None)
@click.option("--method", type=click.Choice(["sart", "cgls+tv"]), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@_geometry_options
def recon_ct_cmd(scene_dir, views, out, dims, method, config_path, **geo):
    """Render a dense stack from the scene and reconstruct a CT volume from it."""
    cfg = load_config(config_path, {"geometry": _geometry_overrides(**geo)})
    _apply_threads(cfg)
    scene = formats.read_scene(scene_dir)
    geometry = _build_geometry(cfg, _uniform_angles(views, 0.0, np.pi))
    images = render_stack(scene, geometry, culling=cfg.train.culling,
                          tile_px=cfg.train.tile_px)
    dims = dims if dims is not None else cfg.recon.dims
    volume = VoxelVolume.centered(dims, cfg.resolved_half_extent())
    projector = LinearProjector.for_volume(geometry, volume)
    result = recon_ct(projector, images, method=method or cfg.recon.ct_method,
                      sweeps=cfg.recon.ct_sweeps, relaxation=cfg.recon.sart_relax,
                      cgls_iters=cfg.recon.cgls_iters, tv_steps=cfg.recon.tv_steps,
                      tv_step=cfg.recon.tv_step or None)
    formats.write_volume(out, result)
    write_config_echo(out, cfg, {"command": "recon-ct", "scene": str(scene_dir),
                                 "views": views, "dims": dims})
    click.echo(f"CT volume {dims}^3 from {views} rendered views -> {out}")


@cli.command(name="eval")
@click.option("--pred", "pred_dir", type=click.Path(), required=True)
@click.option("--ref", "ref_dir", type=click.Path(), required=True)
@click.option("--report", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
def eval_cmd(pred_dir, ref_dir, report, config_path):
    """Compare two projection stacks and write a PSNR/SSIM report CSV."""
    cfg = load_config(config_path)
    _, pred, _ = formats.read_stack(pred_dir)
    _, ref, _ = formats.read_stack(ref_dir)
    if pred.shape != ref.shape:
        raise ConfigError(f"stack shapes differ: {pred.shape} vs {ref.shape}")
    data_range = 1.0 if cfg.metrics.force_unit_range else None
    result = stack_report(pred, ref, data_range)
    report_path = Path(report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(result.to_csv())
    write_config_echo(report_path.parent, cfg, {"command": "eval", "pred": str(pred_dir),
                                                "ref": str(ref_dir)})
    click.echo(result.to_text())


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ellipct", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 2 if isinstance(exc, click.UsageError) else 1
    except click.Abort:
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except EllipctError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
