"""On-disk formats: JSON manifests plus raw little-endian float32 payloads.

Every artifact is a directory holding a `manifest.json` and one or more
`.raw` files (row-major, 32-bit little-endian floats). Stacks rendered on
non-standard orbits carry explicit per-view frames in the manifest instead
of an angle list.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .geometry import EllipsoidSet, ViewFrame
from .projector import ConeBeamGeometry
from .recon import VoxelVolume

_DTYPE = "<f4"

SCENE_RECORD = "center[3] scale[3] quaternion[4] sigma[1]"


def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input path: {path}")
    return path


def _load_manifest(directory, kind: str) -> dict:
    directory = Path(directory)
    manifest_path = _require(directory / "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != kind:
        raise ConfigError(f"{manifest_path} has kind {manifest.get('kind')!r}, expected {kind!r}")
    if manifest.get("endianness", "little") != "little":
        raise ConfigError(f"{manifest_path}: only little-endian payloads are supported")
    return manifest


def _write_manifest(directory: Path, manifest: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _read_raw(path: Path, count: int) -> np.ndarray:
    data = np.fromfile(_require(path), dtype=_DTYPE)
    if data.size != count:
        raise ConfigError(f"{path}: expected {count} float32 values, found {data.size}")
    return data.astype(np.float64)


# -- ellipsoid scenes --------------------------------------------------------


def write_scene(directory, scene: EllipsoidSet) -> Path:
    directory = Path(directory)
    records = np.concatenate(
        [scene.centers, scene.scales, scene.rotations, scene.sigmas[:, None]], axis=1)
    _write_manifest(directory, {
        "kind": "ellipsoid-set",
        "count": len(scene),
        "record": SCENE_RECORD,
        "dtype": "float32",
        "endianness": "little",
        "file": "ellipsoids.raw",
    })
    records.astype(_DTYPE).tofile(directory / "ellipsoids.raw")
    return directory


def read_scene(directory) -> EllipsoidSet:
    manifest = _load_manifest(directory, "ellipsoid-set")
    count = int(manifest["count"])
    data = _read_raw(Path(directory) / manifest["file"], count * 11).reshape(count, 11)
    from .rotations import quat_normalize

    scene = EllipsoidSet(data[:, 0:3], data[:, 3:6],
                         quat_normalize(data[:, 6:10]), data[:, 10])
    scene.validate()
    return scene


# -- projection stacks -------------------------------------------------------


def write_stack(directory, geometry: ConeBeamGeometry, images: np.ndarray,
                frames=None) -> Path:
    directory = Path(directory)
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    view_files = [f"view_{i:04d}.raw" for i in range(n)]
    manifest = {
        "kind": "projection-stack",
        "geometry": geometry.to_dict(),
        "raster": [geometry.n_u, geometry.n_v],
        "angles": np.asarray(geometry.angles).tolist(),
        "dtype": "float32",
        "endianness": "little",
        "space": "log",
        "views": view_files,
    }
    if frames is not None:
        manifest["frames"] = [f.to_dict() for f in frames]
    _write_manifest(directory, manifest)
    for img, name in zip(images, view_files):
        img.astype(_DTYPE).tofile(directory / name)
    return directory


def read_stack(directory):
    """Returns (geometry, images (n, H, W) float64, frames or None)."""
    manifest = _load_manifest(directory, "projection-stack")
    geometry = ConeBeamGeometry.from_dict(manifest["geometry"])
    n_u, n_v = (int(x) for x in manifest["raster"])
    images = np.stack([
        _read_raw(Path(directory) / name, n_u * n_v).reshape(n_v, n_u)
        for name in manifest["views"]
    ]) if manifest["views"] else np.zeros((0, n_v, n_u))
    frames = None
    if "frames" in manifest:
        frames = [ViewFrame.from_dict(d) for d in manifest["frames"]]
    return geometry, images, frames


# -- voxel volumes -----------------------------------------------------------


def write_volume(directory, volume: VoxelVolume) -> Path:
    directory = Path(directory)
    _write_manifest(directory, {
        "kind": "voxel-volume",
        "dims": list(volume.dims),
        "spacing": volume.spacing.tolist(),
        "origin": volume.origin.tolist(),
        "dtype": "float32",
        "endianness": "little",
        "file": "volume.raw",
    })
    np.asarray(volume.values, dtype=np.float64).astype(_DTYPE).tofile(
        directory / "volume.raw")
    return directory


def read_volume(directory) -> VoxelVolume:
    manifest = _load_manifest(directory, "voxel-volume")
    dims = tuple(int(d) for d in manifest["dims"])
    values = _read_raw(Path(directory) / manifest["file"],
                       int(np.prod(dims))).reshape(dims)
    return VoxelVolume(values, np.asarray(manifest["spacing"]),
                       np.asarray(manifest["origin"]))


# -- training checkpoints ----------------------------------------------------


def write_checkpoint(directory, state, config, iteration: int) -> Path:
    directory = Path(directory) / f"checkpoint_{iteration:06d}"
    write_scene(directory, state.scene())
    sidecar = {"ages": state.ages}
    for group, (m, v) in state.moments.items():
        sidecar[f"m_{group}"] = m
        sidecar[f"v_{group}"] = v
    np.savez(directory / "moments.npz", **sidecar)
    with open(directory / "config.json", "w") as fh:
        json.dump({"iteration": iteration, "train": config.to_dict()}, fh, indent=2)
        fh.write("\n")
    return directory


def read_checkpoint(directory):
    """Returns (scene, moments dict, ages, config dict)."""
    directory = Path(directory)
    scene = read_scene(directory)
    with np.load(_require(directory / "moments.npz")) as data:
        ages = data["ages"]
        moments = {}
        for group in ("center", "log_scale", "rotation", "sigma"):
            moments[group] = (data[f"m_{group}"], data[f"v_{group}"])
    with open(_require(directory / "config.json")) as fh:
        config = json.load(fh)
    return scene, moments, ages, config


# -- small text artifacts ----------------------------------------------------


def write_loss_log(path, loss_log) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("iteration,view,loss,count\n")
        for it, view, value, count in loss_log:
            fh.write(f"{it},{view},{value:.10g},{count}\n")


def write_png16(path, image: np.ndarray, data_range=None) -> float:
    """16-bit grayscale PNG with linear mapping value -> round(65535 * v / range).

    Returns the range used; a sibling `<name>.json` records it so the mapping
    is invertible.
    """
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    rng = float(np.max(image)) if data_range is None else float(data_range)
    rng = rng if rng > 0 else 1.0
    scaled = np.clip(image / rng, 0.0, 1.0)
    png = np.round(scaled * 65535.0).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(png, mode="I;16").save(path)
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump({"data_range": rng, "mapping": "round(65535 * value / data_range)"}, fh)
        fh.write("\n")
    return rng
