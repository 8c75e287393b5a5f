import json

import numpy as np
import pytest

from ellipct import ConfigError, make_phantom
from ellipct.formats import (read_checkpoint, read_scene, read_stack,
                             read_volume, write_checkpoint, write_loss_log,
                             write_png16, write_scene, write_stack,
                             write_volume)
from ellipct.optim import TrainConfig, TrainState
from ellipct.recon import VoxelVolume

from conftest import desk_geometry, random_scene


class TestSceneRoundTrip:
    def test_roundtrip(self, rng, tmp_path):
        scene = random_scene(rng, 17)
        write_scene(tmp_path / "scene", scene)
        back = read_scene(tmp_path / "scene")
        assert len(back) == 17
        # float32 storage quantizes.
        np.testing.assert_allclose(back.centers, scene.centers, atol=1e-6)
        np.testing.assert_allclose(back.sigmas, scene.sigmas, atol=1e-6)

    def test_missing_dir_named(self, tmp_path):
        with pytest.raises(ConfigError, match="nowhere"):
            read_scene(tmp_path / "nowhere")

    def test_wrong_kind(self, tmp_path):
        vol = VoxelVolume.centered(8, 1.0)
        write_volume(tmp_path / "vol", vol)
        with pytest.raises(ConfigError, match="kind"):
            read_scene(tmp_path / "vol")

    def test_truncated_payload(self, tmp_path, rng):
        scene = random_scene(rng, 5)
        write_scene(tmp_path / "scene", scene)
        raw = tmp_path / "scene" / "ellipsoids.raw"
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(ConfigError, match="float32"):
            read_scene(tmp_path / "scene")


class TestStackRoundTrip:
    def test_roundtrip(self, rng, tmp_path):
        geo = desk_geometry(n_px=16, n_views=3)
        images = rng.uniform(0, 2, (3, 16, 16))
        write_stack(tmp_path / "stack", geo, images)
        geo2, images2, frames = read_stack(tmp_path / "stack")
        assert frames is None
        assert geo2.n_views == 3 and geo2.n_u == 16
        np.testing.assert_allclose(images2, images, atol=1e-5)
        np.testing.assert_allclose(geo2.angles, geo.angles)

    def test_manifest_fields(self, rng, tmp_path):
        geo = desk_geometry(n_px=8, n_views=2)
        write_stack(tmp_path / "s", geo, np.zeros((2, 8, 8)))
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["endianness"] == "little"
        assert manifest["dtype"] == "float32"
        assert manifest["raster"] == [8, 8]
        assert len(manifest["views"]) == 2

    def test_frames_roundtrip(self, rng, tmp_path):
        geo = desk_geometry(n_px=8, n_views=2)
        frames = [geo.frame(0), geo.frame(1)]
        write_stack(tmp_path / "s", geo, np.zeros((2, 8, 8)), frames=frames)
        _, _, back = read_stack(tmp_path / "s")
        assert len(back) == 2
        np.testing.assert_allclose(back[1].source, frames[1].source)


class TestVolumeRoundTrip:
    def test_roundtrip(self, rng, tmp_path):
        vol = VoxelVolume.centered(12, 1.5, rng.uniform(0, 1, (12, 12, 12)).astype(np.float32))
        write_volume(tmp_path / "vol", vol)
        back = read_volume(tmp_path / "vol")
        np.testing.assert_array_equal(back.values, vol.values)
        np.testing.assert_allclose(back.spacing, vol.spacing)
        np.testing.assert_allclose(back.origin, vol.origin)


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        scene = random_scene(rng, 9)
        state = TrainState.from_scene(scene, seed=4)
        state.moments["sigma"][0][:] = rng.uniform(size=9)
        cfg = TrainConfig(iterations=100, densify_start=10, densify_end=50)
        path = write_checkpoint(tmp_path, state, cfg, 42)
        back_scene, moments, ages, meta = read_checkpoint(path)
        assert len(back_scene) == 9
        np.testing.assert_array_equal(moments["sigma"][0], state.moments["sigma"][0])
        assert meta["iteration"] == 42
        assert meta["train"]["iterations"] == 100


def test_loss_log(tmp_path):
    write_loss_log(tmp_path / "log.csv", [(1, 0, 0.5, 10), (2, 1, 0.25, 11)])
    text = (tmp_path / "log.csv").read_text()
    assert text.startswith("iteration,view,loss,count\n")
    assert "2,1,0.25,11" in text


def test_png16(tmp_path, rng):
    from PIL import Image

    img = rng.uniform(0, 3.0, (16, 16))
    rng_used = write_png16(tmp_path / "view.png", img)
    assert rng_used == pytest.approx(img.max())
    loaded = np.asarray(Image.open(tmp_path / "view.png"))
    assert loaded.dtype == np.uint16 and loaded.max() == 65535
    sidecar = json.loads((tmp_path / "view.png.json").read_text())
    # Documented linear mapping inverts to the original within quantization.
    recovered = loaded / 65535.0 * sidecar["data_range"]
    np.testing.assert_allclose(recovered, img, atol=sidecar["data_range"] / 65535.0)
