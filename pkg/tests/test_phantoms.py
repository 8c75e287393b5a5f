import numpy as np
import pytest

from ellipct import ConfigError, make_phantom, render_stack, voxelize
from ellipct.geometry import chord
from ellipct.projector import generate_ray
from ellipct.recon import LinearProjector

from conftest import desk_geometry


class TestPresets:
    def test_overlap_pair_chords_overlap_on_central_ray(self):
        spec = make_phantom("overlap-pair")
        geo = desk_geometry(n_px=65)
        ray = generate_ray(geo, 0, (32, 32))
        spans = []
        for i in range(2):
            res = chord(spec.scene.ellipsoid(i), ray)
            assert res.hit
            spans.append((res.depth - res.length / 2, res.depth + res.length / 2))
        assert spans[0][1] > spans[1][0] and spans[1][1] > spans[0][0]
        assert spec.scene.sigmas[0] != spec.scene.sigmas[1]

    def test_random_k_deterministic(self):
        a = make_phantom("random-k", seed=9, k=12)
        b = make_phantom("random-k", seed=9, k=12)
        np.testing.assert_array_equal(a.scene.centers, b.scene.centers)
        np.testing.assert_array_equal(a.scene.sigmas, b.scene.sigmas)
        c = make_phantom("random-k", seed=10, k=12)
        assert not np.array_equal(a.scene.centers, c.scene.centers)

    def test_nested_shells_distinct_sigmas(self):
        spec = make_phantom("nested-shells")
        assert len(spec.scene) >= 3
        sig = spec.scene.sigmas
        assert len(np.unique(sig)) == len(sig)

    def test_slab_two_materials(self):
        spec = make_phantom("two-material-slab")
        assert len(spec.scene) == 2
        assert spec.scene.sigmas[0] != spec.scene.sigmas[1]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            make_phantom("teapot")

    def test_random_k_disjoint(self):
        spec = make_phantom("random-k", seed=0, k=16)
        c = spec.scene.centers
        r = np.max(spec.scene.scales, axis=1)
        for i in range(16):
            for j in range(i + 1, 16):
                assert np.linalg.norm(c[i] - c[j]) >= r[i] + r[j] - 1e-12


class TestVoxelize:
    def test_sphere_occupied_fraction(self):
        from ellipct import EllipsoidSet, PhantomSpec

        scene = EllipsoidSet(np.zeros((1, 3)), np.ones((1, 3)),
                             np.array([[1.0, 0, 0, 0]]), np.array([1.0]))
        spec = PhantomSpec("sphere", scene)
        vol = voxelize(spec, 64, half_extent=1.0)
        frac = float(np.mean(vol.values > 0))
        assert frac == pytest.approx(np.pi / 6, rel=0.05)

    def test_empty_space_zero(self):
        vol = voxelize(make_phantom("random-k", seed=3, k=4), 32)
        corner = vol.values[0, 0, 0]
        assert corner == 0.0
        assert np.min(vol.values) == 0.0

    def test_resolution_convergence(self):
        spec = make_phantom("random-k", seed=5, k=8)
        m32 = float(np.sum(voxelize(spec, 32).values)) * (2.5 / 32) ** 3
        m64 = float(np.sum(voxelize(spec, 64).values)) * (2.5 / 64) ** 3
        assert abs(m64 - m32) / m64 < 0.02

    def test_smallest_index_precedence(self):
        vol = voxelize(make_phantom("nested-shells"), 32)
        # Innermost ellipsoid (index 0, sigma 1.0) owns the center.
        assert vol.values[16, 16, 16] == pytest.approx(1.0)

    def test_rejects_tiny_dims(self):
        from ellipct import InvalidParameterError

        with pytest.raises(InvalidParameterError):
            voxelize(make_phantom("overlap-pair"), 4)


def test_analytic_vs_voxel_projector_consistency():
    # The analytic render of the phantom and the voxel projector applied to
    # its voxelization converge as resolution grows.
    spec = make_phantom("random-k", seed=7, k=8)
    geo = desk_geometry(n_px=32, n_views=3)
    analytic = render_stack(spec.scene, geo)

    def rmse_at(dims):
        vol = voxelize(spec, dims, half_extent=1.5)
        proj = LinearProjector(geo, vol.dims, vol.spacing, vol.origin)
        return float(np.sqrt(np.mean(
            (proj.forward(np.asarray(vol.values, np.float64)) - analytic) ** 2)))

    r32, r64 = rmse_at(32), rmse_at(64)
    assert r64 < r32
    assert r64 < 2.0 * (r32 - r64) + r32  # trend bound: discretization shrinks
