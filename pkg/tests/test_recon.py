import numpy as np
import pytest

from ellipct import (ConfigError, InvalidParameterError, NumericalError,
                     make_phantom, render_stack, voxelize)
from ellipct.metrics import psnr
from ellipct.recon import (LinearProjector, VoxelVolume, cgls, cgls_solve,
                           hybrid_init, recon_ct, sart, tv_denoise, tv_value)

from conftest import desk_geometry


@pytest.fixture(scope="module")
def small_proj():
    geo = desk_geometry(n_px=32, n_views=12)
    vol = VoxelVolume.centered(24, 1.5)
    return LinearProjector.for_volume(geo, vol)


class TestForwardAdjoint:
    def test_uniform_cube_chord(self, small_proj):
        # 12 voxels * 0.125 spacing = 1.5 world units of unit density.
        vals = np.zeros((24, 24, 24))
        vals[6:18, 6:18, 6:18] = 1.0
        img = small_proj.forward_view(vals, 0)
        assert img[16, 16] == pytest.approx(1.5, rel=0.01)

    def test_zero_volume(self, small_proj):
        out = small_proj.forward(np.zeros((24, 24, 24)))
        assert np.array_equal(out, np.zeros_like(out))

    def test_adjoint_dot_product(self, small_proj, rng):
        geo = small_proj.geometry
        for _ in range(20):
            x = rng.normal(size=small_proj.dims)
            y = rng.normal(size=(geo.n_views, geo.n_v, geo.n_u))
            lhs = float(np.sum(small_proj.forward(x) * y))
            rhs = float(np.sum(x * small_proj.adjoint(y)))
            assert lhs == pytest.approx(rhs, rel=1e-5)

    def test_shape_mismatch(self, small_proj):
        with pytest.raises(InvalidParameterError):
            small_proj.forward(np.zeros((8, 8, 8)))
        with pytest.raises(InvalidParameterError):
            small_proj.adjoint(np.zeros((3, 4, 4)))


class _DenseOp:
    def __init__(self, matrix):
        self.matrix = matrix

    def forward(self, x):
        return self.matrix @ x

    def adjoint(self, y):
        return self.matrix.T @ y


class TestCgls:
    def test_identity_single_step(self):
        op = _DenseOp(np.array([[1.0]]))
        x, res = cgls_solve(op.forward, op.adjoint, np.array([0.7]), np.zeros(1), 1)
        assert x[0] == pytest.approx(0.7, abs=1e-12)

    def test_matches_dense_lstsq(self, rng):
        # Spectra bounded away from zero: n-step CG convergence survives
        # floating point only for reasonably conditioned systems.
        for n_rows, n_cols in ((60, 40), (220, 200), (150, 80)):
            u, _ = np.linalg.qr(rng.normal(size=(n_rows, n_cols)))
            v, _ = np.linalg.qr(rng.normal(size=(n_cols, n_cols)))
            A = u @ np.diag(rng.uniform(0.5, 2.0, n_cols)) @ v.T
            b = rng.normal(size=n_rows)
            op = _DenseOp(A)
            x, res = cgls_solve(op.forward, op.adjoint, b, np.zeros(n_cols), n_cols)
            want = np.linalg.lstsq(A, b, rcond=None)[0]
            np.testing.assert_allclose(x, want, atol=1e-6 * max(1, np.abs(want).max()))
            assert np.all(np.diff(res) <= 1e-10 * res[0])

    def test_zero_data(self, small_proj):
        geo = small_proj.geometry
        vol, _ = cgls(small_proj, np.zeros((geo.n_views, geo.n_v, geo.n_u)), 3)
        assert np.array_equal(vol.values, np.zeros((24, 24, 24), np.float32))

    def test_nan_aborts(self):
        op = _DenseOp(np.array([[np.nan]]))
        with pytest.raises(NumericalError):
            cgls_solve(op.forward, op.adjoint, np.array([1.0]), np.zeros(1), 2)

    def test_requires_iterations(self, small_proj):
        with pytest.raises(InvalidParameterError):
            cgls_solve(lambda x: x, lambda y: y, np.zeros(1), np.zeros(1), 0)


class TestSart:
    def test_single_ray_single_voxel(self):
        # One view, matrix [[w]]: after a full-relaxation sweep, x = p / w.
        op_matrix = np.array([[0.5]])

        class _Tiny:
            geometry = type("G", (), {"n_views": 1, "n_v": 1, "n_u": 1})()
            dims = (1, 1, 1)
            spacing = np.ones(3)
            origin = np.zeros(3)

            def zero_volume(self):
                return np.zeros((1, 1, 1))

            def _check_stack(self, b):
                return np.asarray(b, dtype=np.float64)

            def forward_view(self, x, v):
                return op_matrix * x.ravel()[0]

            def adjoint_view(self, y, v):
                return (op_matrix * np.asarray(y).ravel()[0]).reshape(1, 1, 1)

        vol = sart(_Tiny(), np.array([[[0.7]]]), sweeps=1, relaxation=1.0)
        assert vol.values[0, 0, 0] == pytest.approx(1.4, rel=1e-6)

    def test_residual_decreases(self, small_proj):
        phantom = voxelize(make_phantom("random-k", seed=4, k=8), 24, 1.5)
        b = small_proj.forward(np.asarray(phantom.values, np.float64))
        residuals = []
        vol = None
        for _ in range(6):
            vol = sart(small_proj, b, 1, 1.0,
                       volume0=vol)
            r = b - small_proj.forward(np.asarray(vol.values, np.float64))
            residuals.append(float(np.linalg.norm(r)))
        assert all(b <= a + 1e-9 for a, b in zip(residuals, residuals[1:]))

    def test_output_nonnegative(self, small_proj, rng):
        geo = small_proj.geometry
        noisy = rng.normal(size=(geo.n_views, geo.n_v, geo.n_u))
        vol = sart(small_proj, noisy, 2, 1.0)
        assert np.all(vol.values >= 0)

    def test_relaxation_bounds(self, small_proj):
        geo = small_proj.geometry
        b = np.zeros((geo.n_views, geo.n_v, geo.n_u))
        for bad in (0.0, 2.0, -0.5):
            with pytest.raises(InvalidParameterError):
                sart(small_proj, b, 1, bad)


class TestTv:
    def test_constant_unchanged(self):
        vol = VoxelVolume.centered(12, 1.0, np.full((12, 12, 12), 3.0, np.float32))
        out = tv_denoise(vol, 5, 0.01)
        np.testing.assert_allclose(out.values, vol.values, atol=1e-7)

    def test_noise_strictly_decreases(self, rng):
        vals = np.zeros((16, 16, 16))
        vals[4:12, 4:12, 4:12] = 1.0
        spots = rng.integers(0, 16, size=(60, 3))
        vals[spots[:, 0], spots[:, 1], spots[:, 2]] += rng.choice([-1.0, 1.0], 60)
        vol = VoxelVolume.centered(16, 1.0, vals)
        before = tv_value(vol.values)
        after = tv_value(tv_denoise(vol, 10, 0.01).values)
        assert after < before

    def test_zero_steps_identity(self, rng):
        vol = VoxelVolume.centered(10, 1.0, rng.normal(size=(10, 10, 10)))
        out = tv_denoise(vol, 0, 0.5)
        np.testing.assert_array_equal(out.values, vol.values)

    def test_never_increases_default_step(self, rng):
        for _ in range(5):
            vol = VoxelVolume.centered(10, 1.0, rng.normal(size=(10, 10, 10)))
            before = tv_value(vol.values)
            after = tv_value(tv_denoise(vol, 8, 0.05).values)
            assert after <= before + 1e-12


class TestHybridInit:
    def test_degenerate_schedule_equals_cgls(self, small_proj):
        phantom = voxelize(make_phantom("random-k", seed=4, k=8), 24, 1.5)
        b = small_proj.forward(np.asarray(phantom.values, np.float64))
        full = hybrid_init(small_proj, b, schedule=(7, 0, 0))
        ref, _ = cgls(small_proj, b, 7)
        np.testing.assert_array_equal(full.values, ref.values)

    def test_beats_cgls_only(self):
        geo = desk_geometry(n_px=32, n_views=10)
        spec = make_phantom("random-k", seed=6, k=16)
        truth = voxelize(spec, 24, 1.5)
        stack = render_stack(spec.scene, geo)
        proj = LinearProjector(geo, truth.dims, truth.spacing, truth.origin)
        hybrid = hybrid_init(proj, stack, schedule=(15, 4, 20))
        base, _ = cgls(proj, stack, 15)
        truth64 = np.asarray(truth.values, np.float64)
        assert psnr(np.asarray(hybrid.values, np.float64), truth64) >= \
            psnr(np.asarray(base.values, np.float64), truth64)

    def test_empty_stack_rejected(self, small_proj):
        with pytest.raises(InvalidParameterError):
            hybrid_init(small_proj, np.zeros((0, 32, 32)))

    def test_interleave_runs(self, small_proj):
        phantom = voxelize(make_phantom("random-k", seed=4, k=8), 24, 1.5)
        b = small_proj.forward(np.asarray(phantom.values, np.float64))
        vol = hybrid_init(small_proj, b, schedule=(5, 2, 4), interleave=True)
        assert np.all(np.isfinite(vol.values))


class TestReconCt:
    def test_unknown_method(self, small_proj):
        geo = small_proj.geometry
        with pytest.raises(ConfigError):
            recon_ct(small_proj, np.zeros((geo.n_views, geo.n_v, geo.n_u)),
                     method="fbp")

    def test_needs_two_views(self):
        geo = desk_geometry(n_px=16, n_views=1)
        proj = LinearProjector(geo, (8, 8, 8), np.full(3, 0.375), np.full(3, -1.3125))
        with pytest.raises(InvalidParameterError):
            recon_ct(proj, np.zeros((1, 16, 16)))

    def test_finite_nonnegative(self, small_proj):
        spec = make_phantom("random-k", seed=4, k=8)
        stack = render_stack(spec.scene, small_proj.geometry)
        vol = recon_ct(small_proj, stack, method="sart", sweeps=2)
        assert np.all(np.isfinite(vol.values)) and np.all(vol.values >= 0)
        vol2 = recon_ct(small_proj, stack, method="cgls+tv", cgls_iters=5, tv_steps=3)
        assert np.all(np.isfinite(vol2.values)) and np.all(vol2.values >= 0)
