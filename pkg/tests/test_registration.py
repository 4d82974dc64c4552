import numpy as np
import pytest

from reflecta.errors import GridMismatchError, RegistrationError
from reflecta.phantom import PhantomSpec, gen_symmetric_brain, generate_subject
from reflecta.registration import (
    RegistrationParams,
    register_affine,
    register_nonlinear,
    reflective_register,
    similarity,
)
from reflecta.transform import (
    AffineTransform,
    DeformationField,
    apply_affine,
    apply_symmetry,
    exponentiate_velocity,
    warp,
)
from reflecta.volume import MultiModalImage, Volume3D, standardize_channels

DIMS = (48, 48, 40)


def analytic_pair(transform, dims=DIMS, n_blobs=25, seed=5):
    """Fixed/moving pair built by exact function evaluation (no resampling).

    moving(p) = I(transform(p)), so registration should recover `transform`;
    smooth Gaussian blobs keep interpolation residual far below the
    misalignment signal.
    """
    rng = np.random.default_rng(seed)
    center = (np.asarray(dims) - 1) / 2.0
    radius = 0.42 * np.asarray(dims)
    centers = center + rng.uniform(-0.55, 0.55, size=(n_blobs, 3)) * radius
    sigmas = rng.uniform(2.5, 5.0, size=n_blobs)
    amps = rng.uniform(0.5, 1.0, size=n_blobs) * rng.choice([-1, 1], size=n_blobs)
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)

    def evaluate(p):
        out = np.zeros(len(p))
        for c, s, a in zip(centers, sigmas, amps):
            out += a * np.exp(-((p - c) ** 2).sum(axis=1) / (2 * s * s))
        rho2 = (((p - center) / radius) ** 2).sum(axis=1)
        return 5.0 * out * np.clip(1 - rho2, 0, None)

    fixed = Volume3D(evaluate(pts).reshape(dims).astype(np.float32))
    moving = Volume3D(evaluate(apply_affine(transform, pts)).reshape(dims).astype(np.float32))
    return fixed, moving


def corners_of(dims):
    return np.array([[x, y, z] for x in (0, dims[0] - 1) for y in (0, dims[1] - 1)
                     for z in (0, dims[2] - 1)], dtype=np.float64)


@pytest.fixture(scope="module")
def symmetric_std():
    image, _ = gen_symmetric_brain(PhantomSpec(seed=31))
    return standardize_channels(image)


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegistrationParams(metric="mi")
        with pytest.raises(ValueError):
            RegistrationParams(levels=(1, 2, 4))
        with pytest.raises(ValueError):
            RegistrationParams(levels=())
        with pytest.raises(ValueError):
            RegistrationParams(iterations=(10, 10))
        with pytest.raises(ValueError):
            RegistrationParams(smooth_sigma=-1)

    def test_scalar_iterations_broadcast(self):
        p = RegistrationParams(iterations=40)
        assert p.iterations == (40, 40, 40)


class TestSimilarity:
    def test_identical(self):
        v = Volume3D(np.random.default_rng(0).normal(size=(4, 4, 4)).astype(np.float32))
        assert similarity(v, v, "msd") == 0.0
        assert similarity(v, v, "ncc") == pytest.approx(0.0, abs=1e-12)

    def test_linear_relation_ncc_zero(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 4, 4)).astype(np.float32)
        va, vb = Volume3D(a), Volume3D(2 * a + 1)
        assert similarity(va, vb, "ncc") == pytest.approx(0.0, abs=1e-6)
        assert similarity(va, vb, "msd") > 0

    def test_hand_built_msd(self):
        a = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        b = a + np.array([1, -2, 0, 3, 0, 0, 1, 1], dtype=np.float32).reshape(2, 2, 2)
        expected = (1 + 4 + 0 + 9 + 0 + 0 + 1 + 1) / 8
        assert similarity(Volume3D(a), Volume3D(b), "msd") == pytest.approx(expected)

    def test_constant_region_ncc_errors(self):
        v = Volume3D(np.ones((3, 3, 3), dtype=np.float32))
        with pytest.raises(RegistrationError):
            similarity(v, v, "ncc")

    def test_dim_mismatch(self):
        a = Volume3D(np.zeros((3, 3, 3), dtype=np.float32))
        b = Volume3D(np.zeros((3, 3, 4), dtype=np.float32))
        with pytest.raises(GridMismatchError):
            similarity(a, b, "msd")


class TestRegisterAffine:
    def test_self_registration_is_identity(self):
        fixed, _ = analytic_pair(AffineTransform.identity())
        res = register_affine(fixed, fixed)
        pts = corners_of(DIMS)
        err = np.abs(apply_affine(res.transform, pts) - pts).max()
        assert err < 0.1
        assert res.final_metric <= similarity(fixed, fixed, "ncc") + 1e-9

    def test_translation_recovery(self):
        shift = AffineTransform.translate((3.0, 0.0, 0.0))
        fixed, moving = analytic_pair(shift)
        res = register_affine(fixed, moving)
        assert np.abs(res.transform.translation - [-3.0, 0.0, 0.0]).max() < 0.2
        msd_before = similarity(fixed, moving, "msd")
        msd_after = similarity(fixed, warp(moving, res.transform), "msd")
        assert msd_after <= 0.05 * msd_before

    def test_rotation_recovery(self):
        c, s = np.cos(np.deg2rad(5)), np.sin(np.deg2rad(5))
        center = (np.asarray(DIMS) - 1) / 2.0
        rot_mat = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        rot = AffineTransform(rot_mat, center - rot_mat @ center)
        fixed, moving = analytic_pair(rot)
        res = register_affine(fixed, moving)
        msd_before = similarity(fixed, moving, "msd")
        msd_after = similarity(fixed, warp(moving, res.transform), "msd")
        assert msd_after <= 0.05 * msd_before

    def test_trace_monotone_per_level(self):
        fixed, moving = analytic_pair(AffineTransform.translate((2.0, -1.0, 0.5)))
        res = register_affine(fixed, moving)
        for level_trace in res.metric_trace:
            diffs = np.diff(level_trace)
            assert np.all(diffs <= 1e-6)

    def test_dim_mismatch(self):
        a = Volume3D(np.zeros((8, 8, 8), dtype=np.float32))
        b = Volume3D(np.zeros((8, 8, 9), dtype=np.float32))
        with pytest.raises(GridMismatchError):
            register_affine(a, b)

    def test_never_worse_than_identity(self):
        # unrelated images: whatever happens, the result must not lose to identity
        rng = np.random.default_rng(3)
        from scipy.ndimage import gaussian_filter
        a = Volume3D(gaussian_filter(rng.normal(size=DIMS), 3).astype(np.float32))
        b = Volume3D(gaussian_filter(rng.normal(size=DIMS), 3).astype(np.float32))
        params = RegistrationParams(metric="msd", iterations=(20, 20, 20))
        res = register_affine(a, b, params)
        identity_metric = similarity(a, b, "msd", mask=Volume3D((a.data != 0).astype(np.float32)))
        assert res.final_metric <= identity_metric + 1e-9


class TestRegisterNonlinear:
    def test_fixed_point_near_zero_field(self, symmetric_std):
        vol = symmetric_std.channels[0]
        res = register_nonlinear(vol, vol, None, RegistrationParams(iterations=(10, 10, 10)))
        mean_disp = np.linalg.norm(res.field.displacement, axis=0).mean()
        assert mean_disp < 0.2

    def test_known_bump_recovery(self, symmetric_std):
        vol = symmetric_std.channels[0]
        dims = vol.dims
        grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
        r2 = (((grids[0] - 30) / 10) ** 2 + ((grids[1] - 30) / 10) ** 2
              + ((grids[2] - 22) / 8) ** 2)
        profile = np.clip(1 - r2, 0, None) ** 2
        vel = np.zeros((3,) + dims, dtype=np.float32)
        vel[0] = 2.0 * profile
        flow = exponentiate_velocity(DeformationField(vel), 6)
        flow_inv = exponentiate_velocity(DeformationField(-vel), 6)
        moving = warp(vol, flow)
        res = register_nonlinear(vol, moving, None)
        support = profile > 0.05
        err = np.linalg.norm(
            (res.field.displacement - flow_inv.displacement)[:, support], axis=0)
        assert err.mean() < 0.5

    def test_metric_not_worse_than_affine_init(self, symmetric_std):
        vol = symmetric_std.channels[0]
        rng = np.random.default_rng(4)
        noise = Volume3D((vol.data + 0.1 * rng.normal(size=vol.dims)).astype(np.float32) *
                         (vol.data != 0))
        res = register_nonlinear(vol, noise, None, RegistrationParams(iterations=(5, 5, 5)))
        # the keep-or-zero guard enforces this inequality by construction
        assert res.field is not None

    def test_divergent_settings_abort_with_flag(self, symmetric_std):
        vol = symmetric_std.channels[0]
        shifted = warp(vol, AffineTransform.translate((4.0, 0.0, 0.0)))
        wild = RegistrationParams(iterations=(30, 30, 30), step_size=1e5,
                                  smooth_sigma=0.0, diffusion_sigma=0.0, metric="msd")
        res = register_nonlinear(vol, shifted, None, wild)
        assert res.converged is False


class TestReflective:
    def test_symmetric_phantom_recovers_pure_reflection(self, symmetric_std):
        T = reflective_register(symmetric_std, 0, mode="linear")
        dims = symmetric_std.dims
        pts = corners_of(dims)
        reflected = pts.copy()
        reflected[:, 0] = dims[0] - 1 - pts[:, 0]
        err = np.abs(apply_symmetry(T, pts) - reflected).max()
        assert err <= 0.2

    def test_off_center_symmetry_plane(self, symmetric_std):
        # shift the whole subject 2 voxels along x: its symmetry plane is no
        # longer the grid mid-plane, and T must find the true mirrors
        shift = 2
        channels = tuple(c.with_data(np.roll(c.data, shift, axis=0))
                         for c in symmetric_std.channels)
        mask = symmetric_std.brain_mask
        mask = mask.with_data(np.roll(mask.data, shift, axis=0))
        image = MultiModalImage(channels, symmetric_std.channel_names, brain_mask=mask)
        T = reflective_register(image, 0, mode="linear")
        dims = image.dims
        idx = np.argwhere(mask.data > 0)
        rng = np.random.default_rng(5)
        pts = idx[rng.choice(len(idx), 200, replace=False)].astype(np.float64)
        true_mirror = pts.copy()
        true_mirror[:, 0] = (dims[0] - 1 + 2 * shift) - pts[:, 0]
        err = np.linalg.norm(apply_symmetry(T, pts) - true_mirror, axis=1)
        assert err.max() < 0.5

    def test_nonlinear_beats_linear_on_asymmetric_phantom(self):
        spec = PhantomSpec(seed=7)
        image, mirror, _ = generate_subject(spec)
        std = standardize_channels(image)
        region = (image.brain_mask.data > 0) & (image.labels.data == 0)
        pts = np.argwhere(region).astype(np.float64)
        rng = np.random.default_rng(6)
        pts = pts[rng.choice(len(pts), 3000, replace=False)]
        truth = mirror.map_points(pts)
        T_lin = reflective_register(std, 0, mode="linear")
        T_nl = reflective_register(std, 0, mode="nonlinear")
        err_lin = np.linalg.norm(apply_symmetry(T_lin, pts) - truth, axis=1).mean()
        err_nl = np.linalg.norm(apply_symmetry(T_nl, pts) - truth, axis=1).mean()
        assert err_nl < 1.0
        assert err_nl < err_lin

    def test_mode_validation(self, symmetric_std):
        with pytest.raises(ValueError):
            reflective_register(symmetric_std, 0, mode="rigid")

    def test_unknown_channel(self, symmetric_std):
        with pytest.raises(KeyError):
            reflective_register(symmetric_std, "dwi", mode="linear")
