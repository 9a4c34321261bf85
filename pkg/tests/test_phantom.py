import numpy as np
import pytest

from carotidkit.errors import SpecInvalid
from carotidkit.phantom import (
    PhantomSpec,
    axial_speed,
    generate_flow,
    generate_phantom,
    radius_profile,
    waveform_factor,
)
from carotidkit.volume import sample_velocity


class TestGeneratePhantom:
    def test_wall_mask_matches_analytic_annulus(self):
        spec = PhantomSpec(kind="straight_tube", lumen_radius=3.0,
                           wall_thickness=1.0, length=20.0, voxel_spacing=0.25)
        study = generate_phantom(spec)
        aff = study.wall_mask.affine
        dims = study.wall_mask.dims
        i, j, k = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
        pts = aff.apply(np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1))
        r = np.hypot(pts[:, 0], pts[:, 1]).reshape(dims)
        expect = (r > 3.0) & (r <= 4.0)
        # voxel-center classification must be exact (error strictly < 0.5 voxel)
        assert np.array_equal(study.wall_mask.bits, expect)
        assert np.array_equal(study.lumen_mask.bits, r <= 3.0)

    def test_stenotic_truth(self):
        spec = PhantomSpec(kind="stenotic_tube", lumen_radius=3.0,
                           min_radius=1.5, length=40.0)
        study = generate_phantom(spec)
        assert study.truth.stenosis_percent == pytest.approx(50.0)
        assert radius_profile(spec, spec.length / 2.0) == pytest.approx(1.5)
        assert radius_profile(spec, 0.0) == pytest.approx(3.0)

    def test_zero_radius_rejected(self):
        with pytest.raises(SpecInvalid):
            generate_phantom(PhantomSpec(lumen_radius=0.0))

    def test_intensity_levels(self):
        spec = PhantomSpec(length=10.0, voxel_spacing=0.25)
        study = generate_phantom(spec)
        vals = study.bb.values
        assert vals[study.lumen_mask.bits].min() >= 99.0
        center = vals[vals.shape[0] // 2, vals.shape[1] // 2, 5]
        assert center == pytest.approx(100.0)
        # far corner is pure background
        assert vals[0, 0, 0] == pytest.approx(50.0)
        # wall interior reaches the plateau
        assert vals.max() == pytest.approx(400.0)

    def test_axial_symmetry_of_masks(self):
        spec = PhantomSpec(length=8.0, voxel_spacing=0.5)
        study = generate_phantom(spec)
        bits = study.lumen_mask.bits
        assert np.array_equal(bits, bits[::-1, :, :])
        assert np.array_equal(bits, bits[:, ::-1, :])
        assert np.array_equal(bits, np.swapaxes(bits, 0, 1))

    def test_bifurcation_masks_have_two_distal_components(self):
        spec = PhantomSpec(kind="bifurcation", lumen_radius=3.0, length=40.0,
                           voxel_spacing=0.5)
        study = generate_phantom(spec)
        from scipy.ndimage import label
        top = study.lumen_mask.bits[:, :, -2]
        _, n = label(top)
        assert n == 2


class TestGenerateFlow:
    def test_centerline_peak_speed(self):
        spec = PhantomSpec(length=10.0, voxel_spacing=0.25, v_max=1.0)
        f = generate_flow(spec)
        v = sample_velocity(f, (0.0, 0.0, 5.0), 0.0)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)

    def test_half_radius_speed_analytic(self):
        # analytic profile oracle at r = R/sqrt(2): exactly v_max/2
        spec = PhantomSpec(lumen_radius=3.0, v_max=1.0)
        assert axial_speed(spec, 3.0 / np.sqrt(2)) == pytest.approx(0.5, abs=1e-6)

    def test_flat_waveform_frames_identical(self):
        spec = PhantomSpec(length=8.0, voxel_spacing=0.5, timepoints=4,
                           waveform="flat")
        f = generate_flow(spec)
        for t in range(1, 4):
            assert np.array_equal(f.components[0], f.components[t])

    def test_half_sine_peaks_mid_cycle(self):
        spec = PhantomSpec(waveform="half_sine", cycle_ms=800.0)
        fac = waveform_factor(spec, np.array([0.0, 400.0, 800.0]))
        assert fac[1] == pytest.approx(1.0)
        assert fac[0] == pytest.approx(0.0, abs=1e-12)

    def test_flow_rate_half_peak_times_area(self):
        # analytic Poiseuille mean: Q = pi R^2 v_max / 2
        spec = PhantomSpec(lumen_radius=3.0, length=10.0, voxel_spacing=0.25,
                           v_max=1.0)
        f = generate_flow(spec)
        k = f.dims[2] // 2
        vz = f.components[0, :, :, k, 2]
        q = vz.sum() * spec.voxel_spacing ** 2
        assert q == pytest.approx(np.pi * 9.0 / 2.0, rel=0.02)

    def test_venc(self):
        spec = PhantomSpec(v_max=0.8)
        assert generate_flow(PhantomSpec(length=8.0, voxel_spacing=0.5,
                                         v_max=0.8)).venc == pytest.approx(1.2)
