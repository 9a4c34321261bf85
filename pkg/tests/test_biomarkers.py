import math

import numpy as np
import pytest

from carotidkit.biomarkers import (
    FlowWaveform,
    build_report,
    caliper_min_diameter,
    equivalent_diameter,
    flow_rate,
    pwv,
    stenosis_degree,
    vwt_profile,
    waveform_foot_time,
    wss,
)
from carotidkit.centerline import CrossSectionPlane, Frame
from carotidkit.contours import ClosedSplineContour, SliceAnnotation
from carotidkit.errors import FlatWaveform, NonpositiveReference, NoOverlap
from carotidkit.volume import Affine, VelocityField

from tests.test_contours import circle_contour, circle_seeds


def make_plane(center=(0.0, 0.0, 5.0), spacing=0.3):
    f = Frame(tangent=np.array([0.0, 0, 1]), normal=np.array([1.0, 0, 0]),
              binormal=np.array([0, 1.0, 0]))
    return CrossSectionPlane(id="p-000", center=center, frame=f,
                             arc_position=0.0, fov=30.0, in_plane_spacing=spacing)


def uniform_field(vz=0.5, extent=12.0, nz=11, spacing=0.5):
    n = int(extent / spacing) + 1
    dims = (n, n, nz)
    comp = np.zeros((2, *dims, 3))
    comp[..., 2] = vz
    aff = Affine.from_spacing((spacing, spacing, 1.0),
                              origin=(-extent / 2, -extent / 2, 0.0))
    return VelocityField(dims=dims, affine=aff, timepoints=(0.0, 500.0),
                         cycle_length=1000.0, components=comp, venc=2.0)


def poiseuille_field(v_max=1.0, radius=3.0, spacing=0.25, extent=9.0, nz=9):
    n = int(extent / spacing) + 1
    x = -extent / 2 + np.arange(n) * spacing
    xx, yy = np.meshgrid(x, x, indexing="ij")
    r2 = xx ** 2 + yy ** 2
    prof = np.where(r2 <= radius ** 2, v_max * (1 - r2 / radius ** 2), 0.0)
    dims = (n, n, nz)
    comp = np.zeros((2, *dims, 3))
    comp[..., 2] = prof[None, :, :, None]
    aff = Affine.from_spacing((spacing, spacing, 1.0),
                              origin=(-extent / 2, -extent / 2, 0.0))
    return VelocityField(dims=dims, affine=aff, timepoints=(0.0, 500.0),
                         cycle_length=1000.0, components=comp, venc=1.5 * v_max)


class TestVwtProfile:
    def test_concentric_circles(self):
        p = vwt_profile(circle_contour(32, 3.0), circle_contour(32, 4.0, role="outer_wall"))
        assert p.valid.all()
        assert np.allclose(p.thickness, 1.0, atol=1e-3)
        assert p.mean == pytest.approx(1.0, abs=1e-3)

    def test_offset_lumen_analytic(self):
        # analytic ray-circle oracle: lumen r=2 at (1,0) inside wall R=4 at origin
        lumen = circle_contour(64, 2.0, center=(1.0, 0.0))
        wall = circle_contour(64, 4.0, role="outer_wall")
        p = vwt_profile(lumen, wall, n_rays=36)
        assert p.thickness[0] == pytest.approx(1.0, abs=5e-3)   # theta = 0
        assert p.thickness[18] == pytest.approx(3.0, abs=5e-3)  # theta = pi
        assert np.allclose(p.centroid, (1.0, 0.0), atol=1e-3)

    def test_invalid_annotation_rejected(self):
        lumen = circle_contour(16, 5.0)
        wall = circle_contour(16, 4.0, role="outer_wall")
        with pytest.raises(ValueError, match="lumen not strictly inside wall"):
            vwt_profile(lumen, wall)

    def test_rotation_invariance(self):
        n_rays = 36
        lumen_s = circle_seeds(24, 2.0, center=(0.8, 0.0))
        wall_s = circle_seeds(24, 4.0)
        p0 = vwt_profile(ClosedSplineContour(seeds=lumen_s),
                         ClosedSplineContour(seeds=wall_s, role="outer_wall"),
                         n_rays=n_rays)
        k = 5
        th = 2 * np.pi * k / n_rays
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        p1 = vwt_profile(ClosedSplineContour(seeds=lumen_s @ rot.T),
                         ClosedSplineContour(seeds=wall_s @ rot.T, role="outer_wall"),
                         n_rays=n_rays)
        assert np.allclose(np.sort(p0.thickness), np.sort(p1.thickness), atol=1e-6)
        assert np.allclose(np.roll(p0.thickness, k), p1.thickness, atol=1e-6)


class TestStenosis:
    def test_basic(self):
        assert stenosis_degree(2.0, 5.0) == pytest.approx(60.0)

    def test_equal(self):
        assert stenosis_degree(5.0, 5.0) == 0.0

    def test_clamped(self):
        assert stenosis_degree(6.0, 5.0) == 0.0

    def test_nonpositive_reference(self):
        with pytest.raises(NonpositiveReference):
            stenosis_degree(2.0, 0.0)

    def test_diameters_on_circle(self):
        c = circle_contour(64, 3.0)
        assert equivalent_diameter(c) == pytest.approx(6.0, rel=0.005)
        assert caliper_min_diameter(c) == pytest.approx(6.0, rel=0.005)


class TestFlowRate:
    def test_uniform_axial_flow(self):
        # analytic oracle: Q = v * pi r^2 = 0.5 * 9 pi = 14.137 ml/s
        f = uniform_field(vz=0.5)
        q = flow_rate(make_plane(), circle_contour(32, 3.0), f, t_ms=0.0)
        assert q == pytest.approx(0.5 * math.pi * 9.0, rel=0.02)

    def test_zero_field(self):
        f = uniform_field(vz=0.0)
        assert flow_rate(make_plane(), circle_contour(16, 3.0), f, 0.0) == 0.0

    def test_reversed_flow_negates(self):
        fpos = uniform_field(vz=0.5)
        fneg = uniform_field(vz=-0.5)
        plane = make_plane()
        c = circle_contour(16, 3.0)
        assert flow_rate(plane, c, fneg, 0.0) == pytest.approx(
            -flow_rate(plane, c, fpos, 0.0), rel=1e-12)

    def test_linearity_in_field(self):
        f1 = uniform_field(vz=0.4)
        f3 = uniform_field(vz=1.2)
        plane = make_plane()
        c = circle_contour(16, 2.5)
        q1 = flow_rate(plane, c, f1, 0.0)
        q3 = flow_rate(plane, c, f3, 0.0)
        assert q3 == pytest.approx(3.0 * q1, rel=1e-9)

    def test_no_overlap(self):
        f = uniform_field()
        plane = make_plane(center=(500.0, 0.0, 5.0))
        with pytest.raises(NoOverlap):
            flow_rate(plane, circle_contour(16, 3.0), f, 0.0)


class TestWss:
    def test_poiseuille(self):
        # analytic oracle: tau = 2 mu v_max / R = 2*0.0035*1000/3 = 2.333 Pa
        f = poiseuille_field()
        prof = wss(make_plane(), circle_contour(32, 3.0), f, 0.0, mu=0.0035)
        assert prof.valid.all()
        expect = 2 * 0.0035 * 1.0 / 3.0 * 1000.0
        assert np.all(np.abs(prof.values - expect) / expect < 0.05)
        assert prof.mean == pytest.approx(expect, rel=0.05)

    def test_zero_field(self):
        f = uniform_field(vz=0.0)
        prof = wss(make_plane(), circle_contour(16, 3.0), f, 0.0)
        assert np.all(prof.values[prof.valid] == 0.0)

    def test_plug_flow_matches_two_point_fit(self):
        # oracle: closed-form least-squares (here exact) fit through
        # (h, v), (2h, v) of v(r) = a r + b r^2
        v = 0.8
        h = 0.3
        f = uniform_field(vz=v)
        prof = wss(make_plane(spacing=h), circle_contour(16, 3.0), f, 0.0,
                   mu=0.0035)
        a_fit = np.linalg.solve(np.array([[h, h ** 2], [2 * h, 4 * h ** 2]]),
                                np.array([v, v]))[0]
        expect = 0.0035 * a_fit * 1000.0
        assert np.allclose(prof.values[prof.valid], expect, rtol=1e-9)

    def test_linear_scaling_mu_and_vmax(self):
        f1 = poiseuille_field(v_max=1.0)
        f2 = poiseuille_field(v_max=2.0)
        plane = make_plane()
        c = circle_contour(32, 3.0)
        w1 = wss(plane, c, f1, 0.0, mu=0.0035)
        w2 = wss(plane, c, f2, 0.0, mu=0.0035)
        w3 = wss(plane, c, f1, 0.0, mu=0.0070)
        assert np.allclose(w2.values[w2.valid], 2 * w1.values[w1.valid], rtol=1e-9)
        assert np.allclose(w3.values[w3.valid], 2 * w1.values[w1.valid], rtol=1e-9)


def triangle_waveform(arc, foot_ms, rise=80.0, fall=200.0, peak=20.0,
                      t_end=800.0, dt=10.0):
    t = np.arange(0.0, t_end, dt)
    q = np.zeros_like(t)
    up = (t >= foot_ms) & (t < foot_ms + rise)
    q[up] = (t[up] - foot_ms) / rise * peak
    down = (t >= foot_ms + rise) & (t < foot_ms + rise + fall)
    q[down] = peak * (1 - (t[down] - foot_ms - rise) / fall)
    return FlowWaveform(arc_position=arc, times=t, values=q)


class TestPwv:
    def test_shifted_triangles(self):
        # Dx/Dt oracle: 10 ms per 100 mm -> 10 m/s
        ws = [triangle_waveform(arc, 100.0 + arc / 10.0)
              for arc in (0.0, 100.0, 200.0)]
        res = pwv(ws)
        assert res.measurable
        assert res.value == pytest.approx(10.0, rel=0.01)

    def test_foot_time_on_triangle(self):
        w = triangle_waveform(0.0, 140.0)
        assert waveform_foot_time(w) == pytest.approx(140.0, abs=1.0)

    def test_zero_shift_not_measurable(self):
        ws = [triangle_waveform(arc, 100.0) for arc in (0.0, 100.0, 200.0)]
        res = pwv(ws)
        assert not res.measurable
        assert math.isinf(res.value)

    def test_constant_is_flat(self):
        t = np.arange(0.0, 800.0, 10.0)
        ws = [FlowWaveform(arc_position=a, times=t, values=np.full_like(t, 3.0))
              for a in (0.0, 100.0, 200.0)]
        with pytest.raises(FlatWaveform):
            pwv(ws)

    def test_time_shift_invariance(self):
        ws = [triangle_waveform(arc, 100.0 + arc / 20.0)
              for arc in (0.0, 50.0, 100.0, 150.0)]
        shifted = [FlowWaveform(arc_position=w.arc_position,
                                times=w.times + 37.0, values=w.values)
                   for w in ws]
        assert pwv(shifted).value == pytest.approx(pwv(ws).value, rel=1e-9)


class TestReportAggregation:
    def planes_and_annotations(self):
        planes = []
        annotations = {}
        for k in range(3):
            f = Frame(tangent=np.array([0.0, 0, 1]),
                      normal=np.array([1.0, 0, 0]),
                      binormal=np.array([0, 1.0, 0]))
            p = CrossSectionPlane(id=f"p-{k:03d}", center=(0, 0, 2.0 * k),
                                  frame=f, arc_position=2.0 * k, fov=30.0,
                                  in_plane_spacing=0.3)
            planes.append(p)
            annotations[p.id] = SliceAnnotation(
                plane_id=p.id, lumen=circle_contour(16, 3.0 - 0.5 * k),
                wall=circle_contour(16, 4.0, role="outer_wall"))
        return planes, annotations

    def test_rows_and_stenosis(self):
        planes, anns = self.planes_and_annotations()
        rep = build_report(planes, anns)
        assert len(rep.rows) == 3
        # smallest lumen is the distal plane here, so it is both the
        # reference and the minimum: stenosis 0
        assert rep.stenosis_percent == pytest.approx(0.0, abs=1e-6)
        assert rep.reference_plane_id == "p-002"

    def test_unusable_slices_excluded(self):
        planes, anns = self.planes_and_annotations()
        base = build_report(planes, anns)
        # poison one plane with an unusable slice carrying absurd contours
        poisoned = dict(anns)
        poisoned["p-001"] = SliceAnnotation(
            plane_id="p-001", lumen=circle_contour(16, 0.1),
            wall=circle_contour(16, 20.0, role="outer_wall"), usable=False)
        rep = build_report(planes, poisoned)
        assert [r.plane_id for r in rep.rows] == ["p-000", "p-002"]
        kept = {r.plane_id: r for r in base.rows}
        for r in rep.rows:
            assert r.vwt_mean == kept[r.plane_id].vwt_mean
            assert r.lumen_area == kept[r.plane_id].lumen_area
