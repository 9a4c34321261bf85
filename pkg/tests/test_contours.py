import numpy as np
import pytest

from carotidkit.contours import (
    ClosedSplineContour,
    PlaneGrid,
    SliceAnnotation,
    apply_edit,
    contour_area,
    contour_centroid,
    contour_to_mask,
    dice,
    evaluate_contour,
    fit_contour_to_mask,
    points_in_polygon,
    validate_annotation,
)
from carotidkit.errors import (
    ComponentTooSmall,
    EmptyMask,
    GridTooSmall,
    IndexOutOfRange,
    MinimumSeeds,
    TooFewSeeds,
)


def circle_seeds(n, r=10.0, center=(0.0, 0.0), phase=0.0):
    th = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)], axis=1)


def circle_contour(n=8, r=10.0, center=(0.0, 0.0), role="lumen"):
    return ClosedSplineContour(seeds=circle_seeds(n, r, center), role=role)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric polyline Hausdorff distance (vertex-to-segment)."""

    def one_way(p, q):
        q2 = np.roll(q, -1, axis=0)
        d = q2 - q
        L2 = np.maximum((d ** 2).sum(axis=1), 1e-30)
        t = np.clip(((p[:, None, :] - q[None, :, :]) * d[None, :, :]).sum(-1) / L2, 0, 1)
        proj = q[None, :, :] + t[..., None] * d[None, :, :]
        return np.min(np.linalg.norm(p[:, None, :] - proj, axis=-1), axis=1).max()

    return max(one_way(a, b), one_way(b, a))


class TestEvaluateContour:
    def test_interpolates_square_corners(self):
        seeds = np.array([[0, 0], [4, 0], [4, 4], [0, 4]], dtype=float)
        c = ClosedSplineContour(seeds=seeds)
        poly = evaluate_contour(c, 16)
        for s in seeds:
            assert np.min(np.linalg.norm(poly - s, axis=1)) < 1e-9

    def test_seed_interpolation_exact(self):
        c = circle_contour(8)
        poly = evaluate_contour(c, 32)
        # segment k starts exactly at seed k
        assert np.allclose(poly[::32], c.seeds, atol=1e-12)

    def test_circle_radial_deviation(self):
        # dense evaluation vs analytic circle oracle
        c = circle_contour(8, r=10.0)
        poly = evaluate_contour(c, 200)
        radial = np.abs(np.linalg.norm(poly, axis=1) - 10.0)
        assert radial.max() <= 0.2

    def test_point_count(self):
        c = circle_contour(5)
        assert evaluate_contour(c, 7).shape == (35, 2)

    def test_too_few_seeds(self):
        with pytest.raises(TooFewSeeds):
            ClosedSplineContour(seeds=np.array([[0, 0], [1, 1]], dtype=float))


class TestApplyEdit:
    def test_move_and_move_back(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(8))
        orig = a.lumen.seeds[3].copy()
        b = apply_edit(a, "move_seed", role="lumen", index=3, point=(1.0, 2.0))
        c = apply_edit(b, "move_seed", role="lumen", index=3, point=orig)
        assert np.allclose(c.lumen.seeds, a.lumen.seeds)
        assert c.usable == a.usable and c.source == a.source

    def test_input_unchanged(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(8))
        before = a.lumen.seeds.copy()
        apply_edit(a, "move_seed", role="lumen", index=0, point=(9.0, 9.0))
        assert np.array_equal(a.lumen.seeds, before)

    def test_add_seed_on_curve_small_hausdorff(self):
        # numeric Hausdorff oracle on the two densified polylines
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(16))
        poly = evaluate_contour(a.lumen, 32)
        on_curve = poly[16]  # mid-segment point on the spline itself
        b = apply_edit(a, "add_seed", role="lumen", point=tuple(on_curve))
        assert b.lumen.n_seeds == 17
        assert hausdorff(evaluate_contour(a.lumen, 64),
                         evaluate_contour(b.lumen, 64)) < 0.05

    def test_add_seed_inserts_into_nearest_segment(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(4, r=10.0))
        # a point near the arc between seeds 1 and 2
        mid_angle = 2 * np.pi * 1.5 / 4
        p = (10.5 * np.cos(mid_angle), 10.5 * np.sin(mid_angle))
        b = apply_edit(a, "add_seed", role="lumen", point=p)
        assert np.allclose(b.lumen.seeds[2], p)

    def test_remove_seed_minimum(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(3))
        with pytest.raises(MinimumSeeds):
            apply_edit(a, "remove_seed", role="lumen", index=0)

    def test_index_out_of_range(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(4))
        with pytest.raises(IndexOutOfRange):
            apply_edit(a, "move_seed", role="lumen", index=11, point=(0, 0))

    def test_auto_becomes_auto_corrected(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(8), source="auto")
        b = apply_edit(a, "move_seed", role="lumen", index=0, point=(11.0, 0.0))
        assert b.source == "auto_corrected"
        # toggling usable is a label change, not a contour edit
        c = apply_edit(a, "toggle_usable")
        assert c.source == "auto" and c.usable is False

    def test_toggle_usable_round_trip(self):
        a = SliceAnnotation(plane_id="p0", lumen=circle_contour(8))
        b = apply_edit(apply_edit(a, "toggle_usable"), "toggle_usable")
        assert b.usable == a.usable


class TestAreaCentroid:
    def test_circle_area(self):
        c = circle_contour(64, r=10.0)
        assert contour_area(c) == pytest.approx(100 * np.pi, rel=0.005)

    def test_translation_invariance(self):
        c0 = circle_contour(16, r=5.0)
        c1 = circle_contour(16, r=5.0, center=(5.0, 5.0))
        assert contour_area(c0) == pytest.approx(contour_area(c1), rel=1e-9)
        assert np.allclose(contour_centroid(c1) - contour_centroid(c0), (5, 5),
                           atol=1e-9)

    def test_reversal_and_rotation_invariance(self):
        seeds = circle_seeds(12, r=4.0) + np.array([1.0, -2.0])
        a = contour_area(ClosedSplineContour(seeds=seeds))
        rev = contour_area(ClosedSplineContour(seeds=seeds[::-1].copy()))
        rot = contour_area(ClosedSplineContour(seeds=np.roll(seeds, 5, axis=0)))
        assert rev == pytest.approx(a, rel=1e-9)
        assert rot == pytest.approx(a, rel=1e-9)

    def test_rigid_motion_invariance(self):
        seeds = circle_seeds(10, r=3.0)
        th = 0.7
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        moved = seeds @ rot.T + np.array([4.0, -1.0])
        assert contour_area(ClosedSplineContour(seeds=moved)) == pytest.approx(
            contour_area(ClosedSplineContour(seeds=seeds)), rel=1e-9)


class TestContourToMask:
    def test_circle_pixel_count(self):
        c = circle_contour(32, r=10.0)
        grid = PlaneGrid.centered(60, 60, 0.5)
        m = contour_to_mask(c, grid)
        assert m.sum() * 0.25 == pytest.approx(100 * np.pi, rel=0.02)

    def test_tiny_contour_empty_allowed(self):
        c = ClosedSplineContour(seeds=np.array(
            [[0.26, 0.26], [0.30, 0.26], [0.28, 0.30]]))
        grid = PlaneGrid(nu=4, nv=4, spacing=1.0, origin=(-1.0, -1.0))
        m = contour_to_mask(c, grid)
        assert m.sum() == 0

    def test_grid_too_small(self):
        c = circle_contour(8, r=10.0)
        with pytest.raises(GridTooSmall):
            contour_to_mask(c, PlaneGrid.centered(10, 10, 0.5))

    def test_even_odd_rule(self):
        # point-in-polygon: centroid inside, far point outside
        poly = evaluate_contour(circle_contour(8, r=3.0), 32)
        res = points_in_polygon(np.array([[0.0, 0.0], [10.0, 10.0]]), poly)
        assert res.tolist() == [True, False]


class TestFitContourToMask:
    def disc_mask(self, grid, r, center=(0.0, 0.0)):
        pc = grid.pixel_centers().reshape(grid.nu, grid.nv, 2)
        return ((pc[..., 0] - center[0]) ** 2 + (pc[..., 1] - center[1]) ** 2) <= r ** 2

    def test_disc_round_trip_dice(self):
        grid = PlaneGrid.centered(40, 40, 1.0)
        m = self.disc_mask(grid, 10.0)
        c = fit_contour_to_mask(m, grid, n_seeds=12)
        assert dice(m, contour_to_mask(c, grid)) >= 0.98

    def test_largest_component_selected(self):
        grid = PlaneGrid.centered(60, 60, 1.0)
        big = self.disc_mask(grid, 12.0, center=(-12.0, 0.0))
        small = self.disc_mask(grid, 5.0, center=(18.0, 12.0))
        c = fit_contour_to_mask(big | small, grid)
        # fitted centroid must be in the big disc
        assert contour_centroid(c)[0] < 0

    def test_empty_mask(self):
        grid = PlaneGrid.centered(10, 10, 1.0)
        with pytest.raises(EmptyMask):
            fit_contour_to_mask(np.zeros((10, 10), dtype=bool), grid)

    def test_component_too_small(self):
        grid = PlaneGrid.centered(10, 10, 1.0)
        m = np.zeros((10, 10), dtype=bool)
        m[4:6, 4:6] = True
        with pytest.raises(ComponentTooSmall):
            fit_contour_to_mask(m, grid)

    def test_fit_rasterize_fit_stable(self):
        grid = PlaneGrid.centered(44, 44, 1.0)
        m = self.disc_mask(grid, 11.0, center=(0.4, -0.7))
        c1 = fit_contour_to_mask(m, grid)
        m1 = contour_to_mask(c1, grid)
        d1 = dice(m, m1)
        c2 = fit_contour_to_mask(m1, grid)
        d2 = dice(m1, contour_to_mask(c2, grid))
        assert abs(d1 - d2) < 0.005


class TestValidateAnnotation:
    def test_concentric_valid(self):
        a = SliceAnnotation(plane_id="p", lumen=circle_contour(12, 3.0),
                            wall=circle_contour(12, 4.0, role="outer_wall"))
        assert validate_annotation(a) == []

    def test_lumen_equals_wall_invalid(self):
        a = SliceAnnotation(plane_id="p", lumen=circle_contour(12, 4.0),
                            wall=circle_contour(12, 4.0, role="outer_wall"))
        assert "lumen not strictly inside wall" in validate_annotation(a)

    def test_figure_eight_detected(self):
        # segment-intersection oracle: a bowtie polygon must self-intersect
        seeds = np.array([[0, 0], [4, 4], [4, 0], [0, 4]], dtype=float)
        a = SliceAnnotation(plane_id="p",
                            lumen=ClosedSplineContour(seeds=seeds))
        assert any("self-intersecting" in v for v in validate_annotation(a))

    def test_unusable_allows_missing(self):
        a = SliceAnnotation(plane_id="p", usable=False)
        assert validate_annotation(a) == []
