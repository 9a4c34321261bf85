import math

import numpy as np
import pytest

from carotidkit.centerline import CrossSectionPlane, Frame
from carotidkit.biomarkers import vwt_profile
from carotidkit.errors import EmptyIsoSurface, IoFailure, NoUsableProfiles
from carotidkit.surface import (
    SurfaceMesh,
    edge_counts,
    export_mesh,
    import_mesh,
    is_closed_manifold,
    map_vwt_to_mesh,
    marching_cubes,
    mesh_to_json_dict,
)
from carotidkit.volume import Affine, BinaryMask

from tests.test_contours import circle_contour


def sphere_mask(radius_mm=10.0, voxel=0.5):
    n = int(2 * radius_mm / voxel) + 9
    c = (n - 1) / 2.0
    i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    r = np.sqrt((i - c) ** 2 + (j - c) ** 2 + (k - c) ** 2) * voxel
    return BinaryMask(dims=(n, n, n), affine=Affine.from_spacing((voxel,) * 3),
                      bits=r <= radius_mm)


def tube_mask(radius_mm=4.0, voxel=0.5, length_vox=40):
    n = int(2 * radius_mm / voxel) + 9
    c = (n - 1) / 2.0
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(length_vox),
                          indexing="ij")
    r = np.hypot(i - c, j - c) * voxel
    return BinaryMask(dims=(n, n, length_vox),
                      affine=Affine.from_spacing((voxel,) * 3),
                      bits=r <= radius_mm), c * voxel


class TestMarchingCubes:
    def test_sphere_area(self):
        # analytic sphere-area oracle: 4 pi r^2 = 400 pi
        mesh = marching_cubes(sphere_mask(10.0, 0.5))
        assert mesh.surface_area() == pytest.approx(400 * math.pi, rel=0.03)

    def test_closed_manifold(self):
        mesh = marching_cubes(sphere_mask(6.0, 0.5))
        assert is_closed_manifold(mesh)

    def test_euler_characteristic_genus_zero(self):
        mesh = marching_cubes(sphere_mask(5.0, 0.5))
        edges, _ = edge_counts(mesh)
        V, E, F = mesh.vertices.shape[0], edges.shape[0], mesh.triangles.shape[0]
        assert V - E + F == 2

    def test_outward_ccw(self):
        mesh = marching_cubes(sphere_mask(6.0, 0.5))
        assert mesh.signed_volume() > 0
        # smoothing pulls small spheres slightly inward; orientation is the point
        assert mesh.signed_volume() == pytest.approx(4 / 3 * math.pi * 216,
                                                     rel=0.08)

    def test_empty_surface(self):
        bits = np.zeros((8, 8, 8), dtype=bool)
        mask = BinaryMask(dims=(8, 8, 8), affine=Affine.identity(), bits=bits)
        with pytest.raises(EmptyIsoSurface):
            marching_cubes(mask)

    def test_no_degenerate_triangles(self):
        mesh = marching_cubes(sphere_mask(4.0, 0.5))
        assert (mesh.triangle_areas() > 1e-12).all()


def tube_planes_and_profiles(center_xy, lumen_r=3.0, wall_r=4.0, zs=(4.0, 8.0, 12.0)):
    planes, profiles = [], []
    f = Frame(tangent=np.array([0.0, 0, 1]), normal=np.array([1.0, 0, 0]),
              binormal=np.array([0, 1.0, 0]))
    for n, z in enumerate(zs):
        p = CrossSectionPlane(id=f"t-{n:03d}",
                              center=(center_xy, center_xy, z), frame=f,
                              arc_position=z - zs[0], fov=30.0,
                              in_plane_spacing=0.3)
        prof = vwt_profile(circle_contour(32, lumen_r),
                           circle_contour(32, wall_r, role="outer_wall"),
                           n_rays=36, plane_id=p.id)
        planes.append(p)
        profiles.append(prof)
    return planes, profiles


class TestMapVwt:
    def test_tube_constant_thickness(self):
        mask, cxy = tube_mask(radius_mm=4.0, voxel=0.5)
        mesh = marching_cubes(mask)
        planes, profiles = tube_planes_and_profiles(cxy)
        colored = map_vwt_to_mesh(mesh, planes, profiles)
        valid = np.isfinite(colored.scalars)
        assert valid.any()
        assert np.allclose(colored.scalars[valid], 1.0, atol=0.05)

    def test_single_plane_inherits(self):
        mask, cxy = tube_mask()
        mesh = marching_cubes(mask)
        planes, profiles = tube_planes_and_profiles(cxy, zs=(10.0,))
        colored = map_vwt_to_mesh(mesh, planes, profiles)
        valid = np.isfinite(colored.scalars)
        assert valid.any()
        assert np.allclose(colored.scalars[valid], 1.0, atol=0.05)

    def test_far_vertices_no_data(self):
        mask, cxy = tube_mask(length_vox=60)
        mesh = marching_cubes(mask)
        planes, profiles = tube_planes_and_profiles(cxy, zs=(2.0, 4.0))
        colored = map_vwt_to_mesh(mesh, planes, profiles)
        far = mesh.vertices[:, 2] > 12.0
        assert np.isnan(colored.scalars[far]).all()

    def test_scalars_within_profile_range(self):
        mask, cxy = tube_mask()
        mesh = marching_cubes(mask)
        planes, profiles = tube_planes_and_profiles(cxy)
        colored = map_vwt_to_mesh(mesh, planes, profiles)
        lo = min(p.thickness[p.valid].min() for p in profiles)
        hi = max(p.thickness[p.valid].max() for p in profiles)
        valid = colored.scalars[np.isfinite(colored.scalars)]
        assert (valid >= lo - 1e-12).all() and (valid <= hi + 1e-12).all()

    def test_no_profiles(self):
        mesh = marching_cubes(sphere_mask(4.0))
        with pytest.raises(NoUsableProfiles):
            map_vwt_to_mesh(mesh, [], [])


class TestPly:
    def test_round_trip_exact(self, tmp_path):
        mesh = marching_cubes(sphere_mask(4.0, 0.5))
        scal = np.linspace(0.0, 2.0, mesh.vertices.shape[0])
        mesh = SurfaceMesh(vertices=mesh.vertices, triangles=mesh.triangles,
                           scalars=scal, tag="inner_wall")
        path = tmp_path / "m.ply"
        export_mesh(mesh, path)
        back = import_mesh(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.array_equal(back.scalars, mesh.scalars)

    def test_no_scalars_no_quality(self, tmp_path):
        mesh = marching_cubes(sphere_mask(4.0, 0.5))
        path = tmp_path / "m.ply"
        export_mesh(mesh, path)
        header = path.read_bytes()[:400]
        assert b"quality" not in header
        back = import_mesh(path)
        assert back.scalars is None

    def test_unwritable_path(self):
        mesh = marching_cubes(sphere_mask(4.0, 0.5))
        with pytest.raises(IoFailure):
            export_mesh(mesh, "/nonexistent-dir/m.ply")

    def test_deterministic_bytes(self, tmp_path):
        mesh = marching_cubes(sphere_mask(5.0, 0.5))
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        export_mesh(mesh, p1)
        export_mesh(marching_cubes(sphere_mask(5.0, 0.5)), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestJson:
    def test_flat_arrays(self):
        mesh = marching_cubes(sphere_mask(4.0, 0.5))
        d = mesh_to_json_dict(mesh)
        assert len(d["positions"]) == 3 * mesh.vertices.shape[0]
        assert len(d["indices"]) == 3 * mesh.triangles.shape[0]
        assert d["scalars"] is None
