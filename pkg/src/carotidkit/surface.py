"""Surface extraction and vessel-wall-thickness mapping for the 3D views.

Binary masks are softened with a 1-voxel Gaussian before iso-extraction:
midpoint marching cubes on raw 0/1 data produces staircase surfaces whose
area overshoots analytic values by ~9%, while the smoothed field recovers
subvoxel crossings (sphere-area error well under 1%).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from skimage import measure

from .centerline import CrossSectionPlane
from .errors import EmptyIsoSurface, IoFailure, NoUsableProfiles
from .volume import BinaryMask, ScalarVolume

MESH_TAGS = ("inner_wall", "outer_wall", "pcmra")
BINARY_SMOOTH_SIGMA = 1.0  # voxels

NO_DATA = math.nan


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh in world mm; triangles wind counter-clockwise outward."""

    vertices: np.ndarray
    triangles: np.ndarray
    scalars: np.ndarray | None = None
    tag: str = "outer_wall"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise ValueError("triangle indices out of range")
        if self.tag not in MESH_TAGS:
            raise ValueError(f"unknown mesh tag {self.tag!r}")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.scalars is not None:
            s = np.asarray(self.scalars, dtype=np.float64).reshape(-1)
            if s.shape[0] != v.shape[0]:
                raise ValueError("scalars must be per-vertex")
            s.setflags(write=False)
            object.__setattr__(self, "scalars", s)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def marching_cubes(source: BinaryMask | ScalarVolume, iso: float = 0.5,
                   tag: str = "outer_wall") -> SurfaceMesh:
    """Extract the iso-surface of a mask or scalar volume as a world-space mesh."""
    if isinstance(source, BinaryMask):
        grid = gaussian_filter(source.bits.astype(np.float64),
                               BINARY_SMOOTH_SIGMA)
        affine = source.affine
    else:
        grid = np.asarray(source.frame(), dtype=np.float64)
        affine = source.affine
    if min(grid.shape) < 2:
        raise ValueError("marching cubes needs a grid of at least 2^3")
    if not (grid.min() < iso < grid.max()):
        raise EmptyIsoSurface(f"no iso crossing at {iso}")
    verts, faces, _, _ = measure.marching_cubes(grid, iso,
                                                allow_degenerate=False)
    world = affine.apply(verts)
    mesh = SurfaceMesh(vertices=world, triangles=faces.astype(np.int64), tag=tag)
    if mesh.signed_volume() < 0:
        mesh = SurfaceMesh(vertices=world,
                           triangles=faces[:, ::-1].astype(np.int64), tag=tag)
    areas = mesh.triangle_areas()
    keep = areas > 1e-12
    if not keep.all():
        mesh = SurfaceMesh(vertices=mesh.vertices,
                           triangles=mesh.triangles[keep], tag=tag)
    return mesh


def edge_counts(mesh: SurfaceMesh):
    """Unique undirected edges and how many triangles share each."""
    t = mesh.triangles
    e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_closed_manifold(mesh: SurfaceMesh) -> bool:
    _, counts = edge_counts(mesh)
    return bool((counts == 2).all())


def map_vwt_to_mesh(mesh: SurfaceMesh, planes: list, profiles: list,
                    max_distance: float | None = None) -> SurfaceMesh:
    """Color mesh vertices with the nearest plane's nearest-angle thickness.

    ``planes`` and ``profiles`` are parallel lists (usable slices only).
    Vertices farther than ``max_distance`` from every plane center (default
    twice the median plane spacing) carry the NaN no-data sentinel.
    """
    if len(planes) == 0 or len(planes) != len(profiles):
        raise NoUsableProfiles("need >= 1 (plane, profile) pair")
    centers = np.stack([p.center for p in planes])
    if max_distance is None:
        if len(planes) > 1:
            arcs = np.sort([p.arc_position for p in planes])
            max_distance = 2.0 * float(np.median(np.diff(arcs)))
        else:
            max_distance = 2.0 * planes[0].fov

    tree = cKDTree(centers)
    dist, idx = tree.query(mesh.vertices)
    scalars = np.full(mesh.vertices.shape[0], NO_DATA)
    for k, (plane, profile) in enumerate(zip(planes, profiles)):
        sel = (idx == k) & (dist <= max_distance)
        if not sel.any():
            continue
        rel = mesh.vertices[sel] - plane.center
        u = rel @ plane.frame.normal - profile.centroid[0]
        v = rel @ plane.frame.binormal - profile.centroid[1]
        ang = np.arctan2(v, u) % (2 * np.pi)
        n_rays = profile.angles.shape[0]
        ray = np.rint(ang / (2 * np.pi / n_rays)).astype(int) % n_rays
        scalars[sel] = profile.thickness[ray]
    return SurfaceMesh(vertices=mesh.vertices, triangles=mesh.triangles,
                       scalars=scalars, tag="inner_wall")


# ---------------------------------------------------------------------------
# PLY export / import (binary little-endian, double precision)
# ---------------------------------------------------------------------------

def export_mesh(mesh: SurfaceMesh, path) -> None:
    """Binary little-endian PLY; the per-vertex 'quality' property carries
    the scalar (omitted when the mesh has none).  Doubles keep the round
    trip bit-exact."""
    has_q = mesh.scalars is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.vertices.shape[0]}",
              "property double x", "property double y", "property double z"]
    if has_q:
        header.append("property double quality")
    header += [f"element face {mesh.triangles.shape[0]}",
               "property list uchar int32 vertex_indices", "end_header"]
    vdata = mesh.vertices if not has_q \
        else np.column_stack([mesh.vertices, mesh.scalars])
    n_tri = mesh.triangles.shape[0]
    fdata = np.empty(n_tri, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = mesh.triangles.astype("<i4")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(vdata.astype("<f8").tobytes())
            f.write(fdata.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def import_mesh(path) -> SurfaceMesh:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IoFailure("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    n_vert = n_face = 0
    vprops = []
    element = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            vprops.append((parts[-1], parts[1]))
    width = sum(8 if kind == "double" else 4 for _, kind in vprops)
    varr = np.frombuffer(body[:n_vert * width], dtype="<f8").reshape(n_vert, -1)
    names = [name for name, _ in vprops]
    vertices = varr[:, [names.index("x"), names.index("y"), names.index("z")]]
    scalars = varr[:, names.index("quality")] if "quality" in names else None
    fbody = body[n_vert * width:]
    fdata = np.frombuffer(fbody, dtype=[("n", "u1"), ("idx", "<i4", (3,))],
                          count=n_face)
    return SurfaceMesh(vertices=vertices, triangles=fdata["idx"].astype(np.int64),
                       scalars=scalars)


def mesh_to_json_dict(mesh: SurfaceMesh) -> dict:
    """Flat-array mesh payload for the web viewer (NaN -> null sentinel)."""
    scalars = None
    if mesh.scalars is not None:
        scalars = [None if math.isnan(s) else float(s) for s in mesh.scalars]
    return {
        "tag": mesh.tag,
        "positions": [float(x) for x in mesh.vertices.ravel()],
        "indices": [int(i) for i in mesh.triangles.ravel()],
        "scalars": scalars,
    }
