"""Immutable volumetric data model with world-space sampling.

Conventions used throughout the toolkit:

* world coordinates in millimeters,
* time in milliseconds,
* velocities in m/s (1 mm/ms == 1 m/s, so advection needs no unit factors),
* voxel indices are continuous; the affine maps index -> world mm.

Out-of-bounds sampling returns the :data:`OUTSIDE` sentinel instead of
clamping, so downstream consumers (pathline termination in particular) can
distinguish "left the data" from "zero signal".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonOrthonormalAxes

# Tolerance for "on the grid boundary" tests; points this far outside are
# still clamped onto the boundary so exact edge coordinates survive FP noise.
_EDGE_TOL = 1e-9


class Outside:
    """Sentinel type for samples taken beyond the voxel grid."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUTSIDE"


OUTSIDE = Outside()


def is_outside(value) -> bool:
    return value is OUTSIDE


@dataclass(frozen=True)
class Affine:
    """Homogeneous 4x4 transform mapping continuous voxel index -> world mm."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine upper-left 3x3 is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_inv", np.linalg.inv(m))

    @classmethod
    def identity(cls) -> "Affine":
        return cls(np.eye(4))

    @classmethod
    def from_spacing(cls, spacing, origin=(0.0, 0.0, 0.0)) -> "Affine":
        m = np.eye(4)
        m[0, 0], m[1, 1], m[2, 2] = spacing
        m[:3, 3] = origin
        return cls(m)

    @property
    def spacing(self) -> np.ndarray:
        """Per-axis voxel size in mm (column norms of the linear part)."""
        return np.linalg.norm(self.matrix[:3, :3], axis=0)

    def apply(self, voxel) -> np.ndarray:
        """Map continuous voxel coordinates to world mm. Accepts (3,) or (n,3)."""
        v = np.asarray(voxel, dtype=np.float64)
        return v @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def apply_inverse(self, world) -> np.ndarray:
        w = np.asarray(world, dtype=np.float64)
        return w @ self._inv[:3, :3].T + self._inv[:3, 3]


def voxel_to_world(voxel, affine: Affine) -> np.ndarray:
    return affine.apply(voxel)


def world_to_voxel(world, affine: Affine) -> np.ndarray:
    return affine.apply_inverse(world)


def _as_float_grid(values, dims, n_times=None):
    v = np.asarray(values, dtype=np.float64)
    expect = tuple(dims) if n_times is None else (n_times, *dims)
    if v.shape != expect:
        raise ValueError(f"grid shape {v.shape} != expected {expect}")
    return v


@dataclass(frozen=True)
class ScalarVolume:
    """3D (optionally time-indexed) intensity grid in a world affine frame.

    ``values`` has shape ``dims`` for static volumes or ``(nt, *dims)`` when
    ``time_axis`` is given. Axis order is (x, y, z) matching the affine.
    """

    dims: tuple
    spacing: tuple
    affine: Affine
    values: np.ndarray
    time_axis: tuple | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive ints, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        nt = len(self.time_axis) if self.time_axis is not None else None
        values = _as_float_grid(self.values, dims, nt)
        values.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)
        if self.time_axis is not None:
            object.__setattr__(self, "time_axis", tuple(float(t) for t in self.time_axis))

    def frame(self, index: int = 0) -> np.ndarray:
        """The 3D grid of one timepoint (or the whole grid when static)."""
        return self.values if self.time_axis is None else self.values[index]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean voxel grid sharing the affine convention of ScalarVolume."""

    dims: tuple
    affine: Affine
    bits: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != dims:
            raise ValueError(f"bits shape {bits.shape} != dims {dims}")
        bits.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bits", bits)

    @property
    def spacing(self) -> np.ndarray:
        return self.affine.spacing


@dataclass(frozen=True)
class VelocityField:
    """Time-resolved 3-component velocity grid (m/s), periodic over a cycle.

    ``components`` has shape ``(nt, nx, ny, nz, 3)``. ``timepoints`` are the
    frame times in ms (strictly increasing); the field repeats with period
    ``cycle_length`` (the segment from the last frame wraps to the first).
    """

    dims: tuple
    affine: Affine
    timepoints: tuple
    cycle_length: float
    components: np.ndarray
    venc: float

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        tp = tuple(float(t) for t in self.timepoints)
        if len(tp) < 2:
            raise ValueError("velocity field needs >= 2 timepoints")
        if any(b <= a for a, b in zip(tp, tp[1:])):
            raise ValueError("timepoints must be strictly increasing")
        cyc = float(self.cycle_length)
        if cyc < tp[-1]:
            raise ValueError("cycle_length must be >= last timepoint")
        comp = np.asarray(self.components, dtype=np.float64)
        if comp.shape != (len(tp), *dims, 3):
            raise ValueError(
                f"components shape {comp.shape} != {(len(tp), *dims, 3)}")
        comp.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "timepoints", tp)
        object.__setattr__(self, "cycle_length", cyc)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "venc", float(self.venc))

    def time_bracket(self, t_ms: float):
        """Reduce t into the cycle and return (i0, i1, w) frame interp weights.

        The reduction uses fmod so that t and t + k*cycle_length give
        bit-identical results whenever t + k*cycle_length is exactly
        representable.
        """
        tr = np.fmod(t_ms, self.cycle_length)
        if tr < 0.0:
            tr += self.cycle_length
        tp = self.timepoints
        if tr < tp[0] or tr >= tp[-1]:
            # wrap segment: last frame -> first frame of the next cycle
            gap = self.cycle_length - tp[-1] + tp[0]
            if gap <= 0.0:
                return len(tp) - 1, 0, 0.0
            dt = tr - tp[-1] if tr >= tp[-1] else tr - tp[-1] + self.cycle_length
            return len(tp) - 1, 0, dt / gap
        i1 = int(np.searchsorted(tp, tr, side="right"))
        i0 = i1 - 1
        if i1 == len(tp):
            return i0, i0, 0.0
        w = (tr - tp[i0]) / (tp[i1] - tp[i0])
        return i0, i1, w


# ---------------------------------------------------------------------------
# sampling kernels
# ---------------------------------------------------------------------------

def _inside_mask(coords: np.ndarray, dims) -> np.ndarray:
    ok = np.ones(coords.shape[0], dtype=bool)
    for ax, n in enumerate(dims):
        c = coords[:, ax]
        ok &= (c >= -_EDGE_TOL) & (c <= n - 1 + _EDGE_TOL)
    return ok


def _trilinear_gather(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Separable linear interpolation of grid at (m,3) in-bounds voxel coords.

    grid may be (nx,ny,nz) or (nx,ny,nz,c); returns (m,) or (m,c).
    """
    nx, ny, nz = grid.shape[:3]
    cx = np.clip(coords[:, 0], 0.0, nx - 1)
    cy = np.clip(coords[:, 1], 0.0, ny - 1)
    cz = np.clip(coords[:, 2], 0.0, nz - 1)
    x0 = np.minimum(np.floor(cx).astype(np.intp), max(nx - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.intp), max(ny - 2, 0))
    z0 = np.minimum(np.floor(cz).astype(np.intp), max(nz - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0
    if grid.ndim == 4:
        fx = fx[:, None]
        fy = fy[:, None]
        fz = fz[:, None]

    c000 = grid[x0, y0, z0]
    c100 = grid[x1, y0, z0]
    c010 = grid[x0, y1, z0]
    c110 = grid[x1, y1, z0]
    c001 = grid[x0, y0, z1]
    c101 = grid[x1, y0, z1]
    c011 = grid[x0, y1, z1]
    c111 = grid[x1, y1, z1]

    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    return c0 + (c1 - c0) * fz


def _nearest_gather(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    nx, ny, nz = grid.shape[:3]
    ix = np.clip(np.rint(coords[:, 0]).astype(np.intp), 0, nx - 1)
    iy = np.clip(np.rint(coords[:, 1]).astype(np.intp), 0, ny - 1)
    iz = np.clip(np.rint(coords[:, 2]).astype(np.intp), 0, nz - 1)
    return grid[ix, iy, iz]


def sample_grid_many(grid: np.ndarray, affine: Affine, points: np.ndarray,
                     mode: str = "trilinear"):
    """Sample a voxel grid at (m,3) world points.

    Returns (values, inside); values are 0 (or False) where outside.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    coords = affine.apply_inverse(pts)
    inside = _inside_mask(coords, grid.shape[:3])
    if mode == "trilinear":
        vals = _trilinear_gather(grid.astype(np.float64, copy=False), coords)
    elif mode == "nearest":
        vals = _nearest_gather(grid, coords)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if vals.ndim == 1:
        vals = np.where(inside, vals, 0 if vals.dtype == bool else 0.0)
    else:
        vals = np.where(inside[:, None], vals, 0.0)
    return vals, inside


def sample_scalar(vol: ScalarVolume, point, mode: str = "trilinear",
                  time_index: int = 0):
    """Sample one world point; returns the value or OUTSIDE."""
    vals, inside = sample_grid_many(vol.frame(time_index), vol.affine,
                                    np.asarray(point, dtype=np.float64)[None, :],
                                    mode=mode)
    if not inside[0]:
        return OUTSIDE
    return float(vals[0])


def sample_mask(mask: BinaryMask, point) -> bool:
    """Nearest-neighbor mask lookup; False outside the grid."""
    vals, inside = sample_grid_many(mask.bits, mask.affine,
                                    np.asarray(point, dtype=np.float64)[None, :],
                                    mode="nearest")
    return bool(vals[0]) and bool(inside[0])


def sample_mask_many(mask: BinaryMask, points: np.ndarray) -> np.ndarray:
    vals, inside = sample_grid_many(mask.bits, mask.affine, points, mode="nearest")
    return vals.astype(bool) & inside


def sample_velocity_many(field: VelocityField, points: np.ndarray, t_ms: float):
    """Sample velocity (m/s) at (m,3) world points and a shared time.

    Trilinear in space, linear in time, periodic in the cardiac cycle.
    Returns (velocities (m,3), inside (m,)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    i0, i1, w = field.time_bracket(t_ms)
    coords = field.affine.apply_inverse(pts)
    inside = _inside_mask(coords, field.dims)
    v0 = _trilinear_gather(field.components[i0], coords)
    if i1 == i0 or w == 0.0:
        v = v0
    else:
        v1 = _trilinear_gather(field.components[i1], coords)
        v = v0 + (v1 - v0) * w
    v = np.where(inside[:, None], v, 0.0)
    return v, inside


def sample_velocity(field: VelocityField, point, t_ms: float):
    """Sample one world point at time t; returns (3,) m/s or OUTSIDE."""
    v, inside = sample_velocity_many(field, np.asarray(point, dtype=np.float64)[None, :], t_ms)
    if not inside[0]:
        return OUTSIDE
    return v[0]


# ---------------------------------------------------------------------------
# oblique plane resampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneImage:
    """Result of resampling a volume on an oblique plane.

    ``values[i, j]`` corresponds to the world point
    ``center + (i - nx/2)*spacing*axis_u + (j - ny/2)*spacing*axis_v``.
    """

    values: np.ndarray
    inside: np.ndarray
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    spacing: float
    coords: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self):
        return self.values.shape


def plane_grid_points(center, axis_u, axis_v, extent, spacing: float):
    """World coordinates of the pixel grid used by resample_plane.

    Returns (points (nx*ny,3), nx, ny) with pixel (i, j) at row-major index.
    """
    center = np.asarray(center, dtype=np.float64)
    au = np.asarray(axis_u, dtype=np.float64)
    av = np.asarray(axis_v, dtype=np.float64)
    ext_u, ext_v = float(extent[0]), float(extent[1])
    nx = max(1, int(round(ext_u / spacing)))
    ny = max(1, int(round(ext_v / spacing)))
    i = (np.arange(nx) - nx / 2.0) * spacing
    j = (np.arange(ny) - ny / 2.0) * spacing
    pts = (center[None, None, :]
           + i[:, None, None] * au[None, None, :]
           + j[None, :, None] * av[None, None, :])
    return pts.reshape(-1, 3), nx, ny


def _check_orthonormal(axis_u, axis_v, tol=1e-6):
    au = np.asarray(axis_u, dtype=np.float64)
    av = np.asarray(axis_v, dtype=np.float64)
    if (abs(np.linalg.norm(au) - 1.0) > tol or abs(np.linalg.norm(av) - 1.0) > tol
            or abs(float(np.dot(au, av))) > tol):
        raise NonOrthonormalAxes(
            "plane axes must be orthonormal unit vectors (tol 1e-6)")
    return au, av


def resample_plane(vol: ScalarVolume, center, axes, extent, spacing: float,
                   mode: str = "trilinear", time_index: int = 0) -> PlaneImage:
    """Resample a volume on an oblique plane into a 2D image.

    ``axes`` is a pair of orthonormal in-plane unit vectors, ``extent`` the
    field of view in mm along each axis.  Pixels whose world point maps
    outside the voxel grid are zero with ``inside`` False.
    """
    au, av = _check_orthonormal(axes[0], axes[1])
    pts, nx, ny = plane_grid_points(center, au, av, extent, spacing)
    vals, inside = sample_grid_many(vol.frame(time_index), vol.affine, pts, mode=mode)
    return PlaneImage(
        values=vals.reshape(nx, ny),
        inside=inside.reshape(nx, ny),
        center=np.asarray(center, dtype=np.float64),
        axis_u=au, axis_v=av, spacing=float(spacing),
        coords=pts.reshape(nx, ny, 3),
    )


def resample_mask_plane(mask: BinaryMask, center, axes, extent, spacing: float):
    """Nearest-neighbor mask resampling on the same pixel grid as resample_plane."""
    au, av = _check_orthonormal(axes[0], axes[1])
    pts, nx, ny = plane_grid_points(center, au, av, extent, spacing)
    vals, inside = sample_grid_many(mask.bits, mask.affine, pts, mode="nearest")
    bits = vals.astype(bool) & inside
    return PlaneImage(
        values=bits.reshape(nx, ny),
        inside=inside.reshape(nx, ny),
        center=np.asarray(center, dtype=np.float64),
        axis_u=au, axis_v=av, spacing=float(spacing),
        coords=pts.reshape(nx, ny, 3),
    )
