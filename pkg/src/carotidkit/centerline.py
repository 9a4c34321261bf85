"""Centerline extraction, twist-free frames, cross-section planes, curved MPR.

Frames are propagated with the double-reflection rotation-minimizing
construction rather than Frenet frames: Frenet is undefined on straight
segments and flips at inflections, which would spin the in-plane contour
coordinate system from slice to slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DegeneratePolyline, Disconnected, ParallelInitialNormal, SeedOutsideMask
from .volume import (
    Affine,
    BinaryMask,
    PlaneImage,
    ScalarVolume,
    sample_grid_many,
)

BRANCH_LABELS = ("CCA", "ICA", "ECA")


@dataclass(frozen=True)
class Centerline:
    """Arc-length-parameterized world-space polyline."""

    points: np.ndarray
    arc_lengths: np.ndarray
    branch_label: str = "CCA"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        arc = np.asarray(self.arc_lengths, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ValueError("centerline needs >= 2 3D points")
        if arc.shape != (pts.shape[0],) or arc[0] != 0.0:
            raise ValueError("arc_lengths must start at 0 and match points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0) or np.max(np.abs(np.diff(arc) - seg)) > 1e-9:
            raise ValueError("arc_lengths must be cumulative segment lengths")
        pts.setflags(write=False)
        arc.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "arc_lengths", arc)

    @classmethod
    def from_points(cls, points, branch_label: str = "CCA") -> "Centerline":
        pts = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 0])
        pts = pts[keep]
        if pts.shape[0] < 2:
            raise DegeneratePolyline("all points coincide")
        arc = np.concatenate([[0.0], np.cumsum(
            np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        return cls(points=pts, arc_lengths=arc, branch_label=branch_label)

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1])

    def point_at(self, arc: float) -> np.ndarray:
        """Point on the polyline at a given arc position (clamped to range)."""
        arc = float(np.clip(arc, 0.0, self.length))
        x = np.interp(arc, self.arc_lengths, self.points[:, 0])
        y = np.interp(arc, self.arc_lengths, self.points[:, 1])
        z = np.interp(arc, self.arc_lengths, self.points[:, 2])
        return np.array([x, y, z])

    def segment_index(self, arc: float) -> int:
        """Index i such that arc lies in [arc_lengths[i], arc_lengths[i+1])."""
        i = int(np.searchsorted(self.arc_lengths, arc, side="right") - 1)
        return min(max(i, 0), len(self.arc_lengths) - 2)


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal frame; tangent is the plane normal."""

    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tangent, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        b = np.asarray(self.binormal, dtype=np.float64)
        for v in (t, n, b):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError("frame vectors must be unit length")
        if (abs(t @ n) > 1e-9 or abs(t @ b) > 1e-9 or abs(n @ b) > 1e-9
                or np.linalg.norm(np.cross(t, n) - b) > 1e-9):
            raise ValueError("frame must be orthogonal and right-handed")
        for v in (t, n, b):
            v.setflags(write=False)
        object.__setattr__(self, "tangent", t)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "binormal", b)


@dataclass(frozen=True)
class CrossSectionPlane:
    """Perpendicular cross-section at a standardized arc position."""

    id: str
    center: np.ndarray
    frame: Frame
    arc_position: float
    fov: float
    in_plane_spacing: float

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=np.float64))

    @property
    def axes(self):
        """In-plane (u, v) axes; the plane normal is frame.tangent."""
        return self.frame.normal, self.frame.binormal

    def to_world(self, uv) -> np.ndarray:
        """Map in-plane (u,v) mm coordinates to world mm. Accepts (2,) or (n,2)."""
        uv = np.asarray(uv, dtype=np.float64)
        u, v = self.axes
        return self.center + np.outer(uv[..., 0].ravel(), u).reshape(*uv.shape[:-1], 3) \
            + np.outer(uv[..., 1].ravel(), v).reshape(*uv.shape[:-1], 3)


def resample_arclength(points, spacing: float, branch_label: str = "CCA") -> Centerline:
    """Resample a polyline at uniform arc spacing, keeping both endpoints.

    Output samples lie exactly on the input polyline; the last segment may be
    shorter than ``spacing``.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    base = Centerline.from_points(points, branch_label=branch_label)
    L = base.length
    positions = list(np.arange(0.0, L, spacing))
    if not positions or L - positions[-1] > 1e-9:
        positions.append(L)
    samples = np.stack([
        np.interp(positions, base.arc_lengths, base.points[:, i])
        for i in range(3)
    ], axis=1)
    return Centerline.from_points(samples, branch_label=branch_label)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def rmf_frames(c: Centerline, initial_normal=(1.0, 0.0, 0.0)) -> list[Frame]:
    """Rotation-minimizing frames along a centerline (double reflection).

    Tangents are normalized forward differences (the last sample reuses the
    final segment direction).  The initial normal is projected perpendicular
    to the first tangent; successive normals are transported with zero twist.
    """
    pts = c.points
    n = pts.shape[0]
    tangents = np.empty((n, 3))
    seg = np.diff(pts, axis=0)
    seg_dir = seg / np.linalg.norm(seg, axis=1)[:, None]
    tangents[:-1] = seg_dir
    tangents[-1] = seg_dir[-1]

    r = np.asarray(initial_normal, dtype=np.float64)
    r = r - (r @ tangents[0]) * tangents[0]
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        raise ParallelInitialNormal(
            "initial normal is parallel to the first tangent")
    r = r / nr

    normals = np.empty((n, 3))
    normals[0] = r
    for i in range(n - 1):
        v1 = pts[i + 1] - pts[i]
        c1 = v1 @ v1
        rl = normals[i] - (2.0 / c1) * (v1 @ normals[i]) * v1
        tl = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - tl
        c2 = v2 @ v2
        if c2 < 1e-24:
            ri = rl
        else:
            ri = rl - (2.0 / c2) * (v2 @ rl) * v2
        # re-orthogonalize against FP drift on long curves
        ri = ri - (ri @ tangents[i + 1]) * tangents[i + 1]
        normals[i + 1] = _normalize(ri)

    frames = []
    for i in range(n):
        t = _normalize(tangents[i])
        nn = _normalize(normals[i] - (normals[i] @ t) * t)
        b = np.cross(t, nn)
        frames.append(Frame(tangent=t, normal=nn, binormal=_normalize(b)))
    return frames


def frame_at_arc(c: Centerline, frames: list[Frame], arc: float) -> Frame:
    """Frame for an arbitrary arc position: the frame of its segment."""
    if arc >= c.length:
        return frames[-1]
    return frames[c.segment_index(arc)]


def cross_sections(c: Centerline, spacing: float, fov: float = 30.0,
                   in_plane_spacing: float = 0.3,
                   initial_normal=(1.0, 0.0, 0.0)) -> list[CrossSectionPlane]:
    """Cross-section planes at arc positions 0, spacing, 2*spacing, ...

    Plane normals are the local centerline tangents; ids are sequential and
    stable for fixed inputs.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    frames = rmf_frames(c, initial_normal)
    n_planes = int(np.floor((c.length + 1e-9) / spacing)) + 1
    planes = []
    for k in range(n_planes):
        arc = k * spacing
        planes.append(CrossSectionPlane(
            id=f"{c.branch_label}-{k:03d}",
            center=c.point_at(arc),
            frame=frame_at_arc(c, frames, arc),
            arc_position=arc,
            fov=float(fov),
            in_plane_spacing=float(in_plane_spacing),
        ))
    return planes


# ---------------------------------------------------------------------------
# centerline extraction from a binary mask
# ---------------------------------------------------------------------------

_NEIGHBOR_OFFSETS = np.array([
    (dx, dy, dz)
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
], dtype=np.intp)


def extract_centerline(mask: BinaryMask, start, end, smooth_window: int = 5,
                       branch_label: str = "CCA") -> Centerline:
    """Trace a medial path between two seed points through a binary mask.

    Minimal-cost 26-connected path where a step into voxel v costs
    ``step_length_mm / (1 + DT(v))**2`` (DT = Euclidean distance to
    background, mm).  The squared pull keeps the path on the medial axis.
    The voxel path is smoothed with a moving average (``smooth_window``
    samples, endpoints pinned) before conversion to a world polyline.
    """
    bits = mask.bits
    spacing = mask.affine.spacing
    sv = mask.affine.apply_inverse(np.asarray(start, dtype=np.float64))
    ev = mask.affine.apply_inverse(np.asarray(end, dtype=np.float64))
    si = tuple(np.rint(sv).astype(int))
    ei = tuple(np.rint(ev).astype(int))
    for name, idx in (("start", si), ("end", ei)):
        if (any(i < 0 for i in idx) or any(i >= d for i, d in zip(idx, bits.shape))
                or not bits[idx]):
            raise SeedOutsideMask(f"{name} seed {idx} is not a foreground voxel")

    dt = distance_transform_edt(bits, sampling=spacing)

    fg = np.flatnonzero(bits.ravel())
    ids = np.full(bits.size, -1, dtype=np.int64)
    ids[fg] = np.arange(fg.size)
    fg_idx = np.stack(np.unravel_index(fg, bits.shape), axis=1)

    rows, cols, costs = [], [], []
    dt_flat = dt.ravel()
    for off in _NEIGHBOR_OFFSETS:
        nb = fg_idx + off
        ok = np.all((nb >= 0) & (nb < np.array(bits.shape)), axis=1)
        nb_flat = np.ravel_multi_index(nb[ok].T, bits.shape)
        ok2 = ids[nb_flat] >= 0
        src = ids[fg[ok]][ok2]
        dst = ids[nb_flat[ok2]]
        step = np.linalg.norm(off * spacing)
        costs.append(step / (1.0 + dt_flat[nb_flat[ok2]]) ** 2)
        rows.append(src)
        cols.append(dst)
    graph = coo_matrix(
        (np.concatenate(costs), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fg.size, fg.size)).tocsr()

    s_id = ids[np.ravel_multi_index(si, bits.shape)]
    e_id = ids[np.ravel_multi_index(ei, bits.shape)]
    dist, pred = dijkstra(graph, directed=True, indices=s_id,
                          return_predecessors=True)
    if not np.isfinite(dist[e_id]):
        raise Disconnected("seeds lie in separate mask components")

    path = [e_id]
    while path[-1] != s_id:
        path.append(pred[path[-1]])
    path = np.asarray(path[::-1])
    vox = fg_idx[path].astype(np.float64)

    if smooth_window > 1 and len(vox) >= smooth_window:
        half = smooth_window // 2
        sm = vox.copy()
        csum = np.cumsum(np.vstack([np.zeros(3), vox]), axis=0)
        for i in range(half, len(vox) - half):
            sm[i] = (csum[i + half + 1] - csum[i - half]) / smooth_window
        vox = sm

    world = mask.affine.apply(vox)
    return Centerline.from_points(world, branch_label=branch_label)


# ---------------------------------------------------------------------------
# curved multiplanar reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvedMpr:
    """Straightened curved-MPR panel.

    Row r is arc position r*spacing; columns sample along the RMF normal over
    [-width/2, +width/2].  ``overlay`` (if any) is a mask panel sampled with
    nearest-neighbor at the very same coordinates (shared ``coords`` array).
    """

    values: np.ndarray
    inside: np.ndarray
    coords: np.ndarray
    arc_positions: np.ndarray
    lateral_offsets: np.ndarray
    spacing: float
    overlay: np.ndarray | None = None


def curved_mpr(vol: ScalarVolume, c: Centerline, width: float, spacing: float,
               overlay: BinaryMask | None = None,
               initial_normal=(1.0, 0.0, 0.0)) -> CurvedMpr:
    """Straightened CPR panel of a volume along a centerline."""
    if width <= 0:
        raise ValueError("width must be positive")
    frames = rmf_frames(c, initial_normal)
    n_rows = int(np.floor((c.length + 1e-9) / spacing)) + 1
    n_cols = max(1, int(round(width / spacing)))
    offsets = (np.arange(n_cols) - n_cols / 2.0) * spacing

    coords = np.empty((n_rows, n_cols, 3))
    arcs = np.empty(n_rows)
    for r in range(n_rows):
        arc = r * spacing
        arcs[r] = arc
        center = c.point_at(arc)
        normal = frame_at_arc(c, frames, arc).normal
        coords[r] = center[None, :] + offsets[:, None] * normal[None, :]

    flat = coords.reshape(-1, 3)
    vals, inside = sample_grid_many(vol.frame(), vol.affine, flat, mode="trilinear")
    panel = vals.reshape(n_rows, n_cols)
    inside = inside.reshape(n_rows, n_cols)

    overlay_panel = None
    if overlay is not None:
        ovals, oin = sample_grid_many(overlay.bits, overlay.affine, flat,
                                      mode="nearest")
        overlay_panel = (ovals.astype(bool) & oin).reshape(n_rows, n_cols)

    return CurvedMpr(values=panel, inside=inside, coords=coords,
                     arc_positions=arcs, lateral_offsets=offsets,
                     spacing=float(spacing), overlay=overlay_panel)
