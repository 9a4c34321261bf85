"""Editable closed spline contours on cross-section planes.

Contours are defined by ordered seed points in plane coordinates (u, v) mm
relative to the plane center and densified with a closed centripetal
Catmull-Rom spline (alpha = 0.5): interpolating, so seeds double as drag
handles, and resistant to cusps and loops between seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import (
    ComponentTooSmall,
    EmptyMask,
    GridTooSmall,
    IndexOutOfRange,
    MinimumSeeds,
    TooFewSeeds,
)

ROLES = ("lumen", "outer_wall")
SOURCES = ("manual", "auto", "auto_corrected")

DENSIFY_SPP = 32  # samples per segment used for area/mask/validation work


@dataclass(frozen=True)
class ClosedSplineContour:
    """Ordered seed points of a closed spline contour."""

    seeds: np.ndarray
    role: str = "lumen"

    def __post_init__(self):
        seeds = np.asarray(self.seeds, dtype=np.float64)
        if seeds.ndim != 2 or seeds.shape[1] != 2:
            raise TooFewSeeds("seeds must be an (n, 2) array")
        if seeds.shape[0] < 3:
            raise TooFewSeeds(f"need >= 3 seeds, got {seeds.shape[0]}")
        if not np.all(np.isfinite(seeds)):
            raise ValueError("seed coordinates must be finite")
        if self.role not in ROLES:
            raise ValueError(f"unknown contour role {self.role!r}")
        seeds.setflags(write=False)
        object.__setattr__(self, "seeds", seeds)

    @property
    def n_seeds(self) -> int:
        return self.seeds.shape[0]


@dataclass(frozen=True)
class SliceAnnotation:
    """One cross-section's lumen/wall contours plus review flags."""

    plane_id: str
    lumen: ClosedSplineContour | None = None
    wall: ClosedSplineContour | None = None
    usable: bool = True
    source: str = "manual"
    timepoint: float | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def contour(self, role: str) -> ClosedSplineContour | None:
        return self.lumen if role == "lumen" else self.wall


def _catmull_rom_knots(pts: np.ndarray) -> np.ndarray:
    # centripetal parameterization: knot step = |dP|^0.5
    d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(np.maximum(np.sqrt(d), 1e-12))])


def evaluate_contour(c: ClosedSplineContour, samples_per_segment: int = DENSIFY_SPP) -> np.ndarray:
    """Densify a contour to a closed polyline of n_seeds * spp points.

    The polyline passes through every seed exactly (each segment starts at
    its seed); the closing edge back to the first point is implicit.
    """
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    seeds = c.seeds
    n = seeds.shape[0]
    out = np.empty((n * samples_per_segment, 2))
    for i in range(n):
        window = seeds[[(i - 1) % n, i, (i + 1) % n, (i + 2) % n]]
        t = _catmull_rom_knots(window)
        t0, t1, t2, t3 = t
        s = t1 + (t2 - t1) * np.arange(samples_per_segment) / samples_per_segment
        s = s[:, None]
        p0, p1, p2, p3 = (w[None, :] for w in window)
        a1 = (t1 - s) / (t1 - t0) * p0 + (s - t0) / (t1 - t0) * p1
        a2 = (t2 - s) / (t2 - t1) * p1 + (s - t1) / (t2 - t1) * p2
        a3 = (t3 - s) / (t3 - t2) * p2 + (s - t2) / (t3 - t2) * p3
        b1 = (t2 - s) / (t2 - t0) * a1 + (s - t0) / (t2 - t0) * a2
        b2 = (t3 - s) / (t3 - t1) * a2 + (s - t1) / (t3 - t1) * a3
        seg = (t2 - s) / (t2 - t1) * b1 + (s - t1) / (t2 - t1) * b2
        seg[0] = seeds[i]  # exact interpolation at the seed
        out[i * samples_per_segment:(i + 1) * samples_per_segment] = seg
    return out


def polygon_area(poly: np.ndarray) -> float:
    """Unsigned shoelace area of a closed polyline (mm^2)."""
    x, y = poly[:, 0], poly[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))) / 2.0


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = float(np.sum(cross)) / 2.0
    if abs(a) < 1e-15:
        return poly.mean(axis=0)
    cx = float(np.sum((x + np.roll(x, -1)) * cross)) / (6.0 * a)
    cy = float(np.sum((y + np.roll(y, -1)) * cross)) / (6.0 * a)
    return np.array([cx, cy])


def contour_area(c: ClosedSplineContour, samples_per_segment: int = DENSIFY_SPP) -> float:
    return polygon_area(evaluate_contour(c, max(samples_per_segment, DENSIFY_SPP)))


def contour_centroid(c: ClosedSplineContour, samples_per_segment: int = DENSIFY_SPP) -> np.ndarray:
    return polygon_centroid(evaluate_contour(c, max(samples_per_segment, DENSIFY_SPP)))


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd (crossing number) point-in-polygon test, vectorized."""
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1 = np.roll(poly[:, 0], -1)[None, :]
    y1 = np.roll(poly[:, 1], -1)[None, :]
    crosses = (y0 <= y) != (y1 <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    hits = crosses & (xint > x)
    return (hits.sum(axis=1) % 2).astype(bool)


# ---------------------------------------------------------------------------
# rasterization grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneGrid:
    """Pixel grid in plane coordinates; pixel (i, j) center at origin + (i, j)*spacing."""

    nu: int
    nv: int
    spacing: float
    origin: tuple

    @classmethod
    def centered(cls, nu: int, nv: int, spacing: float) -> "PlaneGrid":
        return cls(nu, nv, spacing,
                   (-(nu - 1) / 2.0 * spacing, -(nv - 1) / 2.0 * spacing))

    def pixel_centers(self) -> np.ndarray:
        u = self.origin[0] + np.arange(self.nu) * self.spacing
        v = self.origin[1] + np.arange(self.nv) * self.spacing
        uu, vv = np.meshgrid(u, v, indexing="ij")
        return np.stack([uu.ravel(), vv.ravel()], axis=1)

    def to_plane(self, pixels: np.ndarray) -> np.ndarray:
        """Continuous pixel indices -> plane mm coordinates."""
        return np.asarray(self.origin) + np.asarray(pixels, dtype=np.float64) * self.spacing

    @property
    def bounds(self):
        """(lo, hi) of the covered region (pixel cells, not centers)."""
        lo = np.asarray(self.origin) - self.spacing / 2.0
        hi = np.asarray(self.origin) + np.array([self.nu - 1, self.nv - 1]) * self.spacing \
            + self.spacing / 2.0
        return lo, hi


def contour_to_mask(c: ClosedSplineContour, grid: PlaneGrid,
                    samples_per_segment: int = DENSIFY_SPP) -> np.ndarray:
    """Even-odd rasterization of the densified contour, pixel-center inclusion."""
    poly = evaluate_contour(c, max(samples_per_segment, DENSIFY_SPP))
    lo, hi = grid.bounds
    if (poly.min(axis=0) < lo).any() or (poly.max(axis=0) > hi).any():
        raise GridTooSmall("contour bounding box exceeds the raster grid")
    inside = points_in_polygon(grid.pixel_centers(), poly)
    return inside.reshape(grid.nu, grid.nv)


# ---------------------------------------------------------------------------
# mask -> contour fitting
# ---------------------------------------------------------------------------

# Moore neighborhood in scan order (fixed rotation); (du, dv) pairs
_MOORE = np.array([(-1, 0), (-1, 1), (0, 1), (1, 1),
                   (1, 0), (1, -1), (0, -1), (-1, -1)], dtype=int)
_MOORE_INDEX = {tuple(d): i for i, d in enumerate(_MOORE)}

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _moore_trace(comp: np.ndarray) -> np.ndarray:
    """Ordered boundary pixels of a connected component (Moore tracing,
    Jacob's stopping criterion)."""
    pixels = np.argwhere(comp)
    start = tuple(pixels[np.lexsort((pixels[:, 1], pixels[:, 0]))[0]])
    backtrack = (start[0] - 1, start[1])

    def next_on_boundary(p, b):
        k = _MOORE_INDEX[(b[0] - p[0], b[1] - p[1])]
        for step in range(1, 9):
            d = _MOORE[(k + step) % 8]
            q = (p[0] + d[0], p[1] + d[1])
            if 0 <= q[0] < comp.shape[0] and 0 <= q[1] < comp.shape[1] and comp[q]:
                prev = _MOORE[(k + step - 1) % 8]
                return q, (p[0] + prev[0], p[1] + prev[1])
        return None, None  # isolated pixel

    boundary = [start]
    p, b = next_on_boundary(start, backtrack)
    if p is None:
        return pixels.astype(np.float64)
    first_move = (p, b)
    guard = 4 * comp.sum() + 8
    while True:
        boundary.append(p)
        p, b = next_on_boundary(p, b)
        if (p, b) == first_move or len(boundary) > guard:
            break
    return np.asarray(boundary, dtype=np.float64)


def _equal_arc_seeds(poly: np.ndarray, n_seeds: int) -> np.ndarray:
    closed = np.vstack([poly, poly[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    targets = total * np.arange(n_seeds) / n_seeds
    u = np.interp(targets, arc, closed[:, 0])
    v = np.interp(targets, arc, closed[:, 1])
    return np.stack([u, v], axis=1)


def fit_contour_to_mask(mask2d: np.ndarray, grid: PlaneGrid, n_seeds: int = 12,
                        role: str = "lumen", sigma: float = 2.0) -> ClosedSplineContour:
    """Fit a spline contour to the largest 4-connected foreground component.

    Moore-neighbor boundary tracing, circular Gaussian smoothing of the
    boundary coordinates (sigma in boundary samples), then seeds at equal
    arc length.  Traced boundaries follow pixel centers, which sit about
    half a pixel inside the true region edge and shrink further under
    smoothing, so the polyline is rescaled about its centroid to match the
    component's pixel-count area before seeding.
    """
    if n_seeds < 3:
        raise TooFewSeeds("need >= 3 seeds")
    bits = np.asarray(mask2d, dtype=bool)
    if not bits.any():
        raise EmptyMask("mask has no foreground")
    labels, n_comp = ndimage.label(bits, structure=_FOUR_CONNECTED)
    sizes = ndimage.sum_labels(bits, labels, index=np.arange(1, n_comp + 1))
    biggest = int(np.argmax(sizes)) + 1
    if sizes[biggest - 1] < 9:
        raise ComponentTooSmall(
            f"largest component has {int(sizes[biggest - 1])} px (< 9)")
    comp = labels == biggest

    boundary_px = _moore_trace(comp)
    boundary = grid.to_plane(boundary_px)
    if sigma > 0 and boundary.shape[0] > 4:
        boundary = np.stack([
            ndimage.gaussian_filter1d(boundary[:, 0], sigma, mode="wrap"),
            ndimage.gaussian_filter1d(boundary[:, 1], sigma, mode="wrap"),
        ], axis=1)

    target_area = float(comp.sum()) * grid.spacing ** 2
    area = polygon_area(boundary)
    if area > 1e-12:
        centroid = polygon_centroid(boundary)
        boundary = centroid + (boundary - centroid) * np.sqrt(target_area / area)

    return ClosedSplineContour(seeds=_equal_arc_seeds(boundary, n_seeds), role=role)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / float(denom)


# ---------------------------------------------------------------------------
# edits
# ---------------------------------------------------------------------------

def _nearest_segment(c: ClosedSplineContour, point: np.ndarray) -> int:
    """Index of the seed segment whose densified arc passes nearest the point."""
    poly = evaluate_contour(c, DENSIFY_SPP)
    d = np.linalg.norm(poly - point[None, :], axis=1)
    return int(np.argmin(d)) // DENSIFY_SPP


def _edited_source(source: str) -> str:
    return "auto_corrected" if source == "auto" else source


def apply_edit(a: SliceAnnotation, edit: str, role: str | None = None,
               index: int | None = None, point=None) -> SliceAnnotation:
    """Apply one editing verb and return a new annotation (input unchanged)."""
    if edit == "toggle_usable":
        return replace(a, usable=not a.usable)

    if role not in ROLES:
        raise ValueError(f"edit {edit!r} needs a contour role")
    c = a.contour(role)
    if c is None:
        raise IndexOutOfRange(f"annotation has no {role} contour")
    seeds = c.seeds

    if edit == "add_seed":
        p = np.asarray(point, dtype=np.float64)
        k = _nearest_segment(c, p)
        new_seeds = np.insert(seeds, k + 1, p, axis=0)
    elif edit == "move_seed":
        if index is None or not (0 <= index < seeds.shape[0]):
            raise IndexOutOfRange(f"seed index {index} out of range")
        new_seeds = seeds.copy()
        new_seeds[index] = np.asarray(point, dtype=np.float64)
    elif edit == "remove_seed":
        if index is None or not (0 <= index < seeds.shape[0]):
            raise IndexOutOfRange(f"seed index {index} out of range")
        if seeds.shape[0] <= 3:
            raise MinimumSeeds("cannot drop below 3 seeds")
        new_seeds = np.delete(seeds, index, axis=0)
    else:
        raise ValueError(f"unknown edit verb {edit!r}")

    new_contour = ClosedSplineContour(seeds=new_seeds, role=c.role)
    field_name = "lumen" if role == "lumen" else "wall"
    return replace(a, **{field_name: new_contour, "source": _edited_source(a.source)})


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _segments_intersect(poly: np.ndarray) -> bool:
    """True when any two non-adjacent closed-polyline segments cross or touch."""
    p = poly
    q = np.roll(poly, -1, axis=0)
    n = p.shape[0]
    idx = np.arange(n)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    keep = (j > i + 1) & ~((i == 0) & (j == n - 1))

    a, b = p[i[keep]], q[i[keep]]
    c, d = p[j[keep]], q[j[keep]]

    def orient(u, v, w):
        return (v[:, 0] - u[:, 0]) * (w[:, 1] - u[:, 1]) \
            - (v[:, 1] - u[:, 1]) * (w[:, 0] - u[:, 0])

    def on_segment(u, v, w):
        # collinear w within the (u, v) bounding box
        return ((w >= np.minimum(u, v)) & (w <= np.maximum(u, v))).all(axis=1)

    o1 = orient(a, b, c)
    o2 = orient(a, b, d)
    o3 = orient(c, d, a)
    o4 = orient(c, d, b)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    # exact touching (a vertex on the other segment) also breaks simplicity
    touching = ((o1 == 0) & on_segment(a, b, c)) | ((o2 == 0) & on_segment(a, b, d)) \
        | ((o3 == 0) & on_segment(c, d, a)) | ((o4 == 0) & on_segment(c, d, b))
    return bool((crossing | touching).any())


def validate_annotation(a: SliceAnnotation,
                        samples_per_segment: int = DENSIFY_SPP) -> list[str]:
    """Report-style validation; returns a list of violations (empty = valid)."""
    report = []
    polylines = {}
    for role_name, c in (("lumen", a.lumen), ("wall", a.wall)):
        if c is None:
            continue
        poly = evaluate_contour(c, samples_per_segment)
        polylines[role_name] = poly
        if _segments_intersect(poly):
            report.append(f"self-intersecting contour: {role_name}")
    if "lumen" in polylines and "wall" in polylines:
        inside = points_in_polygon(polylines["lumen"], polylines["wall"])
        if not inside.all():
            report.append("lumen not strictly inside wall")
    return report
