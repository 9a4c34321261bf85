"""Quantitative stenosis and hemodynamic measures.

All quantities are computed per cross-section plane from validated
annotations; slices flagged not-usable are excluded by the aggregation
layer.  Definitions used here:

* vessel wall thickness: centroid-ray distance between the lumen and outer
  wall contours (reproducible and directly colormappable by angle),
* stenosis degree: percent diameter reduction against a distal reference
  diameter (explicit input, so other grading conventions can be layered on),
* wall shear stress: viscosity times the wall-normal gradient of the axial
  velocity, from a no-slip quadratic fit through two near-wall samples,
* pulse wave velocity: inverse slope of waveform foot time vs arc position,
  feet located by intersecting the 20-80% upstroke line with the baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .centerline import CrossSectionPlane
from .contours import (
    ClosedSplineContour,
    PlaneGrid,
    SliceAnnotation,
    contour_to_mask,
    evaluate_contour,
    polygon_area,
    polygon_centroid,
    validate_annotation,
)
from .errors import FlatWaveform, NonpositiveReference, NoOverlap
from .volume import VelocityField, sample_velocity_many

DEFAULT_VISCOSITY = 0.0035  # Pa*s, whole blood


@dataclass(frozen=True)
class VwtProfile:
    """Wall thickness along centroid rays at uniform angles."""

    plane_id: str
    angles: np.ndarray
    thickness: np.ndarray  # mm, NaN where a ray missed a contour
    centroid: np.ndarray   # ray origin in plane (u, v) mm

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.thickness)

    @property
    def mean(self) -> float:
        v = self.thickness[self.valid]
        return float(v.mean()) if v.size else math.nan

    @property
    def max(self) -> float:
        v = self.thickness[self.valid]
        return float(v.max()) if v.size else math.nan


def _ray_polyline_first_hit(origin: np.ndarray, direction: np.ndarray,
                            poly: np.ndarray) -> float:
    """Smallest s >= 0 with origin + s*direction on the closed polyline; NaN if none."""
    p = poly
    q = np.roll(poly, -1, axis=0)
    e = q - p
    denom = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    rel = p - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom
        t = (rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) / denom
    ok = np.isfinite(s) & np.isfinite(t) & (s >= 0) & (t >= 0) & (t < 1)
    return float(s[ok].min()) if ok.any() else math.nan


def vwt_profile(lumen: ClosedSplineContour, wall: ClosedSplineContour,
                n_rays: int = 36, plane_id: str = "",
                samples_per_segment: int = 64) -> VwtProfile:
    """Cast rays from the lumen centroid and measure lumen-to-wall distance."""
    if n_rays < 8:
        raise ValueError("need >= 8 rays")
    report = validate_annotation(SliceAnnotation(
        plane_id=plane_id or "vwt", lumen=lumen, wall=wall))
    if report:
        raise ValueError("; ".join(report))
    lpoly = evaluate_contour(lumen, samples_per_segment)
    wpoly = evaluate_contour(wall, samples_per_segment)
    origin = polygon_centroid(lpoly)
    angles = 2 * np.pi * np.arange(n_rays) / n_rays
    thickness = np.full(n_rays, math.nan)
    for k, th in enumerate(angles):
        d = np.array([math.cos(th), math.sin(th)])
        s_lumen = _ray_polyline_first_hit(origin, d, lpoly)
        s_wall = _ray_polyline_first_hit(origin, d, wpoly)
        if math.isfinite(s_lumen) and math.isfinite(s_wall):
            thickness[k] = s_wall - s_lumen
    return VwtProfile(plane_id=plane_id, angles=angles, thickness=thickness,
                      centroid=origin)


def stenosis_degree(d_stenosis: float, d_reference: float) -> float:
    """Percent diameter reduction, clamped to [0, 100]."""
    if d_reference <= 0:
        raise NonpositiveReference("reference diameter must be positive")
    if d_stenosis < 0:
        raise ValueError("stenosis diameter must be >= 0")
    return float(np.clip(100.0 * (1.0 - d_stenosis / d_reference), 0.0, 100.0))


def equivalent_diameter(c: ClosedSplineContour) -> float:
    """Diameter of the circle with the contour's area."""
    return 2.0 * math.sqrt(polygon_area(evaluate_contour(c)) / math.pi)


def caliper_min_diameter(c: ClosedSplineContour) -> float:
    """Minimal width of the densified contour (rotating calipers on the hull)."""
    poly = evaluate_contour(c)
    hull = ConvexHull(poly)
    pts = poly[hull.vertices]
    edges = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(edges, axis=1)
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1) / lengths[:, None]
    # width for each edge direction = extent of all hull points along its normal
    proj = pts @ normals.T
    widths = proj.max(axis=0) - proj.min(axis=0)
    return float(widths.min())


# ---------------------------------------------------------------------------
# flow rate and wall shear stress
# ---------------------------------------------------------------------------

def _lumen_grid(plane: CrossSectionPlane, lumen: ClosedSplineContour) -> PlaneGrid:
    poly = evaluate_contour(lumen)
    s = plane.in_plane_spacing
    lo = poly.min(axis=0) - 2 * s
    hi = poly.max(axis=0) + 2 * s
    nu = int(math.ceil((hi[0] - lo[0]) / s)) + 1
    nv = int(math.ceil((hi[1] - lo[1]) / s)) + 1
    return PlaneGrid(nu=nu, nv=nv, spacing=s, origin=(float(lo[0]), float(lo[1])))


def flow_rate(plane: CrossSectionPlane, lumen: ClosedSplineContour,
              field: VelocityField, t_ms: float) -> float:
    """Volumetric flow through the lumen in ml/s (signed along the tangent).

    Velocity in m/s times pixel area in mm^2 is ml/s directly.
    """
    grid = _lumen_grid(plane, lumen)
    mask = contour_to_mask(lumen, grid)
    uv = grid.pixel_centers()[mask.ravel()]
    if uv.shape[0] == 0:
        raise NoOverlap("lumen rasterized to zero pixels")
    pts = plane.to_world(uv)
    vel, inside = sample_velocity_many(field, pts, t_ms)
    if not inside.any():
        raise NoOverlap("lumen lies entirely outside the velocity field")
    axial = vel[inside] @ plane.frame.tangent
    return float(axial.sum() * grid.spacing ** 2)


@dataclass(frozen=True)
class WssProfile:
    """Wall shear stress at densified lumen boundary points (Pa)."""

    plane_id: str
    boundary_uv: np.ndarray
    values: np.ndarray  # Pa, NaN where a near-wall sample left the field

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def mean(self) -> float:
        v = self.values[self.valid]
        return float(v.mean()) if v.size else math.nan

    @property
    def max(self) -> float:
        v = self.values[self.valid]
        return float(v.max()) if v.size else math.nan


def wss(plane: CrossSectionPlane, lumen: ClosedSplineContour,
        field: VelocityField, t_ms: float, mu: float = DEFAULT_VISCOSITY,
        samples_per_segment: int = 8) -> WssProfile:
    """Wall shear stress from a no-slip quadratic near-wall velocity fit.

    At each boundary point the axial velocity is sampled at offsets h and 2h
    along the inward in-plane normal (h = plane.in_plane_spacing) and fitted
    with v(r) = a*r + b*r^2; the stress is mu * a (converted to 1/s).
    """
    if mu <= 0:
        raise ValueError("viscosity must be positive")
    poly = evaluate_contour(lumen, samples_per_segment)
    centroid = polygon_centroid(poly)
    tangents = np.roll(poly, -1, axis=0) - np.roll(poly, 1, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1)[:, None]
    normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
    flip = ((centroid[None, :] - poly) * normals).sum(axis=1) < 0
    normals[flip] *= -1.0

    h = plane.in_plane_spacing
    p1 = plane.to_world(poly + h * normals)
    p2 = plane.to_world(poly + 2 * h * normals)
    v1, in1 = sample_velocity_many(field, p1, t_ms)
    v2, in2 = sample_velocity_many(field, p2, t_ms)
    axial1 = v1 @ plane.frame.tangent
    axial2 = v2 @ plane.frame.tangent
    # exact 2-point solve of v = a r + b r^2 at r = h, 2h (no-slip v(0) = 0)
    a_per_mm = (4.0 * axial1 - axial2) / (2.0 * h)
    shear_rate = a_per_mm * 1000.0  # (m/s)/mm -> 1/s
    values = mu * shear_rate
    values[~(in1 & in2)] = math.nan
    return WssProfile(plane_id=plane.id, boundary_uv=poly, values=values)


# ---------------------------------------------------------------------------
# pulse wave velocity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowWaveform:
    """Flow rate over one cardiac cycle at a given arc position."""

    arc_position: float
    times: np.ndarray   # ms, strictly increasing
    values: np.ndarray  # ml/s

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        q = np.asarray(self.values, dtype=np.float64)
        if t.ndim != 1 or t.shape != q.shape or t.size < 3:
            raise ValueError("waveform needs matching times/values, >= 3 samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("waveform times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", q)


def waveform_foot_time(w: FlowWaveform) -> float:
    """Baseline intersection of the line fit through the 20-80% upstroke."""
    q = w.values
    t = w.times
    qmin = float(q.min())
    qmax = float(q.max())
    if qmax - qmin <= 1e-12 * max(1.0, abs(qmax)):
        raise FlatWaveform("waveform has no upstroke")
    peak = int(np.argmax(q))
    i0 = int(np.argmin(q[:peak + 1]))
    if i0 == peak:
        raise FlatWaveform("no upstroke before the systolic peak")
    lo = qmin + 0.2 * (qmax - qmin)
    hi = qmin + 0.8 * (qmax - qmin)
    seg_t = t[i0:peak + 1]
    seg_q = q[i0:peak + 1]
    band = (seg_q >= lo) & (seg_q <= hi)
    if band.sum() >= 2:
        ts, qs = seg_t[band], seg_q[band]
    else:
        # sparse upstroke: use the interpolated 20% and 80% crossings
        ts = np.array([np.interp(lo, seg_q, seg_t), np.interp(hi, seg_q, seg_t)])
        qs = np.array([lo, hi])
    slope, intercept = np.polyfit(ts, qs, 1)
    return float((qmin - intercept) / slope)


@dataclass(frozen=True)
class PwvResult:
    value: float           # m/s; +inf when feet do not propagate
    measurable: bool
    foot_times: np.ndarray
    arc_positions: np.ndarray


def pwv(waveforms: list[FlowWaveform]) -> PwvResult:
    """Pulse wave velocity from foot-time regression over arc position."""
    if len(waveforms) < 3:
        raise ValueError("need >= 3 waveforms")
    arcs = np.array([w.arc_position for w in waveforms])
    if np.unique(arcs).size != arcs.size:
        raise ValueError("arc positions must be distinct")
    feet = np.array([waveform_foot_time(w) for w in waveforms])
    slope, _ = np.polyfit(arcs, feet, 1)  # ms per mm
    if abs(slope) < 1e-12:
        return PwvResult(value=math.inf, measurable=False,
                         foot_times=feet, arc_positions=arcs)
    return PwvResult(value=float(1.0 / slope), measurable=True,
                     foot_times=feet, arc_positions=arcs)


# ---------------------------------------------------------------------------
# per-study aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiomarkerRow:
    plane_id: str
    arc_position: float
    timepoint: float | None
    lumen_area: float | None
    equivalent_diameter: float | None
    caliper_diameter: float | None
    vwt_mean: float | None
    vwt_max: float | None
    flow_rate: float | None
    wss_mean: float | None
    wss_max: float | None


@dataclass(frozen=True)
class BiomarkerReport:
    rows: list
    stenosis_percent: float | None
    stenosis_percent_equivalent: float | None
    stenosis_plane_id: str | None
    reference_plane_id: str | None
    pwv_m_per_s: float | None
    pwv_measurable: bool | None
    systole_ms: float | None
    waveforms: list
    vwt_profiles: list


def systolic_time(field: VelocityField | None, planes, annotations) -> float | None:
    """Frame time with the largest total lumen flow magnitude."""
    if field is None:
        return None
    best_t, best_q = None, -1.0
    for t in field.timepoints:
        total = 0.0
        for plane in planes:
            ann = annotations.get(plane.id)
            if ann is None or not ann.usable or ann.lumen is None:
                continue
            try:
                total += abs(flow_rate(plane, ann.lumen, field, t))
            except NoOverlap:
                continue
        if total > best_q:
            best_q, best_t = total, float(t)
    return best_t


def build_report(planes, annotations: dict, field: VelocityField | None = None,
                 mu: float = DEFAULT_VISCOSITY, n_rays: int = 36) -> BiomarkerReport:
    """Aggregate per-plane biomarkers; slices with usable=False are skipped."""
    rows = []
    profiles = []
    waveforms = []
    t_sys = systolic_time(field, planes, annotations)

    for plane in planes:
        ann = annotations.get(plane.id)
        if ann is None or not ann.usable:
            continue
        if ann.lumen is None and ann.wall is None:
            continue
        lumen_area = eq_d = cal_d = None
        vwt_mean = vwt_max = None
        q_sys = wss_mean = wss_max = None
        if ann.lumen is not None:
            lpoly = evaluate_contour(ann.lumen)
            lumen_area = polygon_area(lpoly)
            eq_d = equivalent_diameter(ann.lumen)
            cal_d = caliper_min_diameter(ann.lumen)
        if ann.lumen is not None and ann.wall is not None:
            profile = vwt_profile(ann.lumen, ann.wall, n_rays=n_rays,
                                  plane_id=plane.id)
            profiles.append((plane, profile))
            vwt_mean, vwt_max = profile.mean, profile.max
        if field is not None and ann.lumen is not None:
            times = np.asarray(field.timepoints)
            try:
                qs = np.array([flow_rate(plane, ann.lumen, field, t)
                               for t in times])
                waveforms.append(FlowWaveform(
                    arc_position=plane.arc_position, times=times, values=qs))
                q_sys = float(qs[int(np.argmin(np.abs(times - t_sys)))])
                prof = wss(plane, ann.lumen, field, t_sys, mu=mu)
                wss_mean, wss_max = prof.mean, prof.max
            except NoOverlap:
                pass
        rows.append(BiomarkerRow(
            plane_id=plane.id, arc_position=plane.arc_position,
            timepoint=ann.timepoint, lumen_area=lumen_area,
            equivalent_diameter=eq_d, caliper_diameter=cal_d,
            vwt_mean=vwt_mean, vwt_max=vwt_max, flow_rate=q_sys,
            wss_mean=wss_mean, wss_max=wss_max))

    sten = sten_eq = None
    sten_plane = ref_plane = None
    with_lumen = [r for r in rows if r.caliper_diameter is not None]
    if len(with_lumen) >= 2:
        ref = max(with_lumen, key=lambda r: r.arc_position)
        narrow = min(with_lumen, key=lambda r: r.caliper_diameter)
        sten = stenosis_degree(narrow.caliper_diameter, ref.caliper_diameter)
        narrow_eq = min(with_lumen, key=lambda r: r.equivalent_diameter)
        sten_eq = stenosis_degree(narrow_eq.equivalent_diameter,
                                  ref.equivalent_diameter)
        sten_plane, ref_plane = narrow.plane_id, ref.plane_id

    pwv_value = None
    pwv_ok = None
    distinct_arcs = {w.arc_position for w in waveforms}
    if len(distinct_arcs) >= 3 and len(waveforms) == len(distinct_arcs):
        try:
            res = pwv(waveforms)
            pwv_value, pwv_ok = res.value, res.measurable
        except FlatWaveform:
            pwv_value, pwv_ok = None, False

    return BiomarkerReport(
        rows=rows, stenosis_percent=sten, stenosis_percent_equivalent=sten_eq,
        stenosis_plane_id=sten_plane, reference_plane_id=ref_plane,
        pwv_m_per_s=pwv_value, pwv_measurable=pwv_ok, systole_ms=t_sys,
        waveforms=waveforms, vwt_profiles=profiles)
