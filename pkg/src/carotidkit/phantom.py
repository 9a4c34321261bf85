"""Analytic synthetic studies with exact ground truth.

Tube and bifurcation geometries with black-blood-style intensities (lumen
100, wall 400, background 50) and Poiseuille flow.  Interfaces get a
0.5-voxel linear partial-volume ramp so subvoxel surface and contour tests
measure accuracy instead of staircase artifacts; masks stay hard
voxel-center classifications of the analytic geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecInvalid
from .volume import Affine, BinaryMask, ScalarVolume, VelocityField

KINDS = ("straight_tube", "stenotic_tube", "bifurcation")
WAVEFORMS = ("flat", "half_sine")

INTENSITY_LUMEN = 100.0
INTENSITY_WALL = 400.0
INTENSITY_BACKGROUND = 50.0


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "straight_tube"
    lumen_radius: float = 3.0      # mm; distal radius for stenotic tubes
    min_radius: float = 1.5        # mm, stenotic throat
    wall_thickness: float = 1.0    # mm
    length: float = 40.0           # mm along z
    voxel_spacing: float = 0.25    # mm isotropic
    v_max: float = 1.0             # m/s peak axial speed
    timepoints: int = 2
    waveform: str = "flat"
    cycle_ms: float = 800.0
    margin: float = 2.0            # mm background padding around the wall
    stenosis_width: float = 8.0    # mm half-width of the throat bump
    branch_angle_deg: float = 25.0  # bifurcation half angle

    def validate(self):
        if self.kind not in KINDS:
            raise SpecInvalid(f"unknown phantom kind {self.kind!r}")
        if self.waveform not in WAVEFORMS:
            raise SpecInvalid(f"unknown waveform {self.waveform!r}")
        if self.lumen_radius <= 0 or self.wall_thickness <= 0:
            raise SpecInvalid("radii and wall thickness must be positive")
        if self.kind == "stenotic_tube" and not (0 < self.min_radius < self.lumen_radius):
            raise SpecInvalid("stenotic throat must satisfy 0 < min < distal radius")
        if self.length <= 0 or self.voxel_spacing <= 0 or self.margin < 0:
            raise SpecInvalid("length/spacing/margin invalid")
        if self.v_max <= 0 or self.timepoints < 2 or self.cycle_ms <= 0:
            raise SpecInvalid("flow parameters invalid")


@dataclass(frozen=True)
class PhantomTruth:
    """Exact analytic values the phantom was built from."""

    kind: str
    length: float
    wall_thickness: float
    arc_positions: np.ndarray
    radii: np.ndarray
    stenosis_percent: float | None
    axis_points: np.ndarray        # main (CCA->ICA for bifurcations) centerline
    branches: dict = field(default_factory=dict)
    v_max: float = 1.0
    cycle_ms: float = 800.0
    waveform: str = "flat"

    def to_json_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "length": float(self.length),
            "wall_thickness": float(self.wall_thickness),
            "arc_positions": [float(x) for x in self.arc_positions],
            "radii": [float(x) for x in self.radii],
            "stenosis_percent": None if self.stenosis_percent is None
            else float(self.stenosis_percent),
            "axis_points": [[float(v) for v in p] for p in self.axis_points],
            "v_max": float(self.v_max),
            "cycle_ms": float(self.cycle_ms),
            "waveform": self.waveform,
            "branches": {k: [[float(v) for v in p] for p in pts]
                         for k, pts in self.branches.items()},
        }
        return d


@dataclass(frozen=True)
class PhantomStudy:
    bb: ScalarVolume
    lumen_mask: BinaryMask
    wall_mask: BinaryMask
    truth: PhantomTruth


def radius_profile(spec: PhantomSpec, z) -> np.ndarray:
    """Analytic lumen radius as a function of axial position (mm)."""
    z = np.asarray(z, dtype=np.float64)
    if spec.kind != "stenotic_tube":
        return np.full_like(z, spec.lumen_radius)
    zc = spec.length / 2.0
    w = spec.stenosis_width
    bump = np.cos(np.pi * (z - zc) / (2.0 * w)) ** 2
    r = np.where(np.abs(z - zc) <= w,
                 spec.lumen_radius - (spec.lumen_radius - spec.min_radius) * bump,
                 spec.lumen_radius)
    return r


def axial_speed(spec: PhantomSpec, r, z=0.0) -> np.ndarray:
    """Analytic Poiseuille speed (m/s) at radial distance r, peak of cycle."""
    r = np.asarray(r, dtype=np.float64)
    R = radius_profile(spec, z)
    return np.where(r <= R, spec.v_max * (1.0 - (r / R) ** 2), 0.0)


def waveform_factor(spec: PhantomSpec, t_ms) -> np.ndarray:
    t = np.asarray(t_ms, dtype=np.float64)
    if spec.waveform == "flat":
        return np.ones_like(t)
    return np.sin(np.pi * np.mod(t, spec.cycle_ms) / spec.cycle_ms)


def _branch_polylines(spec: PhantomSpec) -> dict:
    zb = 0.45 * spec.length
    th = math.radians(spec.branch_angle_deg)
    lb = (spec.length - zb) / math.cos(th)
    return {
        "CCA": np.array([[0.0, 0.0, 0.0], [0.0, 0.0, zb]]),
        "ICA": np.array([[0.0, 0.0, zb],
                         [lb * math.sin(th), 0.0, zb + lb * math.cos(th)]]),
        "ECA": np.array([[0.0, 0.0, zb],
                         [-lb * math.sin(th), 0.0, zb + lb * math.cos(th)]]),
    }


_BRANCH_RADIUS_SCALE = {"CCA": 1.0, "ICA": 0.85, "ECA": 0.6}


def _grid(spec: PhantomSpec):
    s = spec.voxel_spacing
    half = spec.lumen_radius + spec.wall_thickness + spec.margin
    if spec.kind == "bifurcation":
        th = math.radians(spec.branch_angle_deg)
        half += 0.55 * spec.length * math.tan(th)
    n_half = int(math.ceil(half / s))
    nx = 2 * n_half + 1  # odd: a voxel center sits exactly on the axis
    nz = int(round(spec.length / s)) + 1
    affine = Affine.from_spacing((s, s, s), origin=(-n_half * s, -n_half * s, 0.0))
    x = (np.arange(nx) - n_half) * s
    z = np.arange(nz) * s
    return (nx, nx, nz), affine, x, z


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    ab = b - a
    L2 = float(ab @ ab)
    t = np.clip((points - a) @ ab / L2, 0.0, 1.0)
    proj = a[None, :] + t[:, None] * ab[None, :]
    return np.linalg.norm(points - proj, axis=1), t


def _radial_geometry(spec: PhantomSpec, dims, affine):
    """Per-voxel (distance to nearest axis, local lumen radius, axial unit)."""
    nx, ny, nz = dims
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                          indexing="ij")
    vox = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1).astype(np.float64)
    pts = affine.apply(vox)
    if spec.kind != "bifurcation":
        r = np.hypot(pts[:, 0], pts[:, 1])
        R = radius_profile(spec, pts[:, 2])
        axial = np.tile(np.array([0.0, 0.0, 1.0]), (pts.shape[0], 1))
        return r.reshape(dims), R.reshape(dims), axial, pts
    branches = _branch_polylines(spec)
    best_d = np.full(pts.shape[0], np.inf)
    best_R = np.zeros(pts.shape[0])
    axial = np.zeros_like(pts)
    for name, line in branches.items():
        Rb = spec.lumen_radius * _BRANCH_RADIUS_SCALE[name]
        d, _ = _segment_distance(pts, line[0], line[1])
        closer = d / Rb < best_d / np.maximum(best_R, 1e-9)
        tan = line[1] - line[0]
        tan = tan / np.linalg.norm(tan)
        best_d[closer] = d[closer]
        best_R[closer] = Rb
        axial[closer] = tan
    return best_d.reshape(dims), best_R.reshape(dims), axial, pts


def generate_phantom(spec: PhantomSpec) -> PhantomStudy:
    """Build the BB volume, masks, and exact truth for a phantom spec."""
    spec.validate()
    dims, affine, _, z = _grid(spec)
    r, R, _, _ = _radial_geometry(spec, dims, affine)

    s = spec.voxel_spacing
    ramp_w = 0.5 * s
    d_inner = r - R
    d_outer = r - (R + spec.wall_thickness)
    ramp_in = np.clip(d_inner / ramp_w + 0.5, 0.0, 1.0)
    ramp_out = np.clip(d_outer / ramp_w + 0.5, 0.0, 1.0)
    bb_values = (INTENSITY_LUMEN
                 + (INTENSITY_WALL - INTENSITY_LUMEN) * ramp_in
                 + (INTENSITY_BACKGROUND - INTENSITY_WALL) * ramp_out)

    lumen_bits = r <= R
    wall_bits = (r > R) & (r <= R + spec.wall_thickness)

    bb = ScalarVolume(dims=dims, spacing=(s, s, s), affine=affine,
                      values=bb_values)
    lumen = BinaryMask(dims=dims, affine=affine, bits=lumen_bits)
    wall = BinaryMask(dims=dims, affine=affine, bits=wall_bits)

    radii = radius_profile(spec, z)
    sten = None
    if spec.kind == "stenotic_tube":
        sten = 100.0 * (1.0 - spec.min_radius / spec.lumen_radius)
    branches = {}
    if spec.kind == "bifurcation":
        branches = {k: v for k, v in _branch_polylines(spec).items()}
        axis = np.vstack([branches["CCA"], branches["ICA"][1:]])
    else:
        axis = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, spec.length]])
    truth = PhantomTruth(
        kind=spec.kind, length=spec.length,
        wall_thickness=spec.wall_thickness, arc_positions=z, radii=radii,
        stenosis_percent=sten, axis_points=axis, branches=branches,
        v_max=spec.v_max, cycle_ms=spec.cycle_ms, waveform=spec.waveform)
    return PhantomStudy(bb=bb, lumen_mask=lumen, wall_mask=wall, truth=truth)


def generate_flow(spec: PhantomSpec) -> VelocityField:
    """Poiseuille velocity field over the phantom lumen, one grid per frame."""
    spec.validate()
    dims, affine, _, _ = _grid(spec)
    r, R, axial, _ = _radial_geometry(spec, dims, affine)
    with np.errstate(invalid="ignore"):
        profile = np.where(r <= R, spec.v_max * (1.0 - (r / np.maximum(R, 1e-9)) ** 2), 0.0)
    base = axial.reshape(*dims, 3) * profile[..., None]

    n = spec.timepoints
    times = tuple(spec.cycle_ms * i / n for i in range(n))
    factors = waveform_factor(spec, np.asarray(times))
    comp = np.stack([base * f for f in factors], axis=0)
    return VelocityField(dims=dims, affine=affine, timepoints=times,
                         cycle_length=spec.cycle_ms, components=comp,
                         venc=1.5 * spec.v_max)
