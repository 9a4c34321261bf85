"""Particle advection through the time-resolved velocity field.

Classic fixed-step RK4 in the time-varying field; velocities in m/s equal
mm/ms, so positions integrate directly in mm.  Lines are gated by the
angiographic segmentation mask: a particle whose next position leaves the
mask stops at its last inside vertex, so downstream consumers can tell a
masked exit from leaving the sampled grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .centerline import CrossSectionPlane
from .contours import ClosedSplineContour, evaluate_contour, points_in_polygon, polygon_area, polygon_centroid
from .errors import EmptyLumen, InvalidStep
from .volume import BinaryMask, VelocityField, sample_mask_many, sample_velocity_many

TERMINATIONS = ("mask_exit", "domain_exit", "max_duration", "stagnation")
STAGNATION_SPEED = 1e-4     # m/s
STAGNATION_STEPS = 5

BINARY_MAGIC = b"CPLN\x00\x01\x00\x00"


@dataclass(frozen=True)
class EmitterSpec:
    plane_id: str
    seed_count: int
    start_times: tuple
    seed_layout: str = "uniform-disc-in-lumen"

    def __post_init__(self):
        if self.seed_count < 1:
            raise ValueError("seed_count must be >= 1")
        object.__setattr__(self, "start_times",
                           tuple(float(t) for t in self.start_times))


@dataclass(frozen=True)
class Pathline:
    """One traced trajectory: vertices (x, y, z, t, speed) and why it ended."""

    vertices: np.ndarray  # (n, 5) float64
    termination: str

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 5)
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def positions(self) -> np.ndarray:
        return self.vertices[:, :3]

    @property
    def times(self) -> np.ndarray:
        return self.vertices[:, 3]

    @property
    def speeds(self) -> np.ndarray:
        return self.vertices[:, 4]


@dataclass(frozen=True)
class PathlineSet:
    lines: tuple
    dt: float
    mask_applied: bool
    emitter: EmitterSpec | None = None


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def _halton(index: int, base: int) -> float:
    f, r = 1.0, 0.0
    while index > 0:
        f /= base
        r += f * (index % base)
        index //= base
    return r


def seed_from_cross_section(plane: CrossSectionPlane,
                            lumen: ClosedSplineContour | None,
                            n: int) -> np.ndarray:
    """Quasi-uniform emitter seeds inside the lumen polygon (world mm).

    A fixed Halton (2, 3) sequence over the polygon bounding box, rejected
    against the polygon: deterministic for fixed inputs.  Without a lumen
    the emitter is a disc of radius fov/4 at the plane center.  n=1 returns
    the centroid.
    """
    if n < 1:
        raise ValueError("need n >= 1 seeds")
    if lumen is not None:
        poly = evaluate_contour(lumen)
        if polygon_area(poly) < 1e-9:
            raise EmptyLumen("lumen contour has (near) zero area")
        centroid = polygon_centroid(poly)
    else:
        r = plane.fov / 4.0
        th = 2 * np.pi * np.arange(64) / 64
        poly = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        centroid = np.zeros(2)

    if n == 1:
        uv = centroid[None, :]
    else:
        lo = poly.min(axis=0)
        hi = poly.max(axis=0)
        accepted = []
        index = 1
        # Halton fill rate inside the bbox is ~area ratio; cap generously
        max_draws = 1000 * n + 10000
        while len(accepted) < n and index <= max_draws:
            u = lo[0] + (hi[0] - lo[0]) * _halton(index, 2)
            v = lo[1] + (hi[1] - lo[1]) * _halton(index, 3)
            if points_in_polygon(np.array([[u, v]]), poly)[0]:
                accepted.append((u, v))
            index += 1
        if len(accepted) < n:
            raise EmptyLumen("rejection sampling could not place seeds")
        uv = np.asarray(accepted)
    return plane.to_world(uv)


# ---------------------------------------------------------------------------
# tracing
# ---------------------------------------------------------------------------

def default_time_step(field: VelocityField) -> float:
    """CFL-style bound: venc * dt <= half the smallest voxel, capped at 1 ms."""
    min_spacing = float(np.min(field.affine.spacing))
    if field.venc <= 0:
        return 1.0
    return min(0.5 * min_spacing / field.venc, 1.0)


def trace(field: VelocityField, seeds, t0: float, duration: float, dt: float,
          mask: BinaryMask | None = None,
          emitter: EmitterSpec | None = None) -> PathlineSet:
    """RK4-advect seed points from t0 for a duration (all times ms)."""
    if dt <= 0:
        raise InvalidStep("dt must be positive")
    if duration <= 0:
        raise InvalidStep("duration must be positive")
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    m = seeds.shape[0]
    n_steps = int(np.floor(duration / dt + 1e-9))

    verts = np.zeros((m, n_steps + 1, 5))
    counts = np.zeros(m, dtype=int)
    term = np.array(["max_duration"] * m, dtype=object)
    alive = np.ones(m, dtype=bool)
    stagnant = np.zeros(m, dtype=int)

    pos = seeds.copy()
    v0, in0 = sample_velocity_many(field, pos, t0)
    if mask is not None:
        in_mask = sample_mask_many(mask, pos)
        newly = alive & ~in_mask
        term[newly] = "mask_exit"
        alive &= in_mask
    bad = alive & ~in0
    term[bad] = "domain_exit"
    alive &= in0
    speed = np.linalg.norm(v0, axis=1)
    idx = np.where(alive)[0]
    verts[idx, 0, :3] = pos[idx]
    verts[idx, 0, 3] = t0
    verts[idx, 0, 4] = speed[idx]
    counts[idx] = 1
    stagnant[alive & (speed < STAGNATION_SPEED)] = 1

    for k in range(n_steps):
        if not alive.any():
            break
        t = t0 + k * dt
        act = np.where(alive)[0]
        p = pos[act]
        k1, i1 = sample_velocity_many(field, p, t)
        k2, i2 = sample_velocity_many(field, p + 0.5 * dt * k1, t + 0.5 * dt)
        k3, i3 = sample_velocity_many(field, p + 0.5 * dt * k2, t + 0.5 * dt)
        k4, i4 = sample_velocity_many(field, p + dt * k3, t + dt)
        ok = i1 & i2 & i3 & i4
        p_next = p + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        vn, inn = sample_velocity_many(field, p_next, t + dt)
        ok &= inn
        term[act[~ok]] = "domain_exit"
        alive[act[~ok]] = False
        act = act[ok]
        p_next = p_next[ok]
        vn = vn[ok]

        if mask is not None and act.size:
            inm = sample_mask_many(mask, p_next)
            term[act[~inm]] = "mask_exit"
            alive[act[~inm]] = False
            act = act[inm]
            p_next = p_next[inm]
            vn = vn[inm]

        if act.size == 0:
            continue
        pos[act] = p_next
        sp = np.linalg.norm(vn, axis=1)
        row = counts[act]
        verts[act, row, :3] = p_next
        verts[act, row, 3] = t + dt
        verts[act, row, 4] = sp
        counts[act] += 1

        slow = sp < STAGNATION_SPEED
        stagnant[act[slow]] += 1
        stagnant[act[~slow]] = 0
        stalled = act[stagnant[act] >= STAGNATION_STEPS]
        term[stalled] = "stagnation"
        alive[stalled] = False

    lines = tuple(
        Pathline(vertices=verts[i, :counts[i]], termination=str(term[i]))
        for i in range(m))
    return PathlineSet(lines=lines, dt=float(dt),
                       mask_applied=mask is not None, emitter=emitter)


def trace_emitter(field: VelocityField, plane: CrossSectionPlane,
                  lumen: ClosedSplineContour | None, spec: EmitterSpec,
                  duration: float, dt: float,
                  mask: BinaryMask | None = None) -> PathlineSet:
    """Trace one emitter: seeds per start time, ordered (start_time, seed)."""
    seeds = seed_from_cross_section(plane, lumen, spec.seed_count)
    lines = []
    for t_start in spec.start_times:
        ps = trace(field, seeds, t_start, duration, dt, mask=mask)
        lines.extend(ps.lines)
    return PathlineSet(lines=tuple(lines), dt=float(dt),
                       mask_applied=mask is not None, emitter=spec)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathlineStats:
    max_speed: float
    fraction_above: float
    per_line_max: tuple
    threshold: float
    n_vertices: int


def pathline_stats(ps: PathlineSet, v_threshold: float = 1.0) -> PathlineStats:
    """Speed statistics; the 1 m/s default matches the clinical reading level."""
    speeds = [ln.speeds for ln in ps.lines if ln.vertices.shape[0]]
    if not speeds:
        return PathlineStats(max_speed=0.0, fraction_above=0.0,
                             per_line_max=tuple(), threshold=float(v_threshold),
                             n_vertices=0)
    allv = np.concatenate(speeds)
    per_line = tuple(float(s.max()) if s.size else 0.0
                     for s in (ln.speeds for ln in ps.lines))
    return PathlineStats(
        max_speed=float(allv.max()),
        fraction_above=float((allv > v_threshold).mean()),
        per_line_max=per_line,
        threshold=float(v_threshold),
        n_vertices=int(allv.size),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def pathlines_to_json_dict(ps: PathlineSet) -> dict:
    """JSON structure with per-line flat coordinate arrays."""
    lines = []
    for ln in ps.lines:
        lines.append({
            "termination": ln.termination,
            "x": [float(v) for v in ln.vertices[:, 0]],
            "y": [float(v) for v in ln.vertices[:, 1]],
            "z": [float(v) for v in ln.vertices[:, 2]],
            "t": [float(v) for v in ln.vertices[:, 3]],
            "speed": [float(v) for v in ln.vertices[:, 4]],
        })
    payload = {
        "version": 1,
        "dt": float(ps.dt),
        "mask_applied": ps.mask_applied,
        "lines": lines,
    }
    if ps.emitter is not None:
        payload["emitter"] = {
            "plane_id": ps.emitter.plane_id,
            "seed_count": ps.emitter.seed_count,
            "seed_layout": ps.emitter.seed_layout,
            "start_times": list(ps.emitter.start_times),
        }
    return payload


def write_pathlines_binary(ps: PathlineSet, path) -> None:
    """Little-endian binary: magic, counts, offset table, terminations, records."""
    n_lines = len(ps.lines)
    offsets = np.zeros(n_lines + 1, dtype=np.uint32)
    for i, ln in enumerate(ps.lines):
        offsets[i + 1] = offsets[i] + ln.vertices.shape[0]
    n_records = int(offsets[-1])
    records = np.concatenate([ln.vertices for ln in ps.lines], axis=0) \
        if n_records else np.zeros((0, 5))
    term_codes = np.array([TERMINATIONS.index(ln.termination)
                           for ln in ps.lines], dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<II", n_lines, n_records))
        f.write(offsets.astype("<u4").tobytes())
        f.write(term_codes.tobytes())
        f.write(records.astype("<f4").tobytes())


def read_pathlines_binary(path) -> PathlineSet:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != BINARY_MAGIC:
            raise ValueError("not a pathline binary (bad magic)")
        n_lines, n_records = struct.unpack("<II", f.read(8))
        offsets = np.frombuffer(f.read(4 * (n_lines + 1)), dtype="<u4")
        term_codes = np.frombuffer(f.read(n_lines), dtype=np.uint8)
        records = np.frombuffer(f.read(20 * n_records), dtype="<f4")
    records = records.reshape(n_records, 5).astype(np.float64)
    lines = tuple(
        Pathline(vertices=records[offsets[i]:offsets[i + 1]],
                 termination=TERMINATIONS[term_codes[i]])
        for i in range(n_lines))
    return PathlineSet(lines=lines, dt=0.0, mask_applied=False)
