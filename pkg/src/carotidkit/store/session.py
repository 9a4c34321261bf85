"""Study ingestion and session persistence.

Sessions are canonical JSON (sorted keys, 9-significant-digit floats) so
identical state always serializes to identical bytes.  Volumes are never
embedded: sessions carry path + content hash so stale data is detectable.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from ..centerline import Centerline, CrossSectionPlane, Frame
from ..contours import ClosedSplineContour, SliceAnnotation, validate_annotation
from ..errors import (
    CorruptHeader,
    IoFailure,
    SchemaVersionUnsupported,
    SessionValidationError,
    ShapeMismatch,
    UnsupportedFormat,
)
from ..jsonio import canonical_dump_bytes
from ..volume import BinaryMask, ScalarVolume, VelocityField
from .nifti import read_nifti, write_nifti
from .nrrdio import read_nrrd, write_nrrd

import json

SESSION_VERSION = 1


@dataclass(frozen=True)
class Study:
    id: str
    bb: ScalarVolume | None = None
    tof: ScalarVolume | None = None
    flow: VelocityField | None = None
    pcmra_mask: BinaryMask | None = None
    seg3d_mask: BinaryMask | None = None

    def __post_init__(self):
        if all(v is None for v in (self.bb, self.tof, self.flow,
                                   self.pcmra_mask, self.seg3d_mask)):
            raise ValueError("study needs at least one volume")


@dataclass
class Session:
    study_id: str
    centerlines: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)
    volume_refs: dict = field(default_factory=dict)
    version: int = SESSION_VERSION


# ---------------------------------------------------------------------------
# volume file I/O
# ---------------------------------------------------------------------------

def load_volume(path, fmt: str | None = None) -> ScalarVolume:
    name = str(path)
    if fmt is None:
        if name.endswith((".nii", ".nii.gz")):
            fmt = "nifti"
        elif name.endswith(".nrrd"):
            fmt = "nrrd"
        else:
            raise UnsupportedFormat(f"cannot infer format of {name!r}")
    if fmt == "nifti":
        return read_nifti(path)
    if fmt == "nrrd":
        return read_nrrd(path)
    raise UnsupportedFormat(f"unknown format {fmt!r}")


def save_volume(vol: ScalarVolume, path, dtype=np.float64) -> None:
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        write_nifti(vol, path, dtype=dtype)
    elif name.endswith(".nrrd"):
        write_nrrd(vol, path, dtype=dtype)
    else:
        raise UnsupportedFormat(f"cannot infer format of {name!r}")


def load_mask(path) -> BinaryMask:
    vol = load_volume(path)
    return BinaryMask(dims=vol.dims, affine=vol.affine, bits=vol.values > 0.5)


def save_mask(mask: BinaryMask, path) -> None:
    vol = ScalarVolume(dims=mask.dims, spacing=tuple(mask.affine.spacing),
                       affine=mask.affine,
                       values=mask.bits.astype(np.float64))
    save_volume(vol, path, dtype=np.uint8)


def load_flow(vx_path, vy_path, vz_path, venc: float, cycle_length: float,
              timepoints=None, scale: float = 1.0) -> VelocityField:
    """Assemble a velocity field from three 4D component volumes."""
    comps = [load_volume(p) for p in (vx_path, vy_path, vz_path)]
    ref = comps[0]
    for c in comps[1:]:
        if c.dims != ref.dims:
            raise ShapeMismatch(f"component dims differ: {c.dims} vs {ref.dims}")
        if not np.allclose(c.affine.matrix, ref.affine.matrix, atol=1e-6):
            raise ShapeMismatch("component affines differ")
        if c.time_axis != ref.time_axis:
            raise ShapeMismatch("component timepoints differ")
    if timepoints is None:
        if ref.time_axis is None:
            raise ShapeMismatch("components lack a time axis; pass timepoints")
        timepoints = ref.time_axis
    arrays = []
    for c in comps:
        vals = c.values if c.time_axis is not None else c.values[None, ...]
        arrays.append(vals * scale)
    components = np.stack(arrays, axis=-1)
    return VelocityField(dims=ref.dims, affine=ref.affine,
                         timepoints=tuple(timepoints),
                         cycle_length=cycle_length, components=components,
                         venc=venc)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# study manifest
# ---------------------------------------------------------------------------

def load_study(manifest_path) -> Study:
    """Load a study from a manifest JSON written by the phantom/CLI tooling."""
    try:
        with open(manifest_path, "r", encoding="ascii") as f:
            man = json.load(f)
    except (OSError, ValueError) as exc:
        raise CorruptHeader(f"cannot read study manifest: {exc}") from exc
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    kwargs = {}
    for key in ("bb", "tof"):
        if man.get(key):
            kwargs[key] = load_volume(resolve(man[key]["path"]))
    for key in ("pcmra_mask", "seg3d_mask"):
        if man.get(key):
            kwargs[key] = load_mask(resolve(man[key]["path"]))
    if man.get("flow"):
        fl = man["flow"]
        kwargs["flow"] = load_flow(resolve(fl["vx"]), resolve(fl["vy"]),
                                   resolve(fl["vz"]), venc=fl["venc"],
                                   cycle_length=fl["cycle_ms"])
    return Study(id=man["id"], **kwargs)


# ---------------------------------------------------------------------------
# session serialization
# ---------------------------------------------------------------------------

def _centerline_to_dict(c: Centerline) -> dict:
    return {"branch_label": c.branch_label,
            "points": [[float(v) for v in p] for p in c.points]}


def _plane_to_dict(p: CrossSectionPlane) -> dict:
    return {
        "id": p.id,
        "center": [float(v) for v in p.center],
        "tangent": [float(v) for v in p.frame.tangent],
        "normal": [float(v) for v in p.frame.normal],
        "arc_position": float(p.arc_position),
        "fov": float(p.fov),
        "in_plane_spacing": float(p.in_plane_spacing),
    }


def _contour_to_dict(c: ClosedSplineContour | None) -> dict | None:
    if c is None:
        return None
    return {"role": c.role, "seeds": [[float(u), float(v)] for u, v in c.seeds]}


def annotation_to_dict(a: SliceAnnotation) -> dict:
    return {
        "plane_id": a.plane_id,
        "timepoint": None if a.timepoint is None else float(a.timepoint),
        "usable": a.usable,
        "source": a.source,
        "lumen": _contour_to_dict(a.lumen),
        "wall": _contour_to_dict(a.wall),
    }


def session_to_dict(s: Session) -> dict:
    return {
        "version": s.version,
        "study_id": s.study_id,
        "parameters": s.parameters,
        "centerlines": [_centerline_to_dict(c) for c in s.centerlines],
        "planes": [_plane_to_dict(p) for p in s.planes],
        "annotations": [annotation_to_dict(a) for a in s.annotations],
        "volume_refs": s.volume_refs,
    }


def _plane_from_dict(d: dict) -> CrossSectionPlane:
    t = np.asarray(d["tangent"], dtype=np.float64)
    t /= np.linalg.norm(t)
    n = np.asarray(d["normal"], dtype=np.float64)
    n = n - (n @ t) * t
    n /= np.linalg.norm(n)
    frame = Frame(tangent=t, normal=n, binormal=np.cross(t, n))
    return CrossSectionPlane(id=d["id"], center=np.asarray(d["center"]),
                             frame=frame, arc_position=d["arc_position"],
                             fov=d["fov"], in_plane_spacing=d["in_plane_spacing"])


def contour_from_dict(d: dict | None) -> ClosedSplineContour | None:
    if d is None:
        return None
    return ClosedSplineContour(seeds=np.asarray(d["seeds"], dtype=np.float64),
                               role=d["role"])


def annotation_from_dict(d: dict) -> SliceAnnotation:
    return SliceAnnotation(
        plane_id=d["plane_id"], timepoint=d.get("timepoint"),
        usable=bool(d.get("usable", True)), source=d.get("source", "manual"),
        lumen=contour_from_dict(d.get("lumen")),
        wall=contour_from_dict(d.get("wall")))


def session_from_dict(data: dict) -> Session:
    version = data.get("version")
    if version != SESSION_VERSION:
        raise SchemaVersionUnsupported(f"session version {version} unsupported")
    planes = [_plane_from_dict(d) for d in data.get("planes", [])]
    plane_ids = {p.id for p in planes}
    annotations = []
    for d in data.get("annotations", []):
        a = annotation_from_dict(d)
        if a.plane_id not in plane_ids:
            raise SessionValidationError(
                f"annotation references unknown plane {a.plane_id!r}")
        violations = validate_annotation(a)
        if violations:
            raise SessionValidationError(
                f"annotation {a.plane_id}: " + "; ".join(violations))
        annotations.append(a)
    centerlines = [Centerline.from_points(np.asarray(d["points"]),
                                          branch_label=d.get("branch_label", "CCA"))
                   for d in data.get("centerlines", [])]
    return Session(study_id=data["study_id"], centerlines=centerlines,
                   planes=planes, annotations=annotations,
                   parameters=data.get("parameters", {}),
                   volume_refs=data.get("volume_refs", {}),
                   version=version)


def save_session(s: Session, path) -> None:
    payload = canonical_dump_bytes(session_to_dict(s))
    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write session {path}: {exc}") from exc


def load_session(path) -> Session:
    try:
        with open(path, "r", encoding="ascii") as f:
            data = json.load(f)
    except OSError as exc:
        raise IoFailure(f"cannot read session {path}: {exc}") from exc
    except ValueError as exc:
        raise SessionValidationError(f"malformed session JSON: {exc}") from exc
    return session_from_dict(data)
