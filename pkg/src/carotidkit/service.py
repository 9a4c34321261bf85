"""HTTP service exposing the engine to the annotation UI.

In-memory state: one workspace per loaded study holding centerlines,
cross-section planes, and annotations with per-plane revision counters.
Writes use optimistic concurrency (revision check under a lock) because a
single annotator dragging seeds is the common case; conflicts surface as
409 instead of blocking.  All GET responses are pure functions of state,
so identical requests return byte-identical payloads.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import Body, FastAPI, Request
from fastapi.responses import JSONResponse
from scipy.ndimage import binary_fill_holes

from . import biomarkers as bm
from .centerline import cross_sections, extract_centerline, resample_arclength
from .contours import (
    PlaneGrid,
    SliceAnnotation,
    contour_to_mask,
    fit_contour_to_mask,
    validate_annotation,
)
from .errors import CarotidKitError, ComponentTooSmall, EmptyMask
from .pathlines import (
    EmitterSpec,
    default_time_step,
    pathline_stats,
    pathlines_to_json_dict,
    trace_emitter,
)
from .store.session import (
    Session,
    Study,
    annotation_from_dict,
    annotation_to_dict,
    session_from_dict,
    session_to_dict,
)
from .surface import map_vwt_to_mesh, marching_cubes, mesh_to_json_dict
from .volume import resample_mask_plane, resample_plane


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, details=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.details = details


@dataclass
class Workspace:
    study: Study
    centerlines: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    annotations: dict = field(default_factory=dict)  # plane_id -> (rev, ann)
    parameters: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def plane(self, plane_id: str):
        for p in self.planes:
            if p.id == plane_id:
                return p
        raise ApiError(404, "UnknownPlane", f"no plane {plane_id!r}")


@dataclass
class AppState:
    workspaces: dict = field(default_factory=dict)

    def add_study(self, study: Study, parameters: dict | None = None) -> Workspace:
        ws = Workspace(study=study, parameters=dict(parameters or {}))
        self.workspaces[study.id] = ws
        return ws

    def workspace(self, study_id: str) -> Workspace:
        if study_id not in self.workspaces:
            raise ApiError(404, "UnknownStudy", f"no study {study_id!r}")
        return self.workspaces[study_id]


DEFAULT_PARAMS = {
    "centerline_spacing": 0.5,
    "plane_spacing": 2.0,
    "fov": 30.0,
    "in_plane_spacing": 0.3,
    "mu": bm.DEFAULT_VISCOSITY,
    "n_rays": 36,
    "autofit_seeds": 12,
}


def _params(ws: Workspace) -> dict:
    merged = dict(DEFAULT_PARAMS)
    merged.update(ws.parameters)
    return merged


def _study_summary(ws: Workspace) -> dict:
    s = ws.study
    return {
        "id": s.id,
        "volumes": {
            "bb": s.bb is not None,
            "tof": s.tof is not None,
            "flow": s.flow is not None,
            "pcmra_mask": s.pcmra_mask is not None,
            "seg3d_mask": s.seg3d_mask is not None,
        },
        "n_planes": len(ws.planes),
        "n_annotations": len(ws.annotations),
    }


def _plane_payload(p) -> dict:
    return {
        "id": p.id,
        "center": [float(v) for v in p.center],
        "tangent": [float(v) for v in p.frame.tangent],
        "normal": [float(v) for v in p.frame.normal],
        "binormal": [float(v) for v in p.frame.binormal],
        "arc_position": float(p.arc_position),
        "fov": float(p.fov),
        "in_plane_spacing": float(p.in_plane_spacing),
    }


def slice_image_payload(ws: Workspace, plane_id: str, modality: str,
                        t_ms: float | None = None) -> dict:
    plane = ws.plane(plane_id)
    vol = getattr(ws.study, modality, None)
    if modality not in ("bb", "tof") or vol is None:
        raise ApiError(409, "ModalityMissing", f"study has no {modality!r} volume")
    time_index = 0
    if vol.time_axis is not None and t_ms is not None:
        time_index = int(np.argmin(np.abs(np.asarray(vol.time_axis) - t_ms)))
    img = resample_plane(vol, plane.center, plane.axes,
                         (plane.fov, plane.fov), plane.in_plane_spacing,
                         time_index=time_index)
    inside = img.inside
    if inside.any():
        lo = float(img.values[inside].min())
        hi = float(img.values[inside].max())
    else:
        lo, hi = 0.0, 0.0
    if hi > lo:
        scaled = np.clip((img.values - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.zeros_like(img.values)
    pix = np.rint(scaled * 65535).astype("<u2")
    pix[~inside] = 0
    # row-major rows = v axis, columns = u axis
    raw = np.ascontiguousarray(pix.T).tobytes()
    return {
        "plane_id": plane_id,
        "modality": modality,
        "width": img.values.shape[0],
        "height": img.values.shape[1],
        "spacing": float(plane.in_plane_spacing),
        "window": {"min": lo, "max": hi},
        "pixels": base64.b64encode(raw).decode("ascii"),
    }


def _plane_mask_grid(plane) -> PlaneGrid:
    n = max(1, int(round(plane.fov / plane.in_plane_spacing)))
    return PlaneGrid(nu=n, nv=n, spacing=plane.in_plane_spacing,
                     origin=(-(n / 2.0) * plane.in_plane_spacing,
                             -(n / 2.0) * plane.in_plane_spacing))


def autofit_annotation(ws: Workspace, plane_id: str, source: str,
                       n_seeds: int = 12) -> SliceAnnotation:
    """Fit lumen/wall contours from a mask volume; result is not stored."""
    plane = ws.plane(plane_id)
    if source == "seg3d_slice":
        mask_vol = ws.study.seg3d_mask
    elif source == "imported_mask":
        mask_vol = ws.study.pcmra_mask
    else:
        raise ApiError(422, "BadParams", f"unknown autofit source {source!r}")
    if mask_vol is None:
        raise ApiError(409, "NoMaskSource", f"study has no mask for {source!r}")

    grid = _plane_mask_grid(plane)
    # trilinear on the binary field + 0.5 threshold: the recovered boundary
    # sits at the true interface instead of half a voxel outside (NN bias)
    from .volume import ScalarVolume
    as_float = ScalarVolume(dims=mask_vol.dims,
                            spacing=tuple(mask_vol.affine.spacing),
                            affine=mask_vol.affine,
                            values=mask_vol.bits.astype(np.float64))
    img = resample_plane(as_float, plane.center, plane.axes,
                         (plane.fov, plane.fov), plane.in_plane_spacing)
    bits = (img.values >= 0.5) & img.inside
    try:
        if source == "seg3d_slice":
            # wall annulus: outer contour from the filled slice, lumen from the hole
            filled = binary_fill_holes(bits)
            wall = fit_contour_to_mask(filled, grid, n_seeds=n_seeds,
                                       role="outer_wall")
            lumen = None
            hole = filled & ~bits
            if hole.sum() >= 9:
                lumen = fit_contour_to_mask(hole, grid, n_seeds=n_seeds,
                                            role="lumen")
            return SliceAnnotation(plane_id=plane_id, lumen=lumen, wall=wall,
                                   source="auto")
        lumen = fit_contour_to_mask(bits, grid, n_seeds=n_seeds, role="lumen")
        return SliceAnnotation(plane_id=plane_id, lumen=lumen, source="auto")
    except (EmptyMask, ComponentTooSmall) as exc:
        raise ApiError(422, "ComponentTooSmall", str(exc)) from exc


def compute(ws: Workspace, what: str, params: dict) -> dict:
    study = ws.study
    p = _params(ws)
    if what == "biomarkers":
        annotations = {pid: ann for pid, (_, ann) in ws.annotations.items()}
        report = bm.build_report(ws.planes, annotations, field=study.flow,
                                 mu=float(params.get("mu", p["mu"])),
                                 n_rays=int(params.get("n_rays", p["n_rays"])))
        from .report import report_to_dict
        return report_to_dict(report)
    if what == "pathlines":
        if study.flow is None:
            raise ApiError(409, "MissingInputs", "study has no velocity field")
        plane_id = params.get("plane_id")
        if not plane_id:
            raise ApiError(422, "BadParams", "pathlines need an emitter plane_id")
        plane = ws.plane(plane_id)
        lumen = None
        if plane_id in ws.annotations:
            lumen = ws.annotations[plane_id][1].lumen
        spec = EmitterSpec(plane_id=plane_id,
                           seed_count=int(params.get("seed_count", 100)),
                           start_times=tuple(params.get("start_times", [0.0])))
        dt = params.get("dt")
        if dt is None:
            dt = default_time_step(study.flow)
        mask = study.pcmra_mask if params.get("masked", True) else None
        ps = trace_emitter(study.flow, plane, lumen, spec,
                           duration=float(params.get("duration",
                                                     study.flow.cycle_length)),
                           dt=float(dt), mask=mask)
        payload = pathlines_to_json_dict(ps)
        st = pathline_stats(ps, v_threshold=float(params.get("v_threshold", 1.0)))
        payload["stats"] = {
            "max_speed": st.max_speed,
            "fraction_above": st.fraction_above,
            "threshold": st.threshold,
            "n_vertices": st.n_vertices,
        }
        return payload
    if what == "mesh":
        source = params.get("source", "seg3d")
        mask = study.seg3d_mask if source == "seg3d" else study.pcmra_mask
        if mask is None:
            raise ApiError(409, "MissingInputs", f"study has no {source} mask")
        mesh = marching_cubes(mask, tag="outer_wall")
        if params.get("with_vwt", False):
            pairs = []
            for plane in ws.planes:
                rec = ws.annotations.get(plane.id)
                if rec is None:
                    continue
                ann = rec[1]
                if not ann.usable or ann.lumen is None or ann.wall is None:
                    continue
                prof = bm.vwt_profile(ann.lumen, ann.wall,
                                      n_rays=int(params.get("n_rays", p["n_rays"])),
                                      plane_id=plane.id)
                pairs.append((plane, prof))
            if pairs:
                mesh = map_vwt_to_mesh(mesh, [pl for pl, _ in pairs],
                                       [pr for _, pr in pairs])
        return mesh_to_json_dict(mesh)
    raise ApiError(422, "BadParams", f"unknown computation {what!r}")


def create_app(state: AppState) -> FastAPI:
    app = FastAPI(title="carotidkit", docs_url=None, redoc_url=None)

    @app.exception_handler(ApiError)
    async def handle_api_error(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={
            "code": exc.code, "message": exc.message, "details": exc.details})

    @app.exception_handler(CarotidKitError)
    async def handle_toolkit_error(_req: Request, exc: CarotidKitError):
        return JSONResponse(status_code=422, content={
            "code": type(exc).__name__, "message": str(exc), "details": None})

    @app.get("/studies")
    def list_studies():
        return [_study_summary(ws) for _, ws in
                sorted(state.workspaces.items())]

    @app.get("/studies/{study_id}")
    def get_study(study_id: str):
        return _study_summary(state.workspace(study_id))

    @app.post("/studies/{study_id}/centerlines")
    def post_centerline(study_id: str, payload: dict = Body(...)):
        ws = state.workspace(study_id)
        p = _params(ws)
        source = payload.get("mask_source", "pcmra")
        mask = ws.study.pcmra_mask if source == "pcmra" else ws.study.seg3d_mask
        if mask is None:
            raise ApiError(409, "MissingInputs", f"study has no {source} mask")
        try:
            raw = extract_centerline(mask, payload["start"], payload["end"],
                                     branch_label=payload.get("branch_label", "CCA"))
        except KeyError as exc:
            raise ApiError(422, "BadParams", f"missing field {exc}") from exc
        cl = resample_arclength(raw.points,
                                float(payload.get("spacing",
                                                  p["centerline_spacing"])),
                                branch_label=raw.branch_label)
        with ws.lock:
            ws.centerlines = [c for c in ws.centerlines
                              if c.branch_label != cl.branch_label]
            ws.centerlines.append(cl)
            ws.planes = []
            for c in ws.centerlines:
                ws.planes.extend(cross_sections(
                    c, spacing=float(payload.get("plane_spacing",
                                                 p["plane_spacing"])),
                    fov=float(payload.get("fov", p["fov"])),
                    in_plane_spacing=float(payload.get("in_plane_spacing",
                                                       p["in_plane_spacing"]))))
        return {"branch_label": cl.branch_label,
                "length": float(cl.length),
                "n_points": int(cl.points.shape[0]),
                "planes": [_plane_payload(pl) for pl in ws.planes]}

    @app.get("/studies/{study_id}/planes")
    def get_planes(study_id: str):
        ws = state.workspace(study_id)
        return [_plane_payload(p) for p in ws.planes]

    @app.get("/studies/{study_id}/planes/{plane_id}/image")
    def get_image(study_id: str, plane_id: str, modality: str = "bb",
                  t: float | None = None):
        return slice_image_payload(state.workspace(study_id), plane_id,
                                   modality, t)

    @app.get("/studies/{study_id}/planes/{plane_id}/annotation")
    def get_annotation(study_id: str, plane_id: str):
        ws = state.workspace(study_id)
        ws.plane(plane_id)
        rec = ws.annotations.get(plane_id)
        if rec is None:
            raise ApiError(404, "NoAnnotation", f"plane {plane_id!r} not annotated")
        rev, ann = rec
        return {"revision": rev, "annotation": annotation_to_dict(ann)}

    @app.put("/studies/{study_id}/planes/{plane_id}/annotation")
    def put_annotation(study_id: str, plane_id: str, payload: dict = Body(...)):
        ws = state.workspace(study_id)
        ws.plane(plane_id)
        try:
            ann = annotation_from_dict({**payload["annotation"],
                                        "plane_id": plane_id})
        except (KeyError, TypeError, ValueError, CarotidKitError) as exc:
            raise ApiError(422, "ValidationFailed", str(exc),
                           details=[str(exc)]) from exc
        violations = validate_annotation(ann)
        if violations:
            raise ApiError(422, "ValidationFailed",
                           "annotation failed validation", details=violations)
        base = payload.get("base_revision", 0)
        with ws.lock:
            current = ws.annotations.get(plane_id, (0, None))[0]
            if base != current:
                raise ApiError(409, "StaleRevision",
                               f"annotation is at revision {current}, not {base}")
            rev = current + 1
            ws.annotations[plane_id] = (rev, ann)
        return {"revision": rev}

    @app.post("/studies/{study_id}/planes/{plane_id}/autofit")
    def post_autofit(study_id: str, plane_id: str, payload: dict = Body(...)):
        ws = state.workspace(study_id)
        ann = autofit_annotation(ws, plane_id,
                                 payload.get("source", "seg3d_slice"),
                                 n_seeds=int(payload.get("n_seeds",
                                                         _params(ws)["autofit_seeds"])))
        return {"annotation": annotation_to_dict(ann)}

    @app.post("/studies/{study_id}/compute/{what}")
    def post_compute(study_id: str, what: str, payload: dict = Body(default={})):
        return compute(state.workspace(study_id), what, payload)

    @app.get("/sessions/{study_id}")
    def get_session(study_id: str):
        ws = state.workspace(study_id)
        session = Session(
            study_id=study_id, centerlines=list(ws.centerlines),
            planes=list(ws.planes),
            annotations=[ann for _, ann in ws.annotations.values()],
            parameters=_params(ws))
        return session_to_dict(session)

    @app.put("/sessions/{study_id}")
    def put_session(study_id: str, payload: dict = Body(...)):
        ws = state.workspace(study_id)
        try:
            session = session_from_dict({**payload, "study_id": study_id})
        except CarotidKitError as exc:
            raise ApiError(422, "ValidationFailed", str(exc)) from exc
        with ws.lock:
            ws.centerlines = session.centerlines
            ws.planes = session.planes
            ws.annotations = {a.plane_id: (i + 1, a)
                              for i, a in enumerate(session.annotations)}
            ws.parameters = session.parameters
        return {"study_id": study_id, "n_planes": len(ws.planes),
                "n_annotations": len(ws.annotations)}

    return app


def serve(state: AppState, bind: str = "127.0.0.1", port: int = 8475):
    import uvicorn

    uvicorn.run(create_app(state), host=bind, port=port, log_level="warning")
