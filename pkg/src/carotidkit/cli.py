"""Batch pipeline driver: every engine capability scriptable without the UI.

Stages communicate through files (study manifest JSON, session JSON, NIfTI,
PLY, pathline binaries) so each step is independently testable and the
whole pipeline runs headless.  Exit codes: 0 success, 1 usage error,
2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import biomarkers as bm
from .centerline import Centerline, cross_sections, extract_centerline, resample_arclength
from .errors import CarotidKitError
from .jsonio import canonical_dump_bytes
from .pathlines import (
    EmitterSpec,
    default_time_step,
    pathline_stats,
    pathlines_to_json_dict,
    trace_emitter,
    write_pathlines_binary,
)
from .phantom import PhantomSpec, generate_flow, generate_phantom
from .report import render_report_figures, write_report_csv, write_report_json
from .store import (
    Session,
    Study,
    file_sha256,
    load_session,
    load_study,
    save_mask,
    save_session,
    save_volume,
)
from .surface import export_mesh, map_vwt_to_mesh, marching_cubes
from .volume import ScalarVolume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(argv) -> dict:
    if "--config" not in argv:
        return {}
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return {}
    try:
        with open(argv[idx + 1]) as f:
            cfg = json.load(f)
        return {str(k).replace("-", "_"): v for k, v in cfg.items()}
    except (OSError, ValueError) as exc:
        print(f"carotidkit: cannot read config: {exc}", file=sys.stderr)
        sys.exit(EXIT_DATA)


def _xyz(text: str) -> tuple:
    try:
        x, y, z = (float(v) for v in text.split(","))
        return (x, y, z)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected x,y,z got {text!r}") from exc


def build_parser(cfg: dict) -> _Parser:
    p = _Parser(prog="carotidkit", description=__doc__)

    def d(key, default):
        return cfg.get(key, default)

    p.add_argument("--seed", type=int, default=d("seed", 0),
                   help="seed for any randomized step (outputs are "
                        "deterministic for a fixed seed)")
    p.add_argument("--threads", type=int, default=d("threads", 0),
                   help="cap internal thread pools (0 = library default)")
    p.add_argument("--config", help="JSON config mirroring flags; flags win")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write a synthetic study with truth")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--kind", default=d("kind", "straight_tube"),
                    choices=["straight_tube", "stenotic_tube", "bifurcation"])
    ph.add_argument("--lumen-radius", type=float, default=d("lumen_radius", 3.0))
    ph.add_argument("--min-radius", type=float, default=d("min_radius", 1.5))
    ph.add_argument("--wall-thickness", type=float, default=d("wall_thickness", 1.0))
    ph.add_argument("--length", type=float, default=d("length", 40.0))
    ph.add_argument("--voxel-spacing", type=float, default=d("voxel_spacing", 0.25))
    ph.add_argument("--vmax", type=float, default=d("vmax", 1.0))
    ph.add_argument("--timepoints", type=int, default=d("timepoints", 2))
    ph.add_argument("--waveform", default=d("waveform", "flat"),
                    choices=["flat", "half_sine"])
    ph.add_argument("--cycle", type=float, default=d("cycle", 800.0))
    ph.add_argument("--no-flow", action="store_true")

    ce = sub.add_parser("centerline", help="mask + seeds -> centerline JSON")
    ce.add_argument("--study", required=True, help="study manifest JSON")
    ce.add_argument("--mask", default=d("mask", "pcmra"),
                    choices=["pcmra", "seg3d"])
    ce.add_argument("--start", type=_xyz, required=True)
    ce.add_argument("--end", type=_xyz, required=True)
    ce.add_argument("--spacing", type=float, default=d("spacing", 0.5))
    ce.add_argument("--branch", default=d("branch", "CCA"),
                    choices=["CCA", "ICA", "ECA"])
    ce.add_argument("--out", required=True)

    pl = sub.add_parser("planes", help="centerline -> cross-section session")
    pl.add_argument("--study", required=True)
    pl.add_argument("--centerline", required=True, action="append",
                    help="centerline JSON (repeatable)")
    pl.add_argument("--spacing", type=float, default=d("plane_spacing", 2.0))
    pl.add_argument("--fov", type=float, default=d("fov", 30.0))
    pl.add_argument("--in-plane-spacing", type=float,
                    default=d("in_plane_spacing", 0.3))
    pl.add_argument("--out", required=True, help="session JSON")

    af = sub.add_parser("autofit", help="mask -> contours for all planes")
    af.add_argument("--study", required=True)
    af.add_argument("--session", required=True)
    af.add_argument("--source", default=d("source", "seg3d_slice"),
                    choices=["seg3d_slice", "imported_mask"])
    af.add_argument("--seeds", type=int, default=d("autofit_seeds", 12))
    af.add_argument("--out", required=True, help="updated session JSON")

    bmk = sub.add_parser("biomarkers", help="session -> CSV + JSON report")
    bmk.add_argument("--study", required=True)
    bmk.add_argument("--session", required=True)
    bmk.add_argument("--out", required=True, help="CSV path")
    bmk.add_argument("--json", help="JSON report path (default: CSV with .json)")
    bmk.add_argument("--mu", type=float, default=d("mu", bm.DEFAULT_VISCOSITY))
    bmk.add_argument("--n-rays", type=int, default=d("n_rays", 36))
    bmk.add_argument("--figures", help="figure directory (default: CSV dir)")
    bmk.add_argument("--no-figures", action="store_true")

    pa = sub.add_parser("pathlines", help="flow + emitter -> pathlines")
    pa.add_argument("--study", required=True)
    pa.add_argument("--session", required=True)
    pa.add_argument("--plane", required=True, help="emitter plane id")
    pa.add_argument("--seeds", type=int, default=d("pathline_seeds", 100))
    pa.add_argument("--start-times", default=d("start_times", "0"),
                    help="comma-separated start times in ms")
    pa.add_argument("--duration", type=float, default=d("duration", 0.0),
                    help="trace duration ms (0 = one cycle)")
    pa.add_argument("--dt", type=float, default=d("dt", 0.0),
                    help="step ms (0 = CFL-derived)")
    pa.add_argument("--unmasked", action="store_true",
                    help="skip angiographic mask gating")
    pa.add_argument("--out", required=True, help="binary pathline path")
    pa.add_argument("--json", help="also write JSON pathlines")

    me = sub.add_parser("mesh", help="mask -> PLY surface (VWT optional)")
    me.add_argument("--study", required=True)
    me.add_argument("--source", default=d("mesh_source", "seg3d"),
                    choices=["seg3d", "pcmra"])
    me.add_argument("--session", help="session JSON for VWT scalars")
    me.add_argument("--with-vwt", action="store_true")
    me.add_argument("--out", required=True, help="PLY path")

    se = sub.add_parser("serve", help="start the HTTP service")
    se.add_argument("--study", required=True, action="append",
                    help="study manifest (repeatable)")
    se.add_argument("--session", action="append", default=[],
                    help="session JSON to preload (matched by study id)")
    se.add_argument("--bind", default=d("bind", "127.0.0.1"))
    se.add_argument("--port", type=int, default=d("port", 8475))

    return p


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _write_json(payload: dict, path) -> None:
    with open(path, "wb") as f:
        f.write(canonical_dump_bytes(payload))


def cmd_phantom(args) -> int:
    spec = PhantomSpec(kind=args.kind, lumen_radius=args.lumen_radius,
                       min_radius=args.min_radius,
                       wall_thickness=args.wall_thickness, length=args.length,
                       voxel_spacing=args.voxel_spacing, v_max=args.vmax,
                       timepoints=max(args.timepoints, 2),
                       waveform=args.waveform, cycle_ms=args.cycle)
    study = generate_phantom(spec)
    os.makedirs(args.out, exist_ok=True)

    def put(name):
        return os.path.join(args.out, name)

    save_volume(study.bb, put("bb.nii.gz"))
    save_mask(study.lumen_mask, put("lumen_mask.nii.gz"))
    save_mask(study.wall_mask, put("wall_mask.nii.gz"))
    manifest = {
        "id": f"phantom-{args.kind}",
        "bb": {"path": "bb.nii.gz", "sha256": file_sha256(put("bb.nii.gz"))},
        "pcmra_mask": {"path": "lumen_mask.nii.gz",
                       "sha256": file_sha256(put("lumen_mask.nii.gz"))},
        "seg3d_mask": {"path": "wall_mask.nii.gz",
                       "sha256": file_sha256(put("wall_mask.nii.gz"))},
    }
    if not args.no_flow:
        field = generate_flow(spec)
        for axis, name in enumerate("xyz"):
            vol = ScalarVolume(dims=field.dims,
                               spacing=tuple(field.affine.spacing),
                               affine=field.affine,
                               values=field.components[..., axis],
                               time_axis=field.timepoints)
            save_volume(vol, put(f"flow_v{name}.nii.gz"))
        manifest["flow"] = {
            "vx": "flow_vx.nii.gz", "vy": "flow_vy.nii.gz",
            "vz": "flow_vz.nii.gz",
            "venc": float(field.venc), "cycle_ms": float(field.cycle_length),
            "sha256": {f"v{n}": file_sha256(put(f"flow_v{n}.nii.gz"))
                       for n in "xyz"},
        }
    _write_json(study.truth.to_json_dict(), put("truth.json"))
    _write_json(manifest, put("study.json"))
    print(f"phantom study written to {args.out}")
    return EXIT_OK


def cmd_centerline(args) -> int:
    study = load_study(args.study)
    mask = study.pcmra_mask if args.mask == "pcmra" else study.seg3d_mask
    if mask is None:
        raise CarotidKitError(f"study has no {args.mask} mask")
    raw = extract_centerline(mask, args.start, args.end,
                             branch_label=args.branch)
    cl = resample_arclength(raw.points, args.spacing, branch_label=args.branch)
    _write_json({"branch_label": cl.branch_label,
                 "points": [[float(v) for v in pt] for pt in cl.points]},
                args.out)
    print(f"centerline ({cl.length:.1f} mm, {cl.points.shape[0]} pts) "
          f"-> {args.out}")
    return EXIT_OK


def _load_centerline_json(path) -> Centerline:
    with open(path) as f:
        data = json.load(f)
    return Centerline.from_points(np.asarray(data["points"]),
                                  branch_label=data.get("branch_label", "CCA"))


def cmd_planes(args) -> int:
    with open(args.study) as f:
        manifest = json.load(f)
    centerlines = [_load_centerline_json(p) for p in args.centerline]
    planes = []
    for cl in centerlines:
        planes.extend(cross_sections(cl, spacing=args.spacing, fov=args.fov,
                                     in_plane_spacing=args.in_plane_spacing))
    refs = {k: v for k, v in manifest.items() if k != "id"}
    session = Session(study_id=manifest["id"], centerlines=centerlines,
                      planes=planes,
                      parameters={"plane_spacing": args.spacing,
                                  "fov": args.fov,
                                  "in_plane_spacing": args.in_plane_spacing},
                      volume_refs=refs)
    save_session(session, args.out)
    print(f"{len(planes)} planes -> {args.out}")
    return EXIT_OK


def cmd_autofit(args) -> int:
    from .service import AppState, autofit_annotation

    study = load_study(args.study)
    session = load_session(args.session)
    state = AppState()
    ws = state.add_study(study)
    ws.planes = session.planes
    fitted = []
    skipped = 0
    for plane in session.planes:
        try:
            fitted.append(autofit_annotation(ws, plane.id, args.source,
                                             n_seeds=args.seeds))
        except Exception as exc:  # per-plane failures are data, not fatal
            skipped += 1
            print(f"autofit: skipping {plane.id}: {exc}", file=sys.stderr)
    session.annotations = fitted
    save_session(session, args.out)
    print(f"{len(fitted)} planes fitted ({skipped} skipped) -> {args.out}")
    return EXIT_OK


def _study_flow(study: Study):
    return study.flow


def cmd_biomarkers(args) -> int:
    study = load_study(args.study)
    session = load_session(args.session)
    annotations = {a.plane_id: a for a in session.annotations}
    report = bm.build_report(session.planes, annotations,
                             field=_study_flow(study), mu=args.mu,
                             n_rays=args.n_rays)
    write_report_csv(report, args.out)
    json_path = args.json or os.path.splitext(args.out)[0] + ".json"
    write_report_json(report, json_path)
    outputs = [args.out, json_path]
    if not args.no_figures:
        fig_dir = args.figures or os.path.dirname(os.path.abspath(args.out))
        outputs += render_report_figures(report, fig_dir)
    print(f"{len(report.rows)} rows -> " + ", ".join(str(o) for o in outputs))
    return EXIT_OK


def cmd_pathlines(args) -> int:
    study = load_study(args.study)
    session = load_session(args.session)
    if study.flow is None:
        raise CarotidKitError("study has no velocity field")
    plane = next((p for p in session.planes if p.id == args.plane), None)
    if plane is None:
        raise CarotidKitError(f"session has no plane {args.plane!r}")
    ann = next((a for a in session.annotations if a.plane_id == args.plane),
               None)
    lumen = ann.lumen if ann is not None else None
    start_times = tuple(float(t) for t in str(args.start_times).split(","))
    spec = EmitterSpec(plane_id=args.plane, seed_count=args.seeds,
                       start_times=start_times)
    dt = args.dt if args.dt > 0 else default_time_step(study.flow)
    duration = args.duration if args.duration > 0 else study.flow.cycle_length
    mask = None if args.unmasked else study.pcmra_mask
    ps = trace_emitter(study.flow, plane, lumen, spec, duration=duration,
                       dt=dt, mask=mask)
    write_pathlines_binary(ps, args.out)
    if args.json:
        _write_json(pathlines_to_json_dict(ps), args.json)
    st = pathline_stats(ps)
    print(f"{len(ps.lines)} lines, max speed {st.max_speed:.3f} m/s, "
          f"fraction >{st.threshold:g} m/s: {st.fraction_above:.3f} -> {args.out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    study = load_study(args.study)
    mask = study.seg3d_mask if args.source == "seg3d" else study.pcmra_mask
    if mask is None:
        raise CarotidKitError(f"study has no {args.source} mask")
    mesh = marching_cubes(mask, tag="outer_wall")
    if args.with_vwt:
        if not args.session:
            raise CarotidKitError("--with-vwt needs --session")
        session = load_session(args.session)
        pairs = []
        for plane in session.planes:
            ann = next((a for a in session.annotations
                        if a.plane_id == plane.id), None)
            if ann is None or not ann.usable or ann.lumen is None \
                    or ann.wall is None:
                continue
            pairs.append((plane, bm.vwt_profile(ann.lumen, ann.wall,
                                                plane_id=plane.id)))
        if not pairs:
            raise CarotidKitError("session has no usable lumen+wall annotations")
        mesh = map_vwt_to_mesh(mesh, [p for p, _ in pairs],
                               [pr for _, pr in pairs])
    export_mesh(mesh, args.out)
    print(f"{mesh.vertices.shape[0]} vertices, {mesh.triangles.shape[0]} "
          f"triangles -> {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import AppState, serve

    state = AppState()
    for manifest in args.study:
        study = load_study(manifest)
        ws = state.add_study(study)
        for spath in args.session:
            session = load_session(spath)
            if session.study_id == study.id:
                ws.centerlines = session.centerlines
                ws.planes = session.planes
                ws.annotations = {a.plane_id: (i + 1, a)
                                  for i, a in enumerate(session.annotations)}
                ws.parameters = session.parameters
    serve(state, bind=args.bind, port=args.port)
    return EXIT_OK


_COMMANDS = {
    "phantom": cmd_phantom,
    "centerline": cmd_centerline,
    "planes": cmd_planes,
    "autofit": cmd_autofit,
    "biomarkers": cmd_biomarkers,
    "pathlines": cmd_pathlines,
    "mesh": cmd_mesh,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cfg = _load_config(argv)
    parser = build_parser(cfg)
    args = parser.parse_args(argv)
    np.random.seed(args.seed)
    if args.threads and args.threads > 0:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=args.threads)
        except ImportError:
            pass
    try:
        return _COMMANDS[args.command](args)
    except CarotidKitError as exc:
        print(f"carotidkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"carotidkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
