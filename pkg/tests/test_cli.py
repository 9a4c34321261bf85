import json
import os
import subprocess
import sys

import numpy as np
import pytest

CLI = [sys.executable, "-m", "carotidkit.cli"]


def run(args, cwd=None):
    return subprocess.run(CLI + args, capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full phantom -> centerline -> planes -> autofit -> biomarkers run."""
    root = tmp_path_factory.mktemp("pipe")
    study = root / "study"
    r = run(["phantom", "--out", str(study), "--length", "24",
             "--voxel-spacing", "0.3", "--timepoints", "3"])
    assert r.returncode == 0, r.stderr
    r = run(["centerline", "--study", str(study / "study.json"),
             "--mask", "pcmra", "--start", "0,0,1", "--end", "0,0,23",
             "--out", str(root / "cl.json")])
    assert r.returncode == 0, r.stderr
    r = run(["planes", "--study", str(study / "study.json"),
             "--centerline", str(root / "cl.json"), "--spacing", "2",
             "--fov", "12", "--out", str(root / "session.json")])
    assert r.returncode == 0, r.stderr
    r = run(["autofit", "--study", str(study / "study.json"),
             "--session", str(root / "session.json"),
             "--out", str(root / "fitted.json")])
    assert r.returncode == 0, r.stderr
    r = run(["biomarkers", "--study", str(study / "study.json"),
             "--session", str(root / "fitted.json"),
             "--out", str(root / "report.csv"),
             "--figures", str(root / "figs")])
    assert r.returncode == 0, r.stderr
    return root


class TestHelp:
    @pytest.mark.parametrize("sub", [None, "phantom", "centerline", "planes",
                                     "autofit", "biomarkers", "pathlines",
                                     "mesh", "serve"])
    def test_help_exits_zero(self, sub):
        args = ([sub] if sub else []) + ["--help"]
        r = run(args)
        assert r.returncode == 0
        assert "usage" in r.stdout.lower()

    def test_unknown_flag_exits_one(self):
        r = run(["phantom", "--does-not-exist"])
        assert r.returncode == 1
        assert "usage" in r.stderr.lower()

    def test_missing_subcommand_exits_one(self):
        r = run([])
        assert r.returncode == 1


class TestDataErrors:
    def test_missing_study_exits_two(self, tmp_path):
        r = run(["centerline", "--study", str(tmp_path / "nope.json"),
                 "--start", "0,0,0", "--end", "1,1,1",
                 "--out", str(tmp_path / "cl.json")])
        assert r.returncode == 2
        assert r.stderr.strip()


class TestPipeline:
    def test_vwt_matches_truth(self, pipeline):
        # phantom ground-truth oracle: wall thickness 1 mm everywhere
        truth = json.loads((pipeline / "study" / "truth.json").read_text())
        assert truth["wall_thickness"] == 1.0
        rows = (pipeline / "report.csv").read_text().strip().splitlines()[1:]
        header = (pipeline / "report.csv").read_text().splitlines()[0].split(",")
        idx = header.index("vwt_mean")
        means = [float(r.split(",")[idx]) for r in rows if r.split(",")[idx]]
        assert means, "no VWT rows"
        good = [m for m in means if abs(m - 1.0) <= 0.15]
        assert len(good) >= 0.9 * len(means)

    def test_csv_row_count_equals_usable_planes(self, pipeline):
        session = json.loads((pipeline / "fitted.json").read_text())
        usable = sum(1 for a in session["annotations"] if a["usable"])
        rows = (pipeline / "report.csv").read_text().strip().splitlines()
        assert len(rows) - 1 == usable

    def test_unusable_slices_drop_rows(self, pipeline):
        session = json.loads((pipeline / "fitted.json").read_text())
        session["annotations"][0]["usable"] = False
        poisoned = pipeline / "poisoned.json"
        poisoned.write_text(json.dumps(session))
        out = pipeline / "poisoned.csv"
        r = run(["biomarkers", "--study", str(pipeline / "study" / "study.json"),
                 "--session", str(poisoned), "--out", str(out), "--no-figures"])
        assert r.returncode == 0, r.stderr
        rows = out.read_text().strip().splitlines()
        base = (pipeline / "report.csv").read_text().strip().splitlines()
        assert len(rows) == len(base) - 1

    def test_figures_rendered(self, pipeline):
        figs = sorted(os.listdir(pipeline / "figs"))
        assert "biomarkers_vwt.png" in figs
        assert "biomarkers_waveforms.png" in figs

    def test_pathlines_and_mesh(self, pipeline):
        study = pipeline / "study" / "study.json"
        r = run(["pathlines", "--study", str(study),
                 "--session", str(pipeline / "fitted.json"),
                 "--plane", "CCA-003", "--seeds", "20", "--duration", "40",
                 "--out", str(pipeline / "lines.cpln"),
                 "--json", str(pipeline / "lines.json")])
        assert r.returncode == 0, r.stderr
        blob = (pipeline / "lines.cpln").read_bytes()
        assert blob[:8] == b"CPLN\x00\x01\x00\x00"
        r = run(["mesh", "--study", str(study), "--source", "seg3d",
                 "--session", str(pipeline / "fitted.json"), "--with-vwt",
                 "--out", str(pipeline / "wall.ply")])
        assert r.returncode == 0, r.stderr
        head = (pipeline / "wall.ply").read_bytes()[:200]
        assert head.startswith(b"ply") and b"quality" in head


class TestConfig:
    def test_config_mirrors_flags_and_flags_win(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"length": 12.0, "voxel_spacing": 0.5}))
        out1 = tmp_path / "s1"
        r = run(["--config", str(cfg), "phantom", "--out", str(out1)])
        assert r.returncode == 0, r.stderr
        truth = json.loads((out1 / "truth.json").read_text())
        assert truth["length"] == 12.0
        out2 = tmp_path / "s2"
        r = run(["--config", str(cfg), "phantom", "--out", str(out2),
                 "--length", "16"])
        assert r.returncode == 0, r.stderr
        truth2 = json.loads((out2 / "truth.json").read_text())
        assert truth2["length"] == 16.0
