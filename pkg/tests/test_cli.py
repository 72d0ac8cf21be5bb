import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ttshs.cli import main

G, M = 0.1, 2.0
K_X = 100.0 * (1 + 2 * G * M) / (2 * M)


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def gene_doc(k=K_X, b=0.0, dist=None):
    return {"dim": 1, "A": [[-G]], "a_hat": [k],
            "reset": {"J": [[0.5]], "B": [[b]], "c_hat": [0.5]},
            "distribution": dist or {"family": "exponential", "mean": M}}


def scalar_doc(J, gm):
    return {"dim": 1, "A": [[-gm]], "a_hat": [1.0], "reset": {"J": [[J]]},
            "distribution": {"family": "exponential", "mean": 1.0}}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- check -----------------------------------------------------------------------
def test_check_exit_codes(tmp_path, capsys):
    code, out, _ = run(["check", "--model", write(tmp_path / "g.json", gene_doc())], capsys)
    assert code == 0 and "mean_stable: yes" in out
    rep = tmp_path / "r.json"
    run(["check", "--model", tmp_path / "g.json", "--out", rep], capsys)
    v = json.loads(rep.read_text())["verdict"]
    assert v["mean_spectral_radius"] < 1 and v["second_spectral_radius"] < 1
    assert run(["check", "--model", write(tmp_path / "u.json", scalar_doc(2.0, 0.5))], capsys)[0] == 2
    # second-moment radius 4 / (1 + 2 g m) = 1 on the boundary, mean radius 0.8
    assert run(["check", "--model", write(tmp_path / "m.json", scalar_doc(2.0, 1.5))], capsys)[0] == 3


def test_malformed_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dim": 1,\n "A": [[-1]],\n "typo": 3}')
    code, _, err = run(["check", "--model", bad], capsys)
    assert code == 1
    assert "unknown key 'typo'" in err and "line 3" in err
    assert run(["check", "--model", tmp_path / "missing.json"], capsys)[0] == 1
    nodist = write(tmp_path / "nd.json", {"dim": 1, "A": [[-1]]})
    assert run(["moments", "--model", nodist], capsys)[0] == 1
    assert run(["moments", "--model", nodist, "--dist", '{"family": "exponential", "mean": 1}'], capsys)[0] == 0


# -- moments ---------------------------------------------------------------------
def test_moments_gene_mean(tmp_path, capsys):
    out = tmp_path / "mom.json"
    code, summary, _ = run(["moments", "--model", write(tmp_path / "g.json", gene_doc()), "--out", out], capsys)
    assert code == 0 and "method_path" in summary
    doc = json.loads(out.read_text())
    assert abs(doc["mean"][0] - 100.0) < 1e-6
    man = json.loads((tmp_path / "mom.json.manifest.json").read_text())
    assert man["outputs"] == [str(out)]
    assert len(man["model_file_hash"]) == 64
    assert man["distribution"] == {"family": "exponential", "mean": 2.0}


def test_moments_general_vs_closed(tmp_path, capsys):
    path = write(tmp_path / "g.json", gene_doc(b=0.5, dist={"family": "gamma", "shape": 4.0, "scale": 0.5}))
    docs = {}
    for method in ("general", "closed"):
        out = tmp_path / f"{method}.json"
        assert run(["moments", "--model", path, "--method", method, "--out", out], capsys)[0] == 0
        docs[method] = json.loads(out.read_text())
    assert docs["general"]["method_path"] != docs["closed"]["method_path"]
    for key in ("mean", "second_moment"):
        a, b = np.array(docs["general"][key]), np.array(docs["closed"][key])
        assert np.max(np.abs(a - b) / np.abs(b)) < 1e-8


def test_moments_verify(tmp_path, capsys):
    path = write(tmp_path / "g.json", gene_doc(b=0.5))
    out = tmp_path / "v.json"
    code, summary, _ = run(["moments", "--model", path, "--verify", "--out", out], capsys)
    assert code == 0 and "verify: ok" in summary
    assert json.loads(out.read_text())["verify"]["relative_discrepancy"] <= 1e-6


def test_moments_divergent_names_moment(tmp_path, capsys):
    doc = {"dim": 1, "A": [[0.0]], "a_hat": [1.0], "reset": {"J": [[0.5]]},
           "distribution": {"family": "lomax", "alpha": 2.5, "scale": 1.5}}
    code, _, err = run(["moments", "--model", write(tmp_path / "a0.json", doc)], capsys)
    assert code == 1
    assert "divergent_moment" in err and "<tau_s^3>" in err


def test_moments_unstable_needs_force(tmp_path, capsys):
    path = write(tmp_path / "u.json", scalar_doc(2.0, 0.5))
    code, _, err = run(["moments", "--model", path], capsys)
    assert code == 2 and "--force" in err
    assert run(["moments", "--model", path, "--force"], capsys)[0] == 0


def test_csv_format(tmp_path, capsys):
    code, out, _ = run(["moments", "--model", write(tmp_path / "g.json", gene_doc()), "--format", "csv"], capsys)
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["key", "value"]
    assert float(dict(rows[1:])["mean[0]"]) == pytest.approx(100.0, rel=1e-12)


# -- simulate --------------------------------------------------------------------
def test_simulate_byte_identical(tmp_path, capsys):
    path = write(tmp_path / "g.json", gene_doc(b=0.5))
    outs = []
    for tag in ("a", "b"):
        out, dump = tmp_path / f"{tag}.json", tmp_path / f"{tag}.csv"
        args = ["simulate", "--model", path, "--seed", 42, "--trajectories", 50, "--events", 60, "--burn-in", 10,
                "--out", out, "--dump", dump]
        assert run(args, capsys)[0] == 0
        outs.append((out.read_bytes(), dump.read_bytes()))
    assert outs[0] == outs[1]
    man = json.loads((tmp_path / "a.json.manifest.json").read_text())
    assert man["outputs"] == [str(tmp_path / "a.csv"), str(tmp_path / "a.json")]
    assert man["config"]["master_seed"] == 42


def test_simulate_compare(tmp_path, capsys):
    path = write(tmp_path / "g.json", gene_doc(b=0.5))
    out = tmp_path / "c.json"
    assert run(["simulate", "--model", path, "--seed", 1, "--compare", "--out", out], capsys)[0] == 0
    assert json.loads(out.read_text())["compare"]["max_abs_z"] < 3


def test_simulate_unstable_flagged(tmp_path, capsys):
    doc = {"dim": 1, "A": [[0.3]], "a_hat": [1.0], "reset": {"J": [[1.0]], "kernel": "deterministic"},
           "distribution": {"family": "exponential", "mean": 1.0}}
    out = tmp_path / "s.json"
    code, summary, _ = run(["simulate", "--model", write(tmp_path / "u.json", doc), "--trajectories", 100,
                            "--events", 100, "--burn-in", 10, "--compare", "--out", out], capsys)
    assert code == 0 and "nonstationary" in summary
    d = json.loads(out.read_text())
    assert d["nonstationary"] and d["compare"]["status"] == "unavailable"


# -- sweep -----------------------------------------------------------------------
def test_sweep_grid_and_empty(tmp_path, capsys):
    spec = {"mean_tau": 2.0, "cv2_tau": [0.0, 0.5, 1.0], "gamma_x": [0.1, 0.5, 1.0, 2.0, 5.0], "b": 0.5, "fix_mean": 100.0}
    out = tmp_path / "s.csv"
    assert run(["sweep", "--spec", write(tmp_path / "s.json", spec), "--out", out], capsys)[0] == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 15
    for cv2 in ("0", "0.5", "1"):
        sub = [r for r in rows if r["cv2_tau"] == cv2]
        for key in ("cv2_cell_cycle", "cv2_partitioning"):
            vals = [float(r[key]) for r in sub]
            assert all(a > b for a, b in zip(vals, vals[1:])), (cv2, key, vals)
    spec["gamma_x"] = {"start": 0.1, "stop": 1.0, "num": 0}
    empty = tmp_path / "e.csv"
    run(["sweep", "--spec", write(tmp_path / "e.json", spec), "--out", empty], capsys)
    assert empty.read_text() == "cv2_tau,gamma_x,b,mean,cv2_cell_cycle,cv2_partitioning,total,normalized_total\n"


def test_sweep_constraint_error(tmp_path, capsys):
    spec = {"cv2_tau": [0.5], "gamma_x": [0.1], "fix_mean": -1.0}
    code, _, err = run(["sweep", "--spec", write(tmp_path / "s.json", spec)], capsys)
    assert code == 1 and "constraint" in err


# -- gene ------------------------------------------------------------------------
def test_gene_infer_and_write_model(tmp_path, capsys):
    out, model = tmp_path / "g.json", tmp_path / "model.json"
    base = ["gene", "--fix-mean", 100, "--gamma-x", G, "--b", 0.25, "--family", "exponential", "--cycle-mean", M]
    assert run(base + ["--out", out, "--write-model", model], capsys)[0] == 0
    doc = json.loads(out.read_text())
    assert doc["mean"] == pytest.approx(100.0, rel=1e-12)
    assert doc["k_x"] == pytest.approx(K_X, rel=1e-12)
    inf = tmp_path / "i.json"
    assert run(base + ["--infer", doc["total"], "--out", inf], capsys)[0] == 0
    assert json.loads(inf.read_text())["inference"]["b_hat"] == pytest.approx(0.25, rel=1e-9)
    mom = tmp_path / "m.json"
    assert run(["moments", "--model", model, "--out", mom], capsys)[0] == 0
    m = json.loads(mom.read_text())
    assert m["mean"][0] == pytest.approx(100.0, rel=1e-10)
    assert m["cv_squared"][0] == pytest.approx(doc["total"], rel=1e-8)


def test_gene_usage_error(capsys):
    code, _, err = run(["gene", "--gamma-x", 0.1, "--cycle-mean", 2.0], capsys)
    assert code == 1 and "--k-x" in err


def test_console_script_entry(tmp_path):
    path = write(tmp_path / "g.json", gene_doc())
    proc = subprocess.run([sys.executable, "-m", "ttshs.cli", "check", "--model", path, "--manifest",
                           str(tmp_path / "man.json")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads((tmp_path / "man.json").read_text())["command"].startswith("ttshs check")


def test_quad_tol_env(tmp_path):
    path = write(tmp_path / "g.json", gene_doc(dist={"family": "weibull", "k": 3.0, "lam": 2.0}))
    env = dict(os.environ, TTSHS_QUAD_TOL="1e-6")
    proc = subprocess.run([sys.executable, "-m", "ttshs.cli", "moments", "--model", path, "--method", "general"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
