import csv
import json

import numpy as np
import pytest

from fwikit import io as fio
from fwikit.cli import main


def write_case(tmp_path, inversion=None):
    n = 24
    vp = np.full((n, n), 2000.0)
    vp[12:] = 2200.0
    fio.write_grid(tmp_path / "true.grd", vp, 10.0, 10.0)
    fio.write_grid(tmp_path / "init.grd", np.full((n, n), 2100.0), 10.0, 10.0)
    cfg = {
        "simulation": {"dt": 1e-3, "nt": 120, "pml_cells": 8},
        "geometry": {"sources": [[5, 2], [18, 2]], "receivers": [[i, 20] for i in range(2, 22, 3)]},
        "wavelet": {"f0": 20.0},
        "rho": 2000.0,
        "v_max": 2600.0,
        "inversion": inversion or {"iterations": 2, "optimizer": {"kind": "Adam", "eta": 5.0}},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return cfg


def run(*argv):
    return main([str(a) for a in argv])


def test_forward_invert_metrics(tmp_path, capsys):
    write_case(tmp_path)
    assert run("forward", "--config", tmp_path / "cfg.json", "--model", tmp_path / "true.grd",
               "--out", tmp_path / "obs.trc") == 0
    tr, dt, comp = fio.read_traces(tmp_path / "obs.trc")
    assert tr.shape == (2, 120, 7) and dt == 1e-3 and comp == "pressure"
    out = tmp_path / "run"
    assert run("invert", "--config", tmp_path / "cfg.json", "--observed", tmp_path / "obs.trc",
               "--initial", tmp_path / "init.grd", "--true", tmp_path / "true.grd",
               "--out-dir", out, "--snapshot-every", 1, "--pgm") == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and len(man["snapshots"]) == 2
    assert man["config"]["inversion"]["iterations"] == 2
    rows = list(csv.DictReader(open(out / "log.csv")))
    assert len(rows) == 2
    assert (out / "vp_final.pgm").exists()
    capsys.readouterr()
    assert run("metrics", tmp_path / "true.grd", tmp_path / "true.grd") == 0
    text = capsys.readouterr().out
    assert "MAPE 0.000000" in text and "SSIM 1.000000" in text


def test_metrics_mask(tmp_path, capsys):
    a = np.random.default_rng(0).uniform(1500, 2500, (12, 12))
    b = a.copy()
    b[:3] *= 2
    m = np.zeros((12, 12))
    m[:3] = 1
    for name, f in (("a", a), ("b", b), ("m", m)):
        fio.write_grid(tmp_path / f"{name}.grd", f, 1, 1)
    assert run("metrics", tmp_path / "a.grd", tmp_path / "b.grd", "--mask", tmp_path / "m.grd") == 0
    assert "MAPE 0.000000" in capsys.readouterr().out


def test_invert_frozen_mask(tmp_path):
    write_case(tmp_path)
    run("forward", "--config", tmp_path / "cfg.json", "--model", tmp_path / "true.grd",
        "--out", tmp_path / "obs.trc")
    m = np.zeros((24, 24))
    m[:6] = 1
    fio.write_grid(tmp_path / "mask.grd", m, 10, 10)
    assert run("invert", "--config", tmp_path / "cfg.json", "--observed", tmp_path / "obs.trc",
               "--initial", tmp_path / "init.grd", "--mask", tmp_path / "mask.grd",
               "--out-dir", tmp_path / "r") == 0
    v, _, _ = fio.read_grid(tmp_path / "r" / "vp_final.grd")
    assert np.all(v[:6] == 2100.0) and np.any(v[6:] != 2100.0)


def test_reparam_and_uncertainty(tmp_path, capsys):
    write_case(tmp_path, {"iterations": 1, "reparam": {"num_blocks": 2, "v_min": 1900.0,
                                                       "v_max": 2300.0, "dropout_p": 0.1,
                                                       "pretrain_iters": 50}})
    run("forward", "--config", tmp_path / "cfg.json", "--model", tmp_path / "true.grd",
        "--out", tmp_path / "obs.trc")
    assert run("invert", "--config", tmp_path / "cfg.json", "--observed", tmp_path / "obs.trc",
               "--initial", tmp_path / "init.grd", "--out-dir", tmp_path / "r") == 0
    assert run("uncertainty", "--manifest", tmp_path / "r" / "manifest.json", "--p", 0.2,
               "--samples", 10, "--out-dir", tmp_path / "u") == 0
    std, _, _ = fio.read_grid(tmp_path / "u" / "std.grd")
    assert std.shape == (24, 24) and std.min() >= 0 and std.mean() > 0
    assert run("uncertainty", "--manifest", tmp_path / "r" / "manifest.json", "--p", 0.0,
               "--samples", 5, "--out-dir", tmp_path / "u0") == 0
    assert not fio.read_grid(tmp_path / "u0" / "std.grd")[0].any()


@pytest.mark.slow
def test_gradcheck_command(capsys):
    assert run("gradcheck", "--probes", 4) == 0
    err = float(capsys.readouterr().out.split()[3])
    assert err < 1e-5


def test_gradcheck_tolerance_exit(capsys):
    # an absurd tolerance turns a healthy check into a numerical failure
    assert run("gradcheck", "--probes", 1, "--nt", 60, "--tol", 1e-30) == 2


def test_convexity_scan_command(tmp_path):
    assert run("convexity-scan", "--out", tmp_path / "s.csv", "--step", 0.05) == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    shifts = np.array([float(r["shift"]) for r in rows])
    l2 = np.array([float(r["L2"]) for r in rows])
    env = np.array([float(r["Envelope"]) for r in rows])
    pos = shifts >= 0
    assert np.any(np.diff(l2[pos]) < 0)  # L2 is non-monotone on [0, 0.5]
    order = np.argsort(np.abs(shifts))
    assert np.all(np.diff(env[order]) >= -1e-12)


def test_exit_codes(tmp_path, capsys):
    write_case(tmp_path)
    cfg = json.loads((tmp_path / "cfg.json").read_text())
    cfg["simulation"]["dtt"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    assert run("forward", "--config", tmp_path / "bad.json", "--model", tmp_path / "true.grd",
               "--out", tmp_path / "o.trc") == 1
    assert capsys.readouterr().err.startswith("schema error:")

    raw = bytearray((tmp_path / "true.grd").read_bytes())
    raw[60] ^= 0xFF
    (tmp_path / "bad.grd").write_bytes(bytes(raw))
    assert run("metrics", tmp_path / "bad.grd", tmp_path / "true.grd") == 1
    assert capsys.readouterr().err.startswith("crc error:")

    assert run("metrics", tmp_path / "none.grd", tmp_path / "true.grd") == 1
    assert capsys.readouterr().err.startswith("missing file:")

    cfg = json.loads((tmp_path / "cfg.json").read_text())
    cfg["geometry"]["sources"] = [[50, 2]]
    (tmp_path / "geo.json").write_text(json.dumps(cfg))
    assert run("forward", "--config", tmp_path / "geo.json", "--model", tmp_path / "true.grd",
               "--out", tmp_path / "o.trc") == 1
    assert capsys.readouterr().err.startswith("model error:")

    cfg = json.loads((tmp_path / "cfg.json").read_text())
    cfg["v_max"] = 1e5  # unstable: the declared v_max makes dt too large
    cfg["simulation"]["dt"] = 5e-3
    (tmp_path / "cfl.json").write_text(json.dumps(cfg))
    assert run("forward", "--config", tmp_path / "cfl.json", "--model", tmp_path / "true.grd",
               "--out", tmp_path / "o.trc") == 1

    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 1
    assert "usage error:" in capsys.readouterr().err


def test_numerical_failure_exit(tmp_path, capsys):
    write_case(tmp_path)
    cfg = json.loads((tmp_path / "cfg.json").read_text())
    cfg["v_max"] = 2000.0  # hides the fast layer from the stability check
    cfg["simulation"]["dt"] = 2.9e-3
    cfg["simulation"]["nt"] = 400
    (tmp_path / "fast.json").write_text(json.dumps(cfg))
    vp = np.full((24, 24), 2000.0)
    vp[12:] = 9000.0
    fio.write_grid(tmp_path / "fast.grd", vp, 10.0, 10.0)
    assert run("forward", "--config", tmp_path / "fast.json", "--model", tmp_path / "fast.grd",
               "--out", tmp_path / "o.trc") == 2
    assert capsys.readouterr().err.startswith("numerical error:")
