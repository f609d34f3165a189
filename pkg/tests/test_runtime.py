import csv

import numpy as np
import pytest

from fwikit.earth_model import AcquisitionGeometry, Grid2D, ModelError, gaussian_smooth, ricker
from fwikit.objectives import ObjectiveConfig
from fwikit.optimizers import OptimizerConfig
from fwikit.propagator import SimulationConfig
from fwikit.regularizers import RegularizerConfig
from fwikit.runtime import (CheckpointPlan, ForwardProblem, InversionConfig, ReparamConfig,
                            accumulate_minibatch, partition_shots, plain_shot_gradient,
                            run_inversion, shot_gradient, simulate_all)

L2 = ObjectiveConfig("L2")


def small_problem(physics="acoustic", nshots=4, nt=150, n=24):
    g = Grid2D(nx=n, nz=n, dx=10.0, dz=10.0)
    z, x = np.mgrid[0:n, 0:n]
    blob = np.exp(-((z - n / 2) ** 2 + (x - n / 2) ** 2) / 18.0)
    srcs = [(3 + i * (n - 7) // max(nshots - 1, 1), 2) for i in range(nshots)]
    recs = [(i, n - 3) for i in range(1, n - 1, 2)]
    sim = SimulationConfig(dt=1e-3, nt=nt, pml_cells=8)
    w = ricker(20.0, 1e-3, nt).samples
    if physics == "acoustic":
        true = {"vp": 2000.0 + 200 * blob, "rho": np.full(g.shape, 2000.0)}
    elif physics == "elastic":
        true = {"vp": 2500.0 + 200 * blob, "vs": np.full(g.shape, 1300.0),
                "rho": np.full(g.shape, 2000.0)}
    else:
        true = {"alpha0": np.full(g.shape, 2500.0), "beta0": np.full(g.shape, 1300.0),
                "rho": np.full(g.shape, 2000.0), "epsilon": 0.1 + 0.1 * blob,
                "delta": np.full(g.shape, 0.05)}
    prob = ForwardProblem(physics, g, AcquisitionGeometry(srcs, recs), w, sim, true, 3200.0)
    obs = simulate_all(prob)
    return prob, obs, true


@pytest.fixture(scope="module")
def acoustic():
    return small_problem()


def smooth(a):
    return gaussian_smooth(a, 80, 80, 10, 10)


def test_plan():
    p = CheckpointPlan.equal(400, 8)
    assert p.boundaries[0] == 0 and p.boundaries[-1] == 400 and len(p.segments) == 8
    peaks = [CheckpointPlan.equal(400, s).peak_stored_states() for s in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(peaks[:-1], peaks[1:]))
    assert CheckpointPlan.equal(1000, 10).peak_stored_states() == 11 + 100
    with pytest.raises(ValueError):
        CheckpointPlan.equal(10, 11)
    with pytest.raises(ValueError):
        CheckpointPlan((0, 5, 5, 10))


def test_checkpoint_matches_single_tape(acoustic):
    prob, obs, true = acoustic
    params = {"vp": smooth(true["vp"])}
    J, ref = plain_shot_gradient(prob, params, 1, obs[1], L2)
    for S in (1, 3, 7):
        r = shot_gradient(prob, params, 1, obs[1], L2, segments=S)
        assert r.misfit == J
        assert np.abs(r.grads["vp"] - ref["vp"]).max() < 1e-12


def test_shot_gradient_fd(acoustic):
    prob, obs, true = acoustic
    v0 = smooth(true["vp"])
    g = shot_gradient(prob, {"vp": v0}, 0, obs[0], L2, segments=2).grads["vp"]

    def J(v):
        d = simulate_all(prob, {"vp": v}, shots=[0])[0]
        return 0.5 * np.sum((obs[0] - d) ** 2) * prob.sim.dt
    for i in np.random.default_rng(0).choice(v0.size, 4, replace=False):
        vp_, vm_ = v0.copy(), v0.copy()
        vp_.flat[i] += 1e-2
        vm_.flat[i] -= 1e-2
        fd = (J(vp_) - J(vm_)) / 2e-2
        assert abs(g.flat[i] - fd) <= 1e-5 * abs(fd) + 1e-20


@pytest.mark.parametrize("physics,names", [("elastic", ("vp", "vs")),
                                           ("vti", ("epsilon", "delta"))])
def test_elastic_and_vti_gradients(physics, names):
    prob, obs, true = small_problem(physics, nshots=1, nt=120, n=20)
    params = {n: true[n] * (1.02 if n not in ("epsilon", "delta") else 0.5) for n in names}
    g = shot_gradient(prob, params, 0, obs[0], L2).grads
    for n in names:
        def J(v):
            d = simulate_all(prob, {**params, n: v}, shots=[0])[0]
            return 0.5 * np.sum((obs[0] - d) ** 2) * prob.sim.dt
        h = 1e-2 if n in ("vp", "vs") else 1e-6
        for i in (10 * 20 + 10, 7 * 20 + 12):
            p_, m_ = params[n].copy(), params[n].copy()
            p_.flat[i] += h
            m_.flat[i] -= h
            fd = (J(p_) - J(m_)) / (2 * h)
            assert abs(g[n].flat[i] - fd) <= 1e-5 * abs(fd), (n, i)


def test_minibatch_partitions_identical(acoustic):
    prob, obs, true = acoustic
    params = {"vp": smooth(true["vp"])}
    parts = [partition_shots(4, b) for b in (4, 2, 1)]
    res = [accumulate_minibatch(prob, params, obs, L2, p) for p in parts]
    for J, g, _ in res[1:]:
        assert J == res[0][0]
        assert np.abs(g["vp"] - res[0][1]["vp"]).max() < 1e-12
    J1, g1, _ = accumulate_minibatch(prob, params, obs, L2, [[2]])
    r = shot_gradient(prob, params, 2, obs[2], L2)
    assert J1 == r.misfit and np.array_equal(g1["vp"], r.grads["vp"])


def test_partition_errors(acoustic):
    prob, obs, true = acoustic
    with pytest.raises(ValueError):
        partition_shots(4, 5)
    with pytest.raises(ValueError):
        accumulate_minibatch(prob, {"vp": true["vp"]}, obs, L2, [[0, 1], [1]])


def test_zero_iterations_returns_initial(acoustic):
    prob, obs, true = acoustic
    v0 = smooth(true["vp"])
    res = run_inversion(InversionConfig(iterations=0), prob, obs, {"vp": v0})
    assert np.array_equal(res.fields["vp"], v0) and res.logs == []


def test_bounds_frozen_and_log(acoustic, tmp_path):
    prob, obs, true = acoustic
    v0 = smooth(true["vp"])
    frozen = np.zeros(v0.shape, bool)
    frozen[:4] = True
    cfg = InversionConfig(iterations=3, optimizer=OptimizerConfig("Adam", eta=50.0),
                          bounds={"vp": (1990.0, 2060.0)})
    seen = []
    res = run_inversion(cfg, prob, obs, {"vp": v0}, frozen_mask=frozen, reference={"vp": true["vp"]},
                        log_path=tmp_path / "log.csv", snapshot_dir=tmp_path, snapshot_every=1,
                        callback=lambda it, f: seen.append(f["vp"].copy()))
    for v in seen:
        assert np.array_equal(v[frozen], v0[frozen])
        free = v[~frozen]
        assert free.min() >= 1990.0 and free.max() <= 2060.0
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [int(r["iter"]) for r in rows] == [0, 1, 2]
    assert {"total_misfit", "mape", "ssim", "grad_norm_vp", "peak_stored_states"} <= set(rows[0])
    assert len(list(tmp_path.glob("vp_*.grd"))) == 3
    assert res.logs[1].total_misfit < res.logs[0].total_misfit


def test_reproducible(acoustic):
    prob, obs, true = acoustic
    cfg = InversionConfig(iterations=2, optimizer=OptimizerConfig("Adam", eta=5.0),
                          regularizer=RegularizerConfig("tv2", alpha=1e-3))
    a = run_inversion(cfg, prob, obs, {"vp": smooth(true["vp"])})
    b = run_inversion(cfg, prob, obs, {"vp": smooth(true["vp"])})
    assert np.array_equal(a.fields["vp"], b.fields["vp"])
    assert [l.total_misfit for l in a.logs] == [l.total_misfit for l in b.logs]


def test_update_every():
    prob, obs, true = small_problem(nshots=1, nt=100, n=20)
    init = {"vp": smooth(true["vp"]), "rho": np.full(true["rho"].shape, 2050.0)}
    cfg = InversionConfig(iterations=3, invert=("vp", "rho"), update_every={"rho": 2},
                          optimizer=OptimizerConfig("SGD", eta=1e3))
    hist = []
    run_inversion(cfg, prob, obs, init, callback=lambda it, f: hist.append(f["rho"].copy()))
    assert not np.array_equal(hist[0], init["rho"])  # it 0 updates
    assert np.array_equal(hist[1], hist[0])          # it 1 skips
    assert not np.array_equal(hist[2], hist[1])


def test_lbfgs_inversion_decreases_misfit(acoustic):
    prob, obs, true = acoustic
    cfg = InversionConfig(iterations=3, optimizer=OptimizerConfig("LBFGS"))
    res = run_inversion(cfg, prob, obs, {"vp": smooth(true["vp"])})
    J = [l.total_misfit for l in res.logs]
    assert J[-1] < J[0]


def test_reparam_inversion_stays_in_bounds(acoustic):
    prob, obs, true = acoustic
    rc = ReparamConfig(num_blocks=2, v_min=1950.0, v_max=2250.0, dropout_p=0.1,
                       pretrain_iters=300, pretrain_tol=1.0, eta=1e-2)
    cfg = InversionConfig(iterations=3, reparam=rc)
    seen = []
    res = run_inversion(cfg, prob, obs, {"vp": smooth(true["vp"])},
                        callback=lambda it, f: seen.append(f["vp"]))
    assert res.net is not None
    for v in seen:
        assert v.min() >= 1950.0 and v.max() <= 2250.0


def test_validation(acoustic):
    prob, obs, true = acoustic
    with pytest.raises(ModelError):
        run_inversion(InversionConfig(invert=("vs",)), prob, obs)
    with pytest.raises(ModelError):
        run_inversion(InversionConfig(), prob, obs[:2])
    with pytest.raises(ValueError):
        InversionConfig(bounds={"vp": (3000, 2000)})
    with pytest.raises(ValueError):
        InversionConfig(checkpoint_segments=0)
    with pytest.raises(ModelError):
        ForwardProblem("acoustic", prob.grid, prob.geometry, prob.wavelet, prob.sim,
                       {"vp": true["vp"]}, 3000.0)
