"""Small reproducible test problems shared by tests, scripts and the CLI."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .earth_model import AcquisitionGeometry, Grid2D, gaussian_smooth, ricker
from .propagator import SimulationConfig
from .runtime import ForwardProblem


def gaussian_blob(shape, cz, cx, sigma, amp):
    z, x = np.mgrid[0:shape[0], 0:shape[1]]
    return amp * np.exp(-((z - cz) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))


@dataclass
class ToyCase:
    problem: ForwardProblem
    true: dict
    initial: dict
    observed: np.ndarray


def gradcheck_case(nt: int = 400) -> ToyCase:
    """40 x 30 two-layer acoustic model, 1 source, 10 receivers."""
    g = Grid2D(nx=40, nz=30, dx=10.0, dz=10.0)
    vp = np.full(g.shape, 2000.0)
    vp[15:] = 2300.0
    rho = np.full(g.shape, 2000.0)
    geom = AcquisitionGeometry([(5, 3)], [(3 + 3 * i, 25) for i in range(10)])
    sim = SimulationConfig(dt=1e-3, nt=nt, pml_cells=10)
    w = ricker(15.0, sim.dt, nt).samples
    prob = ForwardProblem("acoustic", g, geom, w, sim, {"vp": vp, "rho": rho}, v_max=3000.0)
    from .runtime import simulate_all
    obs = simulate_all(prob)
    return ToyCase(prob, {"vp": vp}, {"vp": gaussian_smooth(vp, 100, 100, g.dx, g.dz)}, obs)


def ring_positions(n: int, count: int, inset: int, offset: float = 0.0) -> list:
    """`count` (ix, iz) points evenly spaced along a square `inset` cells inside the edge."""
    side = n - 1 - 2 * inset
    out = []
    for k in range(count):
        u = (k + offset) * 4 * side / count
        edge, d = divmod(u, side)
        d = int(round(d))
        lo, hi = inset, n - 1 - inset
        if edge == 0:
            p = (lo + d, lo)
        elif edge == 1:
            p = (hi, lo + d)
        elif edge == 2:
            p = (hi - d, hi)
        else:
            p = (lo, hi - d)
        out.append((int(p[0]), int(p[1])))
    return out


def two_anomaly_model(n: int = 60, background: float = 2000.0, amp: float = 300.0):
    vp = np.full((n, n), background)
    vp += gaussian_blob(vp.shape, n * 0.5, n * 0.3, n / 12, amp)
    vp -= gaussian_blob(vp.shape, n * 0.5, n * 0.7, n / 12, amp)
    return vp


def two_anomaly_case(n: int = 60, nshots: int = 8, nrec: int = 60, f0: float = 5.0,
                     dx: float = 20.0, dt: float = 4e-3, nt: int = 275, smooth_m: float = 400.0,
                     pml: int = 8, layout: str = "ring") -> ToyCase:
    """Two Gaussian anomalies in a constant background.

    layout "ring": sources and receivers spread over all four sides, so rays
    cross the anomalies from many directions; "transmission": sources on top,
    receivers at the bottom.
    """
    g = Grid2D(nx=n, nz=n, dx=dx, dz=dx)
    vp = two_anomaly_model(n)
    rho = np.full(g.shape, 2000.0)
    if layout == "ring":
        geom = AcquisitionGeometry(ring_positions(n, nshots, 2, offset=0.5),
                                   ring_positions(n, nrec, 3))
    else:
        sx = np.linspace(3, n - 4, nshots).round().astype(int)
        rx = np.linspace(0, n - 1, nrec).round().astype(int)
        geom = AcquisitionGeometry([(int(x), 2) for x in sx], [(int(x), n - 3) for x in rx])
    sim = SimulationConfig(dt=dt, nt=nt, pml_cells=pml)
    w = ricker(f0, dt, nt).samples
    prob = ForwardProblem("acoustic", g, geom, w, sim, {"vp": vp, "rho": rho}, v_max=2600.0)
    from .runtime import simulate_all
    obs = simulate_all(prob)
    init = gaussian_smooth(vp, smooth_m, smooth_m, dx, dx)
    return ToyCase(prob, {"vp": vp}, {"vp": init}, obs)


def vti_anomaly_case(nt: int = 250, dt: float = 1.4e-3, nshots: int = 4, f0: float = 15.0):
    """Crosswell VTI model, 90 cells deep and 40 wide, with one epsilon and one delta blob.

    alpha0, beta0 and rho are held at their true constant values; the starting
    model is the epsilon = 0.1, delta = 0.05 background.  Explosive sources in the
    left well, pressure receivers in the right well.
    """
    import math
    nz, nx, dx = 90, 40, 10.0
    g = Grid2D(nx=nx, nz=nz, dx=dx, dz=dx)
    eps = 0.1 + gaussian_blob(g.shape, 30, 20, 6, 0.15)
    dl = 0.05 + gaussian_blob(g.shape, 60, 20, 6, 0.1)
    true = {"alpha0": np.full(g.shape, 3000.0), "beta0": np.full(g.shape, 1500.0),
            "rho": np.full(g.shape, 2000.0), "epsilon": eps, "delta": dl}
    sim = SimulationConfig(dt=dt, nt=nt, pml_cells=8, source_type="explosive")
    srcs = [(3, int(z)) for z in np.linspace(8, nz - 9, nshots).round()]
    recs = [(nx - 4, z) for z in range(4, nz - 4, 3)]
    prob = ForwardProblem("vti", g, AcquisitionGeometry(srcs, recs, "pressure"),
                          ricker(f0, dt, nt).samples, sim, true, 3000.0 * math.sqrt(1.6))
    from .runtime import simulate_all
    obs = simulate_all(prob)
    init = {"epsilon": np.full(g.shape, 0.1), "delta": np.full(g.shape, 0.05)}
    return ToyCase(prob, {"epsilon": eps, "delta": dl}, init, obs)
