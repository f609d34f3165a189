"""Waveform misfit functionals.

Every misfit takes observed and synthetic records shaped (nt, ntraces) (or a
single (nt,) trace), integrates over time as a plain sum times dt, and sums
over traces.  Synthetic data may be a tracked :class:`Tensor`; observed data is
treated as a constant unless it is tracked too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from ._dtw import soft_dtw_batch, soft_dtw_batch_grad
from .autodiff import Tensor

KINDS = ("L2", "L1", "StudentT", "Envelope", "GC", "WEC", "SoftDTW", "Sinkhorn")


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, err, iters):
        super().__init__(f"Sinkhorn did not converge in {iters} iterations (marginal error {err:.3e})")
        self.marginal_error = err


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "L2"
    studentt_sigma: float = 1.0
    studentt_dof: float = 1.0
    envelope_power: int = 2
    softdtw_gamma: float | None = None  # None: (RMS of observed data)^2
    sinkhorn_lambda: float | None = None  # None: 1 / median ground cost
    sinkhorn_iters: int = 2000
    sinkhorn_debias: bool = True
    wec_total_iters: int = 100

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.studentt_sigma <= 0 or self.studentt_dof <= 0:
            raise ValueError("Student-t sigma and dof must be positive")
        if self.envelope_power not in (1, 2):
            raise ValueError("envelope_power must be 1 or 2")
        if self.softdtw_gamma is not None and self.softdtw_gamma < 0:
            raise ValueError("softdtw_gamma must be >= 0")
        if self.sinkhorn_lambda is not None and self.sinkhorn_lambda <= 0:
            raise ValueError("sinkhorn_lambda must be > 0")
        if self.sinkhorn_iters < 1 or self.wec_total_iters < 1:
            raise ValueError("iteration counts must be >= 1")


def _pair(obs, cal):
    obs, cal = ad.as_tensor(obs), ad.as_tensor(cal)
    if obs.shape != cal.shape:
        raise ad.ShapeError(f"observed {obs.shape} vs synthetic {cal.shape}")
    return obs, cal


def _by_trace(x: Tensor) -> Tensor:
    """(nt, ntr) -> (ntr, nt); a 1-d trace becomes (1, nt)."""
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0]))
    return ad.transpose(x)


def misfit_l2(obs, cal, dt: float = 1.0) -> Tensor:
    obs, cal = _pair(obs, cal)
    r = cal - obs
    return ad.scale(ad.dot(r, r), 0.5 * dt)


def misfit_l1(obs, cal, dt: float = 1.0) -> Tensor:
    obs, cal = _pair(obs, cal)
    return ad.scale(ad.tsum(ad.absolute(cal - obs)), dt)


def misfit_studentt(obs, cal, dt: float = 1.0, sigma: float = 1.0, dof: float = 1.0) -> Tensor:
    if sigma <= 0 or dof <= 0:
        raise ValueError("Student-t sigma and dof must be positive")
    obs, cal = _pair(obs, cal)
    r = cal - obs
    t = ad.log(ad.add(ad.scale(r * r, 1.0 / (dof * sigma ** 2)), 1.0))
    return ad.scale(ad.tsum(t), 0.5 * (dof + 1.0) * dt)


def envelope(x, power: int = 1) -> Tensor:
    """Instantaneous amplitude per trace, (ntr, nt) layout; power 2 skips the root."""
    xt = ad.as_tensor(x)
    e2 = ad.add(xt * xt + ad.power(ad.hilbert(xt), 2.0), 1e-12)
    return e2 if power == 2 else ad.sqrt(e2)


def misfit_envelope(obs, cal, dt: float = 1.0, p: int = 2) -> Tensor:
    if p not in (1, 2):
        raise ValueError("envelope power must be 1 or 2")
    obs, cal = _pair(obs, cal)
    r = envelope(_by_trace(cal), p) - envelope(_by_trace(obs), p)
    return ad.scale(ad.dot(r, r), dt)


def misfit_gc(obs, cal, dt: float = 1.0) -> Tensor:
    """Sum over traces of 1 - <obs, cal> / (|obs| |cal|); zero-norm traces score 0."""
    obs, cal = _pair(obs, cal)
    o, c = _by_trace(obs), _by_trace(cal)
    no2 = ad.tsum(o * o, axis=1)
    nc2 = ad.tsum(c * c, axis=1)
    live = (no2.data > 0) & (nc2.data > 0)
    if not live.any():
        return Tensor(np.array(0.0))
    safe = np.where(live, 0.0, 1.0)  # dead traces get a unit denominator and weight 0
    # separate roots: the product of squared norms underflows for tiny traces
    denom = ad.sqrt(ad.add(no2, safe)) * ad.sqrt(ad.add(nc2, safe))
    corr = ad.tsum(o * c, axis=1) / denom
    w = live.astype(np.float64)
    return ad.sub(float(w.sum()), ad.dot(Tensor(w), corr))


def wec_weight(i: int, N: int) -> float:
    """Sigmoid centred on N/2: envelope dominates early, correlation late."""
    if N < 1:
        raise ValueError("N must be >= 1")
    z = -(i - N / 2.0)
    if z > 700:
        return 0.0 if z > 745 else 1.0 / (1.0 + math.exp(z))
    return 1.0 / (1.0 + math.exp(z))


def misfit_wec(obs, cal, dt: float = 1.0, i: int = 1, N: int = 100, p: int = 2) -> Tensor:
    if N < 1:
        raise ValueError("N must be >= 1")
    w = wec_weight(i, N)
    gc = misfit_gc(obs, cal, dt)
    env = misfit_envelope(obs, cal, dt, p)
    return ad.scale(gc, w) + ad.scale(env, 1.0 - w)


def default_softdtw_gamma(obs) -> float:
    d = np.asarray(ad.as_tensor(obs).data)
    return float(np.mean(d * d))


def soft_dtw(x, y, gamma: float) -> Tensor:
    """Sum over rows of soft-DTW(x_k, y_k) with squared point distance; x, y are (ntr, n)."""
    if gamma < 0:
        raise ValueError("soft-DTW gamma must be >= 0")
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.ndim == 1:
        x, y = ad.reshape(x, (1, -1)), ad.reshape(y, (1, -1))
    X = np.ascontiguousarray(x.data)
    Y = np.ascontiguousarray(y.data)
    vals = soft_dtw_batch(X, Y, float(gamma))

    def make():
        def f(g):
            w = np.broadcast_to(np.asarray(g, dtype=np.float64), vals.shape).copy()
            gX, gY = soft_dtw_batch_grad(X, Y, float(gamma), w)
            return gX, gY
        return f
    per = ad.custom_op("soft_dtw", (x, y), vals, make)
    return ad.tsum(per)


def misfit_softdtw(obs, cal, dt: float = 1.0, gamma: float | None = None) -> Tensor:
    obs, cal = _pair(obs, cal)
    if gamma is None:
        gamma = default_softdtw_gamma(obs)
    return ad.scale(soft_dtw(_by_trace(obs), _by_trace(cal), gamma), dt)


# ---------------------------------------------------------------- Sinkhorn

def time_cost(n: int, dt: float) -> np.ndarray:
    t = np.arange(n) * dt
    return (t[:, None] - t[None, :]) ** 2


def default_sinkhorn_lambda(n: int, dt: float) -> float:
    return 1.0 / float(np.median(time_cost(n, dt)))


def sinkhorn_plan(mu, nu, C, lam: float, iters: int = 2000, tol: float = 1e-9,
                  return_plan: bool = False):
    """Entropic OT between rows of mu and nu (ntr, n) on cost C (n, n).

    Returns (cost, f, g, plan, marginal_error).  f and g are dual potentials,
    plan_ij = exp(lam (f_i + g_j - C_ij)); the plan is only materialised when
    requested.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    nu = np.atleast_2d(np.asarray(nu, dtype=np.float64))
    ntr, n = mu.shape
    with np.errstate(divide="ignore"):
        lmu, lnu = np.log(mu), np.log(nu)
    err = np.inf
    if lam * C.max() <= 500.0:
        K = np.exp(-lam * C)
        v = np.ones_like(nu)
        for _ in range(iters):
            u = mu / (v @ K.T)
            v = nu / (u @ K)
            # columns are exact right after the v update; rows carry the error
            row = u * (v @ K.T)
            err = float(np.abs(row - mu).sum(axis=1).max())
            if err < tol:
                break
        col = v * (u @ K)
        with np.errstate(divide="ignore"):
            f, g = np.log(u) / lam, np.log(v) / lam
    else:
        negC = -lam * C
        f = np.zeros((ntr, n))
        g = np.zeros((ntr, C.shape[1]))
        for _ in range(iters):
            f = (lmu - logsumexp(negC[None] + lam * g[:, None, :], axis=2)) / lam
            g = (lnu - logsumexp(negC[None] + lam * f[:, :, None], axis=1)) / lam
            with np.errstate(invalid="ignore"):
                row = np.exp(logsumexp(negC[None] + lam * (f[:, :, None] + g[:, None, :]), axis=2))
            row = np.nan_to_num(row)
            err = float(np.abs(row - mu).sum(axis=1).max())
            if err < tol:
                break
        with np.errstate(invalid="ignore"):
            col = np.nan_to_num(np.exp(logsumexp(negC[None] + lam * (f[:, :, None] + g[:, None, :]), axis=1)))
    if err >= tol:
        raise SinkhornConvergenceError(err, iters)
    # <P, C> + (1/lam) sum P (log P - 1) collapses to <row, f> + <col, g> - sum(P) / lam
    with np.errstate(invalid="ignore"):
        fr = np.where(row > 0, row * f, 0.0).sum(axis=1)
        gc = np.where(col > 0, col * g, 0.0).sum(axis=1)
    cost = fr + gc - row.sum(axis=1) / lam
    plan = None
    if return_plan:
        with np.errstate(invalid="ignore"):
            plan = np.nan_to_num(np.exp(lam * (f[:, :, None] + g[:, None, :] - C[None])))
    return cost, f, g, plan, err


def sinkhorn_cost(mu, nu, C, lam: float, iters: int = 2000, tol: float = 1e-9) -> Tensor:
    """Row-wise entropic OT cost as a tape primitive; gradients are the dual potentials."""
    mu, nu = ad.as_tensor(mu), ad.as_tensor(nu)
    cost, f, g, _, _ = sinkhorn_plan(mu.data, nu.data, C, lam, iters, tol)

    def make():
        def vjp(gr):
            gr = np.asarray(gr)[:, None]
            # potentials are defined up to a constant; centre them since sum(mu) is fixed
            fc = f - f.mean(axis=1, keepdims=True)
            gc = g - g.mean(axis=1, keepdims=True)
            return gr * fc, gr * gc
        return vjp
    return ad.custom_op("sinkhorn", (mu, nu), cost, make)


def to_probability(x: Tensor) -> Tensor:
    """Shift-normalise rows: (x + c) / sum(x + c), c = -min + 0.1 (max - min)."""
    rows = np.arange(x.shape[0]) * x.shape[1]
    lo = ad.gather(x, rows + np.argmin(x.data, axis=1))
    hi = ad.gather(x, rows + np.argmax(x.data, axis=1))
    flat = (hi.data - lo.data) == 0
    shift = ad.add(ad.scale(hi - lo, 0.1) - lo, flat.astype(np.float64))
    n = x.shape[1]
    col = ad.reshape(shift, (-1, 1))
    pos = x + ad.matmul(col, Tensor(np.ones((1, n))))
    total = ad.tsum(pos, axis=1)
    inv = ad.div(1.0, ad.reshape(total, (-1, 1)))
    return pos * ad.matmul(inv, Tensor(np.ones((1, n))))


def misfit_sinkhorn(obs, cal, dt: float = 1.0, lam: float | None = None, iters: int = 2000,
                    debias: bool = True) -> Tensor:
    obs, cal = _pair(obs, cal)
    o, c = _by_trace(obs), _by_trace(cal)
    n = o.shape[1]
    C = time_cost(n, dt)
    if lam is None:
        lam = 1.0 / float(np.median(C))
    mu, nu = to_probability(o), to_probability(c)
    w = sinkhorn_cost(mu, nu, C, lam, iters)
    if debias:
        w = w - ad.scale(sinkhorn_cost(mu, mu, C, lam, iters), 0.5) \
            - ad.scale(sinkhorn_cost(nu, nu, C, lam, iters), 0.5)
    return ad.tsum(w)


def evaluate(config: ObjectiveConfig, obs, cal, dt: float, iteration: int = 1) -> Tensor:
    k = config.kind
    if k == "L2":
        return misfit_l2(obs, cal, dt)
    if k == "L1":
        return misfit_l1(obs, cal, dt)
    if k == "StudentT":
        return misfit_studentt(obs, cal, dt, config.studentt_sigma, config.studentt_dof)
    if k == "Envelope":
        return misfit_envelope(obs, cal, dt, config.envelope_power)
    if k == "GC":
        return misfit_gc(obs, cal, dt)
    if k == "WEC":
        return misfit_wec(obs, cal, dt, iteration, config.wec_total_iters, config.envelope_power)
    if k == "SoftDTW":
        return misfit_softdtw(obs, cal, dt, config.softdtw_gamma)
    return misfit_sinkhorn(obs, cal, dt, config.sinkhorn_lambda, config.sinkhorn_iters,
                           config.sinkhorn_debias)
