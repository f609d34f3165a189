"""First-order update rules and limited-memory BFGS.

Every rule works on plain numpy arrays.  ``step`` is a pure function of
(config, state, params, grad); :class:`Optimizer` wraps it for a dict of named
parameter arrays.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

KINDS = ("SGD", "ASGD", "Adagrad", "RMSProp", "Adam", "AdamW", "NAdam", "RAdam", "LBFGS")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "Adam"
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rms_gamma: float = 0.99
    weight_decay: float = 1e-2
    asgd_start: int = 0
    lbfgs_memory: int = 10
    lbfgs_max_linesearch: int = 25
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.eta <= 0 or self.eps <= 0:
            raise ValueError("eta and eps must be positive")
        for name in ("beta1", "beta2", "rms_gamma"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.lbfgs_memory < 1 or self.lbfgs_max_linesearch < 1:
            raise ValueError("lbfgs_memory and lbfgs_max_linesearch must be >= 1")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")


@dataclass
class OptimizerState:
    t: int = 0
    v: np.ndarray | None = None
    s: np.ndarray | None = None
    G: np.ndarray | None = None
    Eg2: np.ndarray | None = None
    asgd_average: np.ndarray | None = None
    asgd_count: int = 0
    lbfgs_history: list = field(default_factory=list)
    lbfgs_grad: np.ndarray | None = None
    lbfgs_value: float | None = None


def _zeros_like(state, name, like):
    a = getattr(state, name)
    if a is None:
        return np.zeros_like(like)
    if a.shape != like.shape:
        raise ValueError(f"state {name} has shape {a.shape}, parameter is {like.shape}")
    return a


def step(config: OptimizerConfig, state: OptimizerState, params, grad):
    """One update.  Returns (new params, new state); inputs are not modified."""
    m = np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if m.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {m.shape}")
    k = config.kind
    st = copy.copy(state)
    st.t = t = state.t + 1
    eta, eps = config.eta, config.eps

    if k in ("SGD", "ASGD"):
        new = m - eta * g
        if k == "ASGD" and t > config.asgd_start:
            avg = _zeros_like(state, "asgd_average", m)
            st.asgd_count = state.asgd_count + 1
            st.asgd_average = avg + (new - avg) / st.asgd_count
        return new, st

    if k == "Adagrad":
        st.G = _zeros_like(state, "G", m) + g * g
        return m - eta * g / np.sqrt(st.G + eps), st

    if k == "RMSProp":
        gam = config.rms_gamma
        st.Eg2 = gam * _zeros_like(state, "Eg2", m) + (1 - gam) * g * g
        return m - eta * g / np.sqrt(st.Eg2 + eps), st

    if k == "LBFGS":
        raise ValueError("LBFGS needs lbfgs_step (it re-evaluates the misfit)")

    b1, b2 = config.beta1, config.beta2
    st.v = b1 * _zeros_like(state, "v", m) + (1 - b1) * g
    st.s = b2 * _zeros_like(state, "s", m) + (1 - b2) * g * g
    vh = st.v / (1 - b1 ** t)
    sh = st.s / (1 - b2 ** t)
    denom = np.sqrt(sh) + eps
    if k == "Adam":
        return m - eta * vh / denom, st
    if k == "AdamW":
        return m - eta * vh / denom - config.weight_decay * eta * m, st
    if k == "NAdam":
        return m - eta / denom * (b1 * vh + (1 - b1) / (1 - b1 ** t) * g), st
    # RAdam
    rho_inf = 2.0 / (1 - b2) - 1
    rho_t = radam_rho(t, b2)
    if rho_t <= 4:
        return m - eta * vh, st
    r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    return m - eta * vh / denom * r, st


def radam_rho(t: int, beta2: float) -> float:
    rho_inf = 2.0 / (1 - beta2) - 1
    b2t = beta2 ** t
    return rho_inf - 2 * t * b2t / (1 - b2t)


# ---------------------------------------------------------------- l-BFGS

class _Budget(Exception):
    pass


def two_loop(grad, history):
    """Search direction -H g from (s, y) pairs, oldest first."""
    q = grad.copy()
    alphas = []
    for s, y in reversed(history):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if history:
        s, y = history[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(history, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


@dataclass
class LineSearchReport:
    alpha: float
    evaluations: int
    converged: bool


def lbfgs_step(config: OptimizerConfig, state: OptimizerState, params, misfit_fn):
    """One l-BFGS iteration with a strong-Wolfe line search.

    `misfit_fn(x)` returns (value, gradient) for a flat or shaped array.
    Returns (new params, new state, LineSearchReport).
    """
    x0 = np.asarray(params, dtype=np.float64)
    shape = x0.shape
    x0 = x0.ravel()
    st = copy.copy(state)
    st.lbfgs_history = list(state.lbfgs_history)
    cache = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            if len(cache) >= config.lbfgs_max_linesearch:
                raise _Budget
            f, g = misfit_fn(x.reshape(shape))
            f = float(f)
            if not math.isfinite(f):
                raise FloatingPointError("non-finite misfit during l-BFGS")
            cache[key] = (f, np.asarray(g, dtype=np.float64).ravel())
        return cache[key]

    if state.lbfgs_grad is None:
        f0, g0 = misfit_fn(x0.reshape(shape))
        f0, g0 = float(f0), np.asarray(g0, dtype=np.float64).ravel()
    else:
        f0, g0 = state.lbfgs_value, state.lbfgs_grad
    d = two_loop(g0, st.lbfgs_history)
    if np.dot(d, g0) >= 0:  # not a descent direction, restart
        st.lbfgs_history = []
        d = -g0

    converged = True
    try:
        alpha, *_ = line_search(lambda x: evaluate(x)[0], lambda x: evaluate(x)[1], x0, d,
                                gfk=g0, old_fval=f0, c1=config.wolfe_c1, c2=config.wolfe_c2,
                                amax=1e10, maxiter=config.lbfgs_max_linesearch)
    except _Budget:
        alpha = None
    if alpha is None:
        converged = False
    # scipy may probe points it does not return; fall back to the best seen
    if alpha is None:
        best = min(cache.items(), key=lambda kv: kv[1][0], default=None)
        if best is None or best[1][0] >= f0:
            st.t = state.t + 1
            return x0.reshape(shape), st, LineSearchReport(0.0, len(cache), False)
        x1 = np.frombuffer(best[0], dtype=np.float64).copy()
    else:
        x1 = x0 + alpha * d
    if x1.tobytes() in cache:
        f1, g1 = cache[x1.tobytes()]
    else:
        f1, g1 = misfit_fn(x1.reshape(shape))
        g1 = np.asarray(g1, dtype=np.float64).ravel()
    s, y = x1 - x0, g1 - g0
    if np.dot(s, y) > 1e-10:
        st.lbfgs_history.append((s, y))
        if len(st.lbfgs_history) > config.lbfgs_memory:
            st.lbfgs_history.pop(0)
    st.lbfgs_grad, st.lbfgs_value = g1, float(f1)
    st.t = state.t + 1
    return x1.reshape(shape), st, LineSearchReport(0.0 if alpha is None else float(alpha),
                                                   len(cache), converged)


class Optimizer:
    """Keeps one OptimizerState per named parameter array."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.states: dict = {}

    def update(self, params: dict, grads: dict) -> dict:
        out = {}
        for name in params:
            if name not in grads:
                out[name] = params[name]
                continue
            st = self.states.get(name, OptimizerState())
            out[name], self.states[name] = step(self.config, st, params[name], grads[name])
        return out
