"""Inversion driver: shot loop, gradient accumulation, checkpointing, bounds and logging.

The gradient of one shot is computed in three stages:

1. model fields -> propagator coefficients on a small "outer" tape;
2. an untaped forward run that keeps the wavefield only at segment boundaries,
   followed by dJ/d(traces) from a tape holding just the misfit;
3. segments replayed last-to-first, each on its own tape seeded with the
   coefficient gradient accumulated so far, so the summation order matches
   one long tape.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as fio
from . import objectives as obj
from . import reparam as rp
from .autodiff import Tape, Tensor
from .earth_model import AcquisitionGeometry, Grid2D, ModelError
from .metrics import mape, ssim
from .optimizers import Optimizer, OptimizerConfig, OptimizerState, lbfgs_step
from .propagator import AcousticKernel, ElasticKernel, SimulationConfig, run_steps
from .regularizers import RegularizerConfig, weighted_penalty

PHYSICS = ("acoustic", "elastic", "vti")
FIELDS = {
    "acoustic": ("vp", "rho"),
    "elastic": ("vp", "vs", "rho"),
    "vti": ("alpha0", "beta0", "rho", "epsilon", "delta"),
}


# ---------------------------------------------------------------- forward problem

@dataclass
class ForwardProblem:
    """Everything needed to turn model fields into shot records.

    `fields` holds every model field of the chosen physics; the inversion
    overrides the ones it updates.  `v_max` fixes the PML damping and the
    stability check so they do not drift while the model changes.
    """
    physics: str
    grid: Grid2D
    geometry: AcquisitionGeometry
    wavelet: np.ndarray
    sim: SimulationConfig
    fields: dict
    v_max: float
    _kernels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.physics not in PHYSICS:
            raise ModelError(f"unknown physics {self.physics!r}")
        missing = set(FIELDS[self.physics]) - set(self.fields)
        if missing:
            raise ModelError(f"missing model fields {sorted(missing)}")
        self.fields = {k: np.asarray(v, dtype=np.float64) for k, v in self.fields.items()}
        self.wavelet = np.asarray(self.wavelet, dtype=np.float64)

    @property
    def nshots(self):
        return len(self.geometry.sources)

    def kernel(self, shot: int):
        if shot not in self._kernels:
            cls = AcousticKernel if self.physics == "acoustic" else ElasticKernel
            self._kernels[shot] = cls(self.grid, self.geometry, self.wavelet, self.sim,
                                      self.v_max, shot)
        return self._kernels[shot]

    def coefficients(self, kernel, f: dict) -> dict:
        """`f` maps field names to Tensors (tracked or not)."""
        if self.physics == "acoustic":
            return kernel.coefficients(f["vp"], f["rho"])
        rho = f["rho"]
        if self.physics == "elastic":
            mu = rho * f["vs"] * f["vs"]
            lam = rho * f["vp"] * f["vp"] - ad.scale(mu, 2.0)
            c11 = lam + ad.scale(mu, 2.0)
            return kernel.coefficients(c11, lam, c11, mu, rho)
        # exact Thomsen inversion, VTI
        c33 = rho * f["alpha0"] * f["alpha0"]
        c44 = rho * f["beta0"] * f["beta0"]
        c11 = c33 + ad.scale(c33 * f["epsilon"], 2.0)
        d = c33 - c44
        c13 = ad.sqrt(ad.scale(f["delta"] * c33 * d, 2.0) + d * d) - c44
        return kernel.coefficients(c11, c13, c33, c44, rho)

    def with_fields(self, updates: dict) -> dict:
        out = dict(self.fields)
        out.update(updates)
        return out


def simulate_all(problem: ForwardProblem, fields: dict | None = None, shots=None) -> np.ndarray:
    """Shot records (nshots, nt, nrec) without any tape."""
    fields = problem.with_fields(fields or {})
    shots = range(problem.nshots) if shots is None else shots
    out = []
    for s in shots:
        k = problem.kernel(s)
        c = problem.coefficients(k, {n: Tensor(v) for n, v in fields.items()})
        _, samples = run_steps(k, k.initial_state(), c, 0, problem.sim.nt)
        out.append(np.stack([x.data for x in samples]))
    return np.stack(out)


# ---------------------------------------------------------------- checkpointing

@dataclass(frozen=True)
class CheckpointPlan:
    boundaries: tuple

    @classmethod
    def equal(cls, nt: int, segments: int) -> "CheckpointPlan":
        if not 1 <= segments <= nt:
            raise ValueError(f"need 1 <= segments <= nt, got {segments} for nt={nt}")
        b = tuple(int(round(i * nt / segments)) for i in range(segments + 1))
        return cls(b)

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b[:-1], b[1:])):
            raise ValueError(f"invalid checkpoint boundaries {b}")

    @property
    def nt(self):
        return self.boundaries[-1]

    @property
    def segments(self):
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))

    def peak_stored_states(self) -> int:
        """Boundary states kept for the whole pass plus the longest live segment."""
        return len(self.boundaries) + max(b - a for a, b in self.segments)


@dataclass
class ShotGradient:
    misfit: float
    grads: dict
    peak_stored_states: int


def shot_gradient(problem: ForwardProblem, params: dict, shot: int, observed, objective,
                  segments: int = 1, iteration: int = 1) -> ShotGradient:
    """Misfit of one shot and its gradient with respect to the fields in `params`."""
    k = problem.kernel(shot)
    nt = problem.sim.nt
    plan = CheckpointPlan.equal(nt, segments)
    if plan.nt != nt:
        raise ValueError("checkpoint plan does not cover the simulation")
    fields = problem.with_fields(params)
    with Tape() as outer:
        leaves = {n: outer.variable(params[n]) for n in params}
        f = {n: leaves.get(n, Tensor(v)) for n, v in fields.items()}
        coeffs = problem.coefficients(k, f)
    cnames = list(coeffs)
    cdata = {n: Tensor(coeffs[n].data) for n in cnames}

    state = k.initial_state()
    stored = [state]
    samples = []
    for a, b in plan.segments:
        state, s = run_steps(k, state, cdata, a, b)
        samples += [x.data for x in s]
        stored.append(state)
    traces = np.stack(samples)

    with Tape() as mt:
        cal = mt.variable(traces)
        J = obj.evaluate(objective, Tensor(np.asarray(observed, dtype=np.float64)), cal,
                         problem.sim.dt, iteration)
    dtraces = ad.backward(mt, J, [cal])[cal.node]

    acc = {n: None for n in cnames}
    state_cot = None
    for i in range(len(plan.segments) - 1, -1, -1):
        a, b = plan.segments[i]
        with Tape() as st:
            s_leaves = [st.variable(x.data) for x in stored[i]]
            c_leaves = {n: st.variable(cdata[n].data) for n in cnames}
            end_state, smp = run_steps(k, tuple(s_leaves), c_leaves, a, b)
        outputs = list(smp)
        cots = [dtraces[n] for n in range(a, b)]
        if state_cot is not None:
            outputs += list(end_state)
            cots += state_cot
        init = {c_leaves[n].node: acc[n] for n in cnames if acc[n] is not None}
        wanted = ([] if i == 0 else s_leaves) + list(c_leaves.values())
        g = ad.vjp(st, outputs, cots, wanted, initial=init)
        acc = {n: g[c_leaves[n].node] for n in cnames}
        state_cot = None if i == 0 else [g[x.node] for x in s_leaves]
        del st, smp, end_state

    gout = ad.vjp(outer, [coeffs[n] for n in cnames], [acc[n] for n in cnames],
                  list(leaves.values()))
    grads = {n: gout[t.node] for n, t in leaves.items()}
    return ShotGradient(float(J.data), grads, plan.peak_stored_states())


def plain_shot_gradient(problem: ForwardProblem, params: dict, shot: int, observed, objective,
                        iteration: int = 1):
    """Reference: the whole shot (coefficients, time loop, misfit) on one tape."""
    k = problem.kernel(shot)
    fields = problem.with_fields(params)
    with Tape() as tape:
        leaves = {n: tape.variable(params[n]) for n in params}
        f = {n: leaves.get(n, Tensor(v)) for n, v in fields.items()}
        c = problem.coefficients(k, f)
        _, samples = run_steps(k, k.initial_state(), c, 0, problem.sim.nt)
        J = obj.evaluate(objective, Tensor(np.asarray(observed, dtype=np.float64)),
                         ad.stack(samples, axis=0), problem.sim.dt, iteration)
    g = ad.backward(tape, J, list(leaves.values()))
    return float(J.data), {n: g[t.node] for n, t in leaves.items()}


def checkpointed_backward(plan: CheckpointPlan, problem: ForwardProblem, params: dict,
                          shot: int, observed, objective, iteration: int = 1) -> dict:
    """GradientMap of one shot's misfit under an equal-segment plan."""
    return shot_gradient(problem, params, shot, observed, objective,
                         len(plan.segments), iteration).grads


# ---------------------------------------------------------------- mini-batches

def partition_shots(nshots: int, batch_size: int) -> list:
    if not 1 <= batch_size <= nshots:
        raise ValueError(f"need 1 <= batch_size <= {nshots}")
    return [list(range(i, min(i + batch_size, nshots))) for i in range(0, nshots, batch_size)]


def accumulate_minibatch(problem: ForwardProblem, params: dict, observed, objective,
                         partition, segments: int = 1, iteration: int = 1):
    """Total misfit and gradient over all shots of `partition`.

    Every shot gradient goes straight into one running sum, batch by batch in
    the given order, so contiguous partitions give bit-identical totals.
    Returns (misfit, grads, peak stored states).
    """
    flat = [s for batch in partition for s in batch]
    if len(set(flat)) != len(flat):
        raise ValueError("shot partition has overlapping batches")
    if any(not 0 <= s < problem.nshots for s in flat):
        raise ValueError("shot partition refers to unknown shots")
    total = {n: np.zeros_like(np.asarray(v, dtype=np.float64)) for n, v in params.items()}
    misfit = 0.0
    peak = 0
    for batch in partition:
        for s in batch:
            r = shot_gradient(problem, params, s, observed[s], objective, segments, iteration)
            misfit += r.misfit
            for n in total:
                total[n] += r.grads[n]
            peak = max(peak, r.peak_stored_states)
    return misfit, total, peak


# ---------------------------------------------------------------- inversion

@dataclass(frozen=True)
class ReparamConfig:
    num_blocks: int = 3
    v_min: float = 1500.0
    v_max: float = 3000.0
    dropout_p: float = 0.0
    pretrain_iters: int = 2000
    pretrain_tol: float = 1.0
    field: str = "vp"
    eta: float = 1e-3


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 10
    batch_size: int | None = None  # None: all shots in one batch
    checkpoint_segments: int = 1
    objective: obj.ObjectiveConfig = obj.ObjectiveConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    regularizer: RegularizerConfig = RegularizerConfig()
    reparam: ReparamConfig | None = None
    invert: tuple = ("vp",)
    bounds: dict = field(default_factory=dict)
    update_every: dict = field(default_factory=dict)
    random_batches: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.checkpoint_segments < 1:
            raise ValueError("checkpoint_segments must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name, b in self.bounds.items():
            lo, hi = b
            if not lo < hi:
                raise ValueError(f"bounds for {name} need min < max")
        for name, k in self.update_every.items():
            if int(k) < 1:
                raise ValueError(f"update_every[{name}] must be >= 1")
        if not self.invert:
            raise ValueError("nothing to invert")


for _k, _c in (("objective", obj.ObjectiveConfig), ("optimizer", OptimizerConfig),
               ("regularizer", RegularizerConfig), ("reparam", ReparamConfig)):
    fio.register_nested("InversionConfig", _k, _c)


@dataclass
class IterationLog:
    iter: int
    total_misfit: float
    grad_norms: dict
    mape: float | None
    ssim: float | None
    wall_time: float
    peak_stored_states: int

    def row(self):
        d = {"iter": self.iter, "total_misfit": self.total_misfit,
             "mape": self.mape, "ssim": self.ssim, "wall_time": self.wall_time,
             "peak_stored_states": self.peak_stored_states}
        d.update({f"grad_norm_{k}": v for k, v in self.grad_norms.items()})
        return d


@dataclass
class InversionResult:
    fields: dict
    logs: list
    net: rp.GeneratorNetwork | None = None


def _project(fields: dict, initial: dict, bounds: dict, frozen):
    out = {}
    for n, v in fields.items():
        if n in bounds:
            v = np.clip(v, *bounds[n])
        if frozen is not None:
            v = np.where(frozen, initial[n], v)
        out[n] = v
    return out


def run_inversion(config: InversionConfig, problem: ForwardProblem, observed,
                  initial: dict | None = None, frozen_mask=None, reference: dict | None = None,
                  net: rp.GeneratorNetwork | None = None, log_path=None,
                  snapshot_dir=None, snapshot_every: int = 0, callback=None) -> InversionResult:
    """Iterate simulate -> misfit (+ penalty) -> backward -> update -> project.

    `observed` is (nshots, nt, nrec).  `initial` maps the inverted field names to
    starting arrays (defaults to problem.fields).  `frozen_mask` is True where
    cells must keep their initial value.  With `config.reparam` the inverted
    field is produced by a generator network (pass `net` or one is built and
    pretrained on the initial field).
    """
    observed = np.asarray(observed, dtype=np.float64)
    names = list(config.invert)
    for n in names:
        if n not in FIELDS[problem.physics]:
            raise ModelError(f"{n!r} is not a field of {problem.physics} physics")
    if observed.shape[0] != problem.nshots:
        raise ModelError("observed data and geometry disagree on the shot count")
    start = {n: np.array((initial or {}).get(n, problem.fields[n]), dtype=np.float64)
             for n in names}
    frozen = None if frozen_mask is None else np.asarray(frozen_mask, dtype=bool)
    fields = _project(start, start, config.bounds, frozen)
    grid = problem.grid
    rng = np.random.default_rng(config.seed)
    batch = config.batch_size or problem.nshots
    if batch > problem.nshots:
        raise ValueError("batch_size exceeds the number of shots")

    rcfg = config.reparam
    if rcfg is not None:
        if names != [rcfg.field]:
            raise ModelError("reparameterised inversion updates exactly the generator field")
        if net is None:
            net = rp.build_generator(rcfg.num_blocks, grid.shape, (rcfg.v_min, rcfg.v_max),
                                     rcfg.dropout_p, seed=config.seed)
            rp.pretrain(net, np.clip(start[rcfg.field], rcfg.v_min, rcfg.v_max),
                        rcfg.pretrain_iters, rcfg.pretrain_tol)
        fields = {rcfg.field: _emit(net, start[rcfg.field], frozen)}
        opt = Optimizer(OptimizerConfig(kind=config.optimizer.kind, eta=rcfg.eta,
                                        beta1=config.optimizer.beta1,
                                        beta2=config.optimizer.beta2, eps=config.optimizer.eps))
        if config.optimizer.kind == "LBFGS":
            raise ModelError("l-BFGS on generator weights is not supported")
    else:
        opt = Optimizer(config.optimizer)
    lbfgs_state = OptimizerState()

    logs = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
    try:
        for it in range(config.iterations):
            t0 = time.perf_counter()
            if config.random_batches:
                shots = sorted(rng.choice(problem.nshots, size=batch, replace=False).tolist())
                partition = [shots]
            else:
                partition = partition_shots(problem.nshots, batch)

            def value_and_grad(flds):
                J, g, peak = accumulate_minibatch(problem, flds, observed, config.objective,
                                                  partition, config.checkpoint_segments, it + 1)
                for n in names:
                    if config.regularizer.kind != "none" and config.regularizer.alpha > 0:
                        v, (gr,) = ad.value_and_grad(
                            lambda m: weighted_penalty(config.regularizer, m, grid.dx, grid.dz),
                            flds[n])
                        J += v
                        g[n] = g[n] + gr
                    if frozen is not None:
                        g[n] = np.where(frozen, 0.0, g[n])
                return J, g, peak

            if rcfg is not None:
                masks = rp.sample_masks(net, rng) if rcfg.dropout_p > 0 else None
                cur = {rcfg.field: _emit(net, start[rcfg.field], frozen, masks)}
                J, g, peak = value_and_grad(cur)
                wgrads = _pull_back(net, start[rcfg.field], frozen, masks, g[rcfg.field])
                net.params = opt.update(net.params, wgrads)
                new = {rcfg.field: _emit(net, start[rcfg.field], frozen)}
            elif config.optimizer.kind == "LBFGS":
                J, g, peak = value_and_grad(fields)
                x0, unpack = _flatten(fields, names)

                def fg(x):
                    f2 = _project(unpack(x), start, config.bounds, frozen)
                    v, gg, _ = value_and_grad(f2)
                    return v, _flatten(gg, names)[0]
                lbfgs_state.lbfgs_value, lbfgs_state.lbfgs_grad = J, _flatten(g, names)[0]
                x1, lbfgs_state, _ = lbfgs_step(config.optimizer, lbfgs_state, x0, fg)
                new = unpack(x1)
            else:
                J, g, peak = value_and_grad(fields)
                active = {n: g[n] for n in names
                          if it % int(config.update_every.get(n, 1)) == 0}
                new = opt.update(fields, active)
            if not math.isfinite(J):
                raise FloatingPointError(f"non-finite misfit at iteration {it}")
            fields = _project(new, start, config.bounds, frozen) if rcfg is None else new
            m_ref = s_ref = None
            if reference is not None:
                n0 = names[0]
                m_ref = mape(reference[n0], fields[n0], None if frozen is None else ~frozen)
                s_ref = ssim(reference[n0], fields[n0], None if frozen is None else ~frozen)
            log = IterationLog(it, J, {n: float(np.linalg.norm(g[n])) for n in names},
                               m_ref, s_ref, time.perf_counter() - t0, peak)
            logs.append(log)
            if log_file is not None:
                row = log.row()
                if writer is None:
                    writer = csv.DictWriter(log_file, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow(row)
                log_file.flush()
            if snapshot_dir is not None and snapshot_every and (it + 1) % snapshot_every == 0:
                for n in names:
                    fio.write_grid(Path(snapshot_dir) / f"{n}_{it + 1:05d}.grd", fields[n],
                                   grid.dx, grid.dz)
            if callback is not None:
                callback(it, fields)
    finally:
        if log_file is not None:
            log_file.close()
    return InversionResult(fields, logs, net)


def _flatten(d, names):
    shapes = [np.shape(d[n]) for n in names]
    x = np.concatenate([np.ravel(d[n]) for n in names])

    def unpack(v):
        out, i = {}, 0
        for n, s in zip(names, shapes):
            size = int(np.prod(s))
            out[n] = v[i:i + size].reshape(s).copy()
            i += size
        return out
    return x, unpack


def _emit_tensor(net, base, frozen, masks, wts=None):
    v = rp.generate(net, wts, masks)
    if frozen is None:
        return v
    keep = frozen.astype(np.float64)
    return ad.add(ad.mul(1.0 - keep, v), Tensor(keep * base))


def _emit(net, base, frozen, masks=None):
    with ad.finite_checks(True):
        return _emit_tensor(net, base, frozen, masks).data


def _pull_back(net, base, frozen, masks, g_field):
    with Tape() as tape:
        wts = {k: tape.variable(v) for k, v in net.params.items()}
        v = _emit_tensor(net, base, frozen, masks, wts)
    g = ad.vjp(tape, [v], [g_field], list(wts.values()))
    return {k: g[t.node] for k, t in wts.items()}
