"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad config, file, model), 2 numerical
failure (instability, non-finite misfit, gradient check above tolerance).
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as fio
from . import reparam as rp
from .earth_model import AcquisitionGeometry, Grid2D, ModelError, gardner_density, ricker
from .metrics import mape, ssim
from .objectives import SinkhornConvergenceError
from .propagator import InstabilityError, SimulationConfig
from .runtime import ForwardProblem, InversionConfig, run_inversion, simulate_all

VERSION = "0.1.0"


@dataclass(frozen=True)
class GeometryConfig:
    sources: tuple
    receivers: tuple
    record_component: str = "pressure"


@dataclass(frozen=True)
class WaveletConfig:
    f0: float
    t0: float | None = None


@dataclass(frozen=True)
class RunConfig:
    simulation: SimulationConfig
    geometry: GeometryConfig
    wavelet: WaveletConfig
    physics: str = "acoustic"
    v_max: float | None = None
    rho: float | None = None  # constant density; None: Gardner from vp
    inversion: InversionConfig = InversionConfig()
    seed: int = 0


fio.register_nested("RunConfig", "simulation", SimulationConfig)
fio.register_nested("RunConfig", "geometry", GeometryConfig)
fio.register_nested("RunConfig", "wavelet", WaveletConfig)
fio.register_nested("RunConfig", "inversion", InversionConfig)


def load_config(path) -> RunConfig:
    cfg = fio.from_dict(RunConfig, fio.load_json(path))
    if cfg.physics not in ("acoustic", "elastic"):
        raise fio.SchemaError(f"schema error: physics {cfg.physics!r} not available from the CLI")
    return cfg


def _problem(cfg: RunConfig, vp, dx, dz, vs=None) -> ForwardProblem:
    grid = Grid2D(nx=vp.shape[1], nz=vp.shape[0], dx=dx, dz=dz)
    g = cfg.geometry
    geom = AcquisitionGeometry([tuple(s) for s in g.sources], [tuple(r) for r in g.receivers],
                               g.record_component)
    geom.validate(grid)
    sim = cfg.simulation
    w = ricker(cfg.wavelet.f0, sim.dt, sim.nt, cfg.wavelet.t0).samples
    rho = np.full(vp.shape, cfg.rho) if cfg.rho is not None else gardner_density(vp)
    fields = {"vp": vp, "rho": rho}
    if cfg.physics == "elastic":
        if vs is None:
            raise ModelError("elastic physics needs --vs")
        fields["vs"] = vs
    v_max = cfg.v_max if cfg.v_max is not None else float(vp.max())
    return ForwardProblem(cfg.physics, grid, geom, w, sim, fields, v_max)


def _grid_arg(path):
    a, dx, dz = fio.read_grid(path)
    return a, dx, dz


def cmd_forward(args):
    cfg = load_config(args.config)
    vp, dx, dz = _grid_arg(args.model)
    vs = _grid_arg(args.vs)[0] if args.vs else None
    prob = _problem(cfg, vp, dx, dz, vs)
    traces = simulate_all(prob)
    fio.write_traces(args.out, traces, cfg.simulation.dt, cfg.geometry.record_component)
    print(f"wrote {traces.shape[0]} shots x {traces.shape[2]} receivers x {traces.shape[1]} "
          f"samples to {args.out}")
    return 0


def cmd_invert(args):
    cfg = load_config(args.config)
    vp0, dx, dz = _grid_arg(args.initial)
    vs = _grid_arg(args.vs)[0] if args.vs else None
    obs, dt, comp = fio.read_traces(args.observed)
    prob = _problem(cfg, vp0, dx, dz, vs)
    sim = cfg.simulation
    if obs.shape != (prob.nshots, sim.nt, len(cfg.geometry.receivers)) or dt != sim.dt:
        raise ModelError(f"observed data {obs.shape}, dt={dt} do not match the config")
    mask = None
    if args.mask:
        mask = _grid_arg(args.mask)[0] != 0
    ref = {"vp": _grid_arg(args.true)[0]} if args.true else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inv = cfg.inversion
    res = run_inversion(inv, prob, obs, {n: prob.fields[n] for n in inv.invert},
                        frozen_mask=mask, reference=ref, log_path=out / "log.csv",
                        snapshot_dir=out, snapshot_every=args.snapshot_every)
    finals = {}
    for n, v in res.fields.items():
        p = out / f"{n}_final.grd"
        fio.write_grid(p, v, dx, dz)
        finals[n] = str(p)
        if args.pgm:
            fio.write_pgm(out / f"{n}_final.pgm", v)
    state = None
    if res.net is not None:
        state = out / "network.npz"
        buf = _io.BytesIO()
        np.savez(buf, latent=res.net.latent, **res.net.params)
        fio.atomic_write(state, buf.getvalue())
    manifest = {
        "code_version": VERSION,
        "seed": inv.seed,
        "config": fio.to_dict(cfg),
        "log": str(out / "log.csv"),
        "snapshots": sorted(str(p) for p in out.glob("*_0*.grd")),
        "final_models": finals,
        "network_state": None if state is None else str(state),
        "network": None if res.net is None else {
            "num_blocks": res.net.num_blocks, "target_shape": list(res.net.target_shape),
            "v_bounds": list(res.net.v_bounds), "dropout_p": res.net.dropout_p},
        "grid": {"dx": dx, "dz": dz},
    }
    fio.write_json(out / "manifest.json", manifest)
    last = res.logs[-1] if res.logs else None
    print(f"{len(res.logs)} iterations; final misfit "
          f"{last.total_misfit if last else float('nan'):.6e}; manifest {out / 'manifest.json'}")
    return 0


def cmd_gradcheck(args):
    from .toy import gradcheck_case
    from .objectives import ObjectiveConfig
    from .runtime import shot_gradient
    case = gradcheck_case(args.nt)
    prob, v0 = case.problem, case.initial["vp"]
    oc = ObjectiveConfig("L2")
    g = shot_gradient(prob, {"vp": v0}, 0, case.observed[0], oc).grads["vp"]

    def J(v):
        d = simulate_all(prob, {"vp": v})[0]
        return 0.5 * np.sum((case.observed[0] - d) ** 2) * prob.sim.dt

    rng = np.random.default_rng(args.seed)
    idx = rng.choice(v0.size, size=min(args.probes, v0.size), replace=False)
    worst = 0.0
    for i in idx:
        vp_, vm_ = v0.copy(), v0.copy()
        vp_.flat[i] += args.h
        vm_.flat[i] -= args.h
        fd = (J(vp_) - J(vm_)) / (2 * args.h)
        worst = max(worst, abs(g.flat[i] - fd) / (abs(fd) + 1e-12))
    print(f"max relative error {worst:.3e} over {len(idx)} cells (h={args.h})")
    return 0 if worst < args.tol else 2


def cmd_metrics(args):
    a, _, _ = _grid_arg(args.true)
    b, _, _ = _grid_arg(args.estimate)
    mask = None
    if args.mask:
        mask = _grid_arg(args.mask)[0] == 0
    print(f"MAPE {mape(a, b, mask):.6f}")
    print(f"SSIM {ssim(a, b, mask):.6f}")
    return 0


def cmd_uncertainty(args):
    man = fio.load_json(args.manifest)
    if not man.get("network_state"):
        raise ModelError("manifest has no network state (run invert with reparam)")
    spec = man["network"]
    blob = np.load(man["network_state"])
    net = rp.build_generator(spec["num_blocks"], tuple(spec["target_shape"]),
                             tuple(spec["v_bounds"]), spec["dropout_p"], init="zeros")
    net.params = {k: blob[k] for k in net.params}
    net.latent = blob["latent"]
    mean, std = rp.dropout_uncertainty(net, args.p, args.samples, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dx, dz = man["grid"]["dx"], man["grid"]["dz"]
    fio.write_grid(out / "mean.grd", mean, dx, dz)
    fio.write_grid(out / "std.grd", std, dx, dz)
    if args.pgm:
        fio.write_pgm(out / "std.pgm", std)
    print(f"field-mean std {std.mean():.6e}")
    return 0


def cmd_convexity_scan(args):
    from .scan import convexity_scan, normalise
    shifts, curves = convexity_scan(args.f0, args.max_shift, args.step)
    buf = _io.StringIO()
    w = csv.writer(buf)
    w.writerow(["shift"] + list(curves))
    norm = {k: normalise(v) for k, v in curves.items()}
    for i, s in enumerate(shifts):
        w.writerow([f"{s:.4f}"] + [repr(float(norm[k][i])) for k in curves])
    fio.atomic_write(args.out, buf.getvalue().encode())
    print(f"wrote {len(shifts)} shifts x {len(curves)} objectives to {args.out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors (exit 1), not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"usage error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    p = _Parser(prog="fwikit", description="Differentiable FWI toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forward", help="simulate shot records")
    f.add_argument("--config", required=True)
    f.add_argument("--model", required=True, help="vp GridFile")
    f.add_argument("--vs", help="vs GridFile (elastic)")
    f.add_argument("--out", required=True, help="output TraceFile")
    f.set_defaults(func=cmd_forward)

    i = sub.add_parser("invert", help="run an inversion")
    i.add_argument("--config", required=True)
    i.add_argument("--observed", required=True)
    i.add_argument("--initial", required=True)
    i.add_argument("--vs")
    i.add_argument("--true", help="reference model for MAPE/SSIM logging")
    i.add_argument("--mask", help="GridFile, nonzero = frozen cell")
    i.add_argument("--out-dir", required=True)
    i.add_argument("--snapshot-every", type=int, default=0)
    i.add_argument("--pgm", action="store_true")
    i.set_defaults(func=cmd_invert)

    g = sub.add_parser("gradcheck", help="AD vs finite differences on the bundled 40x30 case")
    g.add_argument("--h", type=float, default=1e-2)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--probes", type=int, default=20)
    g.add_argument("--nt", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("metrics", help="MAPE and SSIM between two GridFiles")
    m.add_argument("true")
    m.add_argument("estimate")
    m.add_argument("--mask", help="GridFile, nonzero = excluded cell")
    m.set_defaults(func=cmd_metrics)

    u = sub.add_parser("uncertainty", help="dropout mean/std maps from a trained generator")
    u.add_argument("--manifest", required=True)
    u.add_argument("--p", type=float, default=0.1)
    u.add_argument("--samples", type=int, default=100)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out-dir", required=True)
    u.add_argument("--pgm", action="store_true")
    u.set_defaults(func=cmd_uncertainty)

    c = sub.add_parser("convexity-scan", help="normalised misfit vs time shift CSV")
    c.add_argument("--out", required=True)
    c.add_argument("--f0", type=float, default=6.0)
    c.add_argument("--max-shift", type=float, default=0.5)
    c.add_argument("--step", type=float, default=0.01)
    c.set_defaults(func=cmd_convexity_scan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (fio.SchemaError, fio.FormatError, FileNotFoundError) as e:
        print(str(e), file=sys.stderr)
        return 1
    except ModelError as e:
        print(f"model error: {e}", file=sys.stderr)
        return 1
    except (InstabilityError, ad.NonFiniteError, SinkhornConvergenceError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
