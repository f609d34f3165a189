"""Two-anomaly acoustic toy: invert from a smoothed start and print MAPE/SSIM progress.

    python scripts/toy_inversion.py --objective L2 --eta 8 --iters 100
"""
import argparse
import time

import numpy as np

from fwikit.metrics import add_trace_noise, mape, ssim
from fwikit.objectives import ObjectiveConfig
from fwikit.optimizers import OptimizerConfig
from fwikit.regularizers import RegularizerConfig
from fwikit.runtime import InversionConfig, run_inversion
from fwikit.toy import two_anomaly_case


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--objective", default="L2")
    ap.add_argument("--optimizer", default="Adam")
    ap.add_argument("--eta", type=float, default=8.0)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--smooth", type=float, default=400.0, help="starting-model smoothing window, m")
    ap.add_argument("--noise", type=float, default=0.0, help="trace noise factor (0: clean)")
    ap.add_argument("--reg", default="none")
    ap.add_argument("--alpha", type=float, default=0.0)
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--out", help="save final model to this .npy")
    args = ap.parse_args()

    case = two_anomaly_case(smooth_m=args.smooth)
    obs = case.observed
    if args.noise > 0:
        obs, snr = add_trace_noise(obs, args.noise, seed=0)
        print(f"noise factor {args.noise}: mean SNR {snr:.1f} dB")
    cfg = InversionConfig(iterations=args.iters, objective=ObjectiveConfig(args.objective),
                          optimizer=OptimizerConfig(args.optimizer, eta=args.eta),
                          regularizer=RegularizerConfig(args.reg, args.alpha),
                          bounds={"vp": (1500.0, 2600.0)})
    v0 = case.initial["vp"]
    print(f"start  MAPE {mape(case.true['vp'], v0):.4f}  SSIM {ssim(case.true['vp'], v0):.4f}")
    t0 = time.perf_counter()

    def show(it, fields):
        if (it + 1) % args.every == 0 or it + 1 == args.iters:
            v = fields["vp"]
            print(f"{it + 1:4d}   MAPE {mape(case.true['vp'], v):.4f}  "
                  f"SSIM {ssim(case.true['vp'], v):.4f}  {time.perf_counter() - t0:.0f} s",
                  flush=True)

    res = run_inversion(cfg, case.problem, obs, case.initial, callback=show)
    if args.out:
        np.save(args.out, res.fields["vp"])


if __name__ == "__main__":
    main()
