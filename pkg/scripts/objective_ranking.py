"""Same toy, same budget, different objectives, from an over-smoothed start."""
import argparse
import time

from fwikit.metrics import mape, ssim
from fwikit.objectives import KINDS, ObjectiveConfig
from fwikit.optimizers import OptimizerConfig
from fwikit.runtime import InversionConfig, run_inversion
from fwikit.toy import two_anomaly_case


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kinds", nargs="+", default=["L2", "SoftDTW"], choices=KINDS)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--eta", type=float, default=8.0)
    ap.add_argument("--smooth", type=float, default=800.0)
    args = ap.parse_args()
    case = two_anomaly_case(smooth_m=args.smooth)
    v_true = case.true["vp"]
    print(f"start      MAPE {mape(v_true, case.initial['vp']):.4f}  "
          f"SSIM {ssim(v_true, case.initial['vp']):.4f}")
    for kind in args.kinds:
        t0 = time.perf_counter()
        cfg = InversionConfig(iterations=args.iters, objective=ObjectiveConfig(kind),
                              optimizer=OptimizerConfig("Adam", eta=args.eta),
                              bounds={"vp": (1500.0, 2600.0)})
        v = run_inversion(cfg, case.problem, case.observed, case.initial).fields["vp"]
        print(f"{kind:10s} MAPE {mape(v_true, v):.4f}  SSIM {ssim(v_true, v):.4f}  "
              f"{time.perf_counter() - t0:.0f} s", flush=True)


if __name__ == "__main__":
    main()
