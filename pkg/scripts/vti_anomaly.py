"""Recover epsilon and delta anomalies in a crosswell VTI model with vp, vs and rho known."""
import argparse

from fwikit.metrics import mape
from fwikit.optimizers import OptimizerConfig
from fwikit.runtime import InversionConfig, run_inversion
from fwikit.toy import vti_anomaly_case


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=150)
    ap.add_argument("--eta", type=float, default=0.01)
    ap.add_argument("--shots", type=int, default=4)
    ap.add_argument("--every", type=int, default=10)
    args = ap.parse_args()
    case = vti_anomaly_case(nshots=args.shots)
    cfg = InversionConfig(iterations=args.iters, invert=("epsilon", "delta"),
                          optimizer=OptimizerConfig("Adam", eta=args.eta),
                          bounds={"epsilon": (0.0, 0.5), "delta": (-0.1, 0.3)})

    def show(it, f):
        if (it + 1) % args.every == 0:
            print(f"{it + 1:4d}  epsilon MAPE {mape(case.true['epsilon'], f['epsilon']):.4f}  "
                  f"delta MAPE {mape(case.true['delta'], f['delta']):.4f}", flush=True)

    print(f"start epsilon MAPE {mape(case.true['epsilon'], case.initial['epsilon']):.4f}  "
          f"delta MAPE {mape(case.true['delta'], case.initial['delta']):.4f}")
    run_inversion(cfg, case.problem, case.observed, case.initial, callback=show)


if __name__ == "__main__":
    main()
