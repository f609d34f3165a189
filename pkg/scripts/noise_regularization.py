"""GC inversion of noisy toy data with and without regularisation."""
import argparse

from fwikit.metrics import add_trace_noise, mape, ssim
from fwikit.objectives import ObjectiveConfig
from fwikit.optimizers import OptimizerConfig
from fwikit.regularizers import RegularizerConfig
from fwikit.runtime import InversionConfig, run_inversion
from fwikit.toy import two_anomaly_case


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--noise", type=float, default=4.0)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--eta", type=float, default=8.0)
    ap.add_argument("--runs", nargs="+", default=["none:0", "tikhonov2:1e-5", "tv2:4e-5"],
                    help="kind:alpha pairs")
    args = ap.parse_args()
    case = two_anomaly_case()
    noisy, snr = add_trace_noise(case.observed, args.noise, seed=0)
    print(f"noise factor {args.noise}, mean SNR {snr:.1f} dB")
    for run in args.runs:
        kind, alpha = run.split(":")
        cfg = InversionConfig(iterations=args.iters, objective=ObjectiveConfig("GC"),
                              optimizer=OptimizerConfig("Adam", eta=args.eta),
                              regularizer=RegularizerConfig(kind, float(alpha)),
                              bounds={"vp": (1500.0, 2600.0)})
        v = run_inversion(cfg, case.problem, noisy, case.initial).fields["vp"]
        print(f"{kind:10s} alpha {float(alpha):8.1e}  MAPE {mape(case.true['vp'], v):.4f}  "
              f"SSIM {ssim(case.true['vp'], v):.4f}", flush=True)


if __name__ == "__main__":
    main()
