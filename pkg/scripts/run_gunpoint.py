"""FCN on GunPoint over several seeds, then FGSM/BIM on the median model.

    python scripts/run_gunpoint.py --epochs 500 --seeds 0 1 2 --eps 0.1
"""
import argparse

import numpy as np

from deeptsc import experiments as ex


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eps", type=float, default=0.1)
    args = ap.parse_args()

    train_set, test_set = ex.load_gunpoint()
    runs = ex.gunpoint_fcn(seeds=args.seeds, epochs=args.epochs, data=(train_set, test_set))
    for r in runs:
        print(f"seed {r.seed}: test accuracy {r.accuracy:.4f} "
              f"(final train loss {r.report.train_loss[-1]:.4g}, {r.seconds:.0f}s)")
    accs = [r.accuracy for r in runs]
    print(f"median accuracy {np.median(accs):.4f}")

    median_run = sorted(runs, key=lambda r: r.accuracy)[len(runs) // 2]
    s = ex.adversarial_summary(median_run.state, test_set, args.eps)
    print(f"seed {median_run.seed}, eps {args.eps:g}: clean {s['clean']:.4f}  "
          f"fgsm {s['fgsm']:.4f}  bim {s['bim']:.4f}  max|x'-x| {s['max_delta']!r}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
