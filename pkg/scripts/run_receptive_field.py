"""Receptive-field study on the two-class plateau task, plus CAM localisation.

A depth-6 Inception network whose receptive field spans the series is
compared with a depth-1, kernel-4 network on the same data.

    python scripts/run_receptive_field.py --seeds 0 1 2 --epochs 20
"""
import argparse

from deeptsc import experiments as ex
from deeptsc.models import receptive_field


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    print(f"receptive fields: wide {receptive_field(ex.RF_SPEC)}, "
          f"narrow {receptive_field(ex.SHORT_RF_SPEC)}, series length {ex.RF_LENGTH}")
    for run in ex.receptive_field_runs(seeds=args.seeds, epochs=args.epochs):
        rate, n = ex.cam_hit_rate(run["wide"].state, run["data"])
        print(f"seed {run['seed']}: wide {run['wide'].accuracy:.4f}  narrow {run['narrow'].accuracy:.4f}  "
              f"CAM hits {rate:.3f} of {n}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
