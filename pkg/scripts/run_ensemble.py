"""Five Inception members on GunPoint and their probability average.

    python scripts/run_ensemble.py --members 5 --epochs 150
"""
import argparse

import numpy as np

from deeptsc import experiments as ex


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--members", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    runs, acc = ex.gunpoint_ensemble(args.members, args.epochs, args.seed)
    for r in runs:
        print(f"member seed {r.seed}: {r.accuracy:.4f} ({r.seconds:.0f}s)")
    print(f"ensemble {acc:.4f}, median member {np.median([r.accuracy for r in runs]):.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
