"""Held-out LL on 3x3 bars as a function of the number of training samples K."""
import argparse
import csv

from rws.experiments import bars_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k-values", default="1,2,5,10,25")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--out", default="k_sweep.csv")
    args = ap.parse_args()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "seed", "heldout_ll", "analytic_ll"])
        for K in (int(k) for k in args.k_values.split(",")):
            for seed in range(args.seeds):
                r = bars_experiment(seed, "both", K, epochs=args.epochs)
                w.writerow([K, seed, repr(r.heldout_ll), repr(r.analytic_ll)])
                fh.flush()
                print(f"K={K} seed {seed} held-out {r.heldout_ll:.4f}")


if __name__ == "__main__":
    main()
