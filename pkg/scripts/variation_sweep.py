"""Accuracy versus device variation for MultiXbar-trained subnets at fixed weights.

    python3 scripts/variation_sweep.py --seeds 100 101 --pgd 10 --out sweep.csv
"""
import argparse
import csv
import logging

from xbarnas.experiments import DeskProtocol, run_finetune, run_search, sigma_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[100, 101, 102, 103, 104])
    ap.add_argument("--variant", default="MultiXbar", choices=["Xbar", "MultiXbar"])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])
    ap.add_argument("--search-epochs", type=int, default=10)
    ap.add_argument("--finetune-epochs", type=int, default=5)
    ap.add_argument("--pgd", type=int, default=0, help="also report PGD-n accuracy (0 = clean only)")
    ap.add_argument("--out", default="sweep.csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    proto = DeskProtocol()
    rows = []
    for seed in args.seeds:
        ds = proto.dataset(seed)
        out = run_search(proto, seed, variant=args.variant, epochs=args.search_epochs, ds=ds)
        sub = run_finetune(proto, out, variant=args.variant, epochs=args.finetune_epochs, ds=ds)
        for r in sigma_sweep(proto, sub, ds, seed, args.sigmas, args.pgd or None):
            rows.append({"seed": seed, **r})
            print(", ".join(f"{k}={v:.4g}" for k, v in rows[-1].items()), flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
