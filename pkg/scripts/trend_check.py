"""Lambda sweep plus robustness of the lambda=0 subnet on the desk task.

    python3 scripts/trend_check.py --seeds 0 1 2 3 4 --out trend.csv
"""
import argparse
import csv
import logging
import statistics

from xbarnas.experiments import DeskProtocol, robustness, run_finetune, run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.3, 3.0],
                    help="normalised area penalties (1.0 balances chance-level CE and the uniform-mix area)")
    ap.add_argument("--search-epochs", type=int, default=20)
    ap.add_argument("--finetune-epochs", type=int, default=10)
    ap.add_argument("--out", default="trend.csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    proto = DeskProtocol()
    rows = []
    for seed in args.seeds:
        ds = proto.dataset(seed)
        for lam in args.lambdas:
            out = run_search(proto, seed, lam=lam, epochs=args.search_epochs, ds=ds)
            row = {"seed": seed, "lambda": lam, "subnet": out.descriptor.to_string(),
                   "derived_area": out.derived_area, "edap": out.edap}
            if lam == 0.0:
                sub = run_finetune(proto, out, epochs=args.finetune_epochs, ds=ds)
                row.update(robustness(proto, sub, ds, seed, steps=(2, 20)))
            rows.append(row)
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)

    keys = ["seed", "lambda", "subnet", "derived_area", "edap", "clean", "pgd2", "pgd20"]
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in keys})
    for lam in args.lambdas:
        sel = [r for r in rows if r["lambda"] == lam]
        print(f"lambda={lam}: median area {statistics.median(r['derived_area'] for r in sel):.4g}, "
              f"median EDAP {statistics.median(r['edap'] for r in sel):.4g}")


if __name__ == "__main__":
    main()
