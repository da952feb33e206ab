"""Searched subnet versus the fixed plain-CNN baseline under the same fine-tuning budget.

Both networks share the skeleton; the baseline uses Conv3x3 in every slot and
starts from fresh weights.  Reports clean and PGD accuracy on noisy crossbars
and the EDAP of each architecture.

    python3 scripts/baseline_compare.py --seeds 0 1
"""
import argparse
import logging

from xbarnas import nas
from xbarnas.experiments import DeskProtocol, robustness, run_finetune, run_search
from xbarnas.hw_cost import edap_report
from xbarnas.supernet import Supernet


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--search-epochs", type=int, default=20)
    ap.add_argument("--finetune-epochs", type=int, default=10)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    proto = DeskProtocol()
    for seed in args.seeds:
        ds = proto.dataset(seed)
        out = run_search(proto, seed, epochs=args.search_epochs, ds=ds)
        searched = run_finetune(proto, out, epochs=args.finetune_epochs, ds=ds)

        base_d = nas.baseline_descriptor()
        base = Supernet(proto.net_config(seed)).as_subnet(base_d)
        cfg = proto.train_config(seed)
        nas.finetune(base, ds.train, [proto.spec], proto.attack, args.finetune_epochs, cfg)

        for name, net, d in (("searched", searched, out.descriptor), ("baseline", base, base_d)):
            acc = robustness(proto, net, ds, seed, steps=(2, 20))
            edap = edap_report(d, net.config, proto.spec, proto.cost).edap
            print(f"seed={seed} {name:8s} clean={acc['clean']:.1f} pgd2={acc['pgd2']:.1f} "
                  f"pgd20={acc['pgd20']:.1f} edap={edap:.4g}  {d.to_string()}", flush=True)


if __name__ == "__main__":
    main()
