"""Command line entry point: ``xbarnas search|finetune|eval|sweep --config run.yaml``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import nas
from .config import ConfigError, RunConfig, config_schema, load_config
from .crossbar import CrossbarSpec
from .data import Dataset, carve_validation, gen_synthetic, ingest_cifar10
from .hw_cost import build_area_table, edap_report, lambda_scale, subnet_cost
from .supernet import Supernet, SupernetConfig

log = logging.getLogger("xbarnas")


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = gen_synthetic(d.classes, d.per_class, d.size, seed=cfg.seed, margin=d.margin,
                           noise=d.noise, test_per_class=d.test_per_class)
    else:
        ds = ingest_cifar10(d.cifar_dir, d.subset_per_class, seed=cfg.seed, test_per_class=d.test_per_class)
    return carve_validation(ds, d.validation_size, cfg.seed)


def supernet_config(cfg: RunConfig, ds: Dataset) -> SupernetConfig:
    c, h, _ = ds.image_shape
    return SupernetConfig(in_channels=c, image_size=h, num_classes=ds.num_classes, width=cfg.supernet.width,
                          seed=cfg.seed, input_mean=cfg.supernet.input_mean, input_std=cfg.supernet.input_std)


def search_specs(cfg: RunConfig) -> List[CrossbarSpec]:
    return list(cfg.crossbars) if cfg.train.variant == "MultiXbar" else list(cfg.crossbars[:1])


def effective_lambda(cfg: RunConfig, tables, num_classes: int) -> float:
    lam = cfg.train.lam
    if cfg.train.lam_normalized and lam > 0:
        lam *= lambda_scale(tables[0], num_classes)
    return lam


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                            for k, v in items.items()))


def _write_reports(out: Path, descriptor, net_cfg, cfg: RunConfig) -> None:
    for i, spec in enumerate(cfg.crossbars):
        rep = edap_report(descriptor, net_cfg, spec, cfg.cost)
        name = "hardware_report.txt" if i == 0 else f"hardware_report_{spec.size}.txt"
        (out / name).write_text(rep.to_text())


def cmd_search(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    net_cfg = supernet_config(cfg, ds)
    net = Supernet(net_cfg)
    specs = search_specs(cfg)
    tables = [build_area_table(net_cfg, s, cfg.cost) for s in specs]
    lam = effective_lambda(cfg, tables, net_cfg.num_classes)
    state = nas.new_search_state(net, cfg.train)
    nas.search(state, ds.train, ds.validation, specs, cfg.attack.attack(), cfg.train, tables, lam)

    descriptor = nas.derive_subnet(net.arch, cfg.train.threshold, provenance={
        "variant": cfg.train.variant, "crossbar_sizes": "/".join(str(s.size) for s in specs),
        "seed": cfg.seed, "lambda": repr(lam)})
    nas.save_checkpoint(out / "supernet.ckpt", net, cfg.identity(), seed=cfg.seed,
                        epochs_done=state.epochs_done,
                        optimizers={"weights": state.weight_opt, "arch": state.arch_opt})
    (out / "subnet.txt").write_text(descriptor.to_text())
    _write_reports(out, descriptor, net_cfg, cfg)
    with open(out / "search_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "phase1_loss", "phase2_loss", "expected_area"] +
                   [f"p{s}_{j}" for s in range(9) for j in range(len(state.history[0].alphas[s]))])
        for rec in state.history:
            probs = [float(p) for a in rec.alphas for p in np.exp(a - a.max()) / np.exp(a - a.max()).sum()]
            area = sum(float((np.exp(a - a.max()) / np.exp(a - a.max()).sum()) @ phi)
                       for a, phi in zip(rec.alphas, tables[0].phi))
            w.writerow([rec.epoch, repr(rec.phase1_loss), repr(rec.phase2_loss), repr(area)] +
                       [repr(p) for p in probs])
    print(f"subnet: {descriptor.to_string()}")
    print(f"derived area (n={tables[0].crossbar_size}): {subnet_cost(descriptor.retained, tables[0])!r}")
    return out


def _load_ckpt(path: Optional[str]) -> nas.Checkpoint:
    if path is None:
        raise ConfigError("--checkpoint is required for this command")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return nas.load_checkpoint(path)


def cmd_finetune(cfg: RunConfig, checkpoint: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = _load_ckpt(checkpoint)
    ds = load_dataset(cfg)
    net = ck.build_net()
    descriptor = ck.descriptor or nas.derive_subnet(net.arch, cfg.train.threshold,
                                                    provenance={"variant": cfg.train.variant, "seed": cfg.seed})
    sub = net if net.gates is not None else net.as_subnet(descriptor)
    res = nas.finetune(sub, ds.train, search_specs(cfg), cfg.attack.attack(), cfg.train.finetune_epochs, cfg.train)
    nas.save_checkpoint(out / "subnet.ckpt", sub, cfg.identity(), seed=cfg.seed, descriptor=descriptor,
                        extra={"finetune_updates": res.updates})
    (out / "subnet.txt").write_text(descriptor.to_text())
    with open(out / "finetune_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, l in enumerate(res.epoch_losses):
            w.writerow([i, repr(l)])
    print(f"fine-tuned {descriptor.to_string()} for {cfg.train.finetune_epochs} epochs ({res.updates} updates)")
    return out


def eval_accuracies(net: Supernet, x, y, cfg: RunConfig) -> dict:
    res = {"acc.ideal.clean": nas.evaluate(net, x, y, seed=cfg.seed)}
    for spec in cfg.crossbars:
        tag = f"acc.n{spec.size}"
        res[f"{tag}.clean"] = nas.evaluate(net, x, y, spec, seed=cfg.seed)
        for steps in cfg.attack.eval_steps:
            res[f"{tag}.pgd{steps}"] = nas.evaluate(net, x, y, spec, attack=cfg.attack.attack(steps), seed=cfg.seed)
    return res


def cmd_eval(cfg: RunConfig, checkpoint: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = _load_ckpt(checkpoint).build_net()
    tx, ty = load_dataset(cfg).test
    res = eval_accuracies(net, tx, ty, cfg)
    _write_kv(out / "eval_report.txt", res)
    for k, v in res.items():
        print(f"{k}={v:.2f}")
    return out


def sweep_rows(net: Supernet, x, y, cfg: RunConfig) -> List[dict]:
    base = cfg.spec_for(cfg.sweep.crossbar_size)
    steps = cfg.sweep.attack_steps
    rows = []
    for sigma in cfg.sweep.sigmas:
        spec = base.with_sigma(sigma)
        row = {"sigma_over_mu": float(sigma), "clean_acc": nas.evaluate(net, x, y, spec, seed=cfg.seed)}
        if steps:
            row[f"pgd{steps}_acc"] = nas.evaluate(net, x, y, spec, attack=cfg.attack.attack(steps), seed=cfg.seed)
        rows.append(row)
    return rows


def cmd_sweep(cfg: RunConfig, checkpoint: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = _load_ckpt(checkpoint).build_net()
    tx, ty = load_dataset(cfg).test
    rows = sweep_rows(net, tx, ty, cfg)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) for k, v in r.items()})
    for r in rows:
        print(", ".join(f"{k}={v:.4g}" for k, v in r.items()))
    return out


COMMANDS = {"search": cmd_search, "finetune": cmd_finetune, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xbarnas", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--checkpoint", help="checkpoint produced by an earlier command")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="seed (overrides the config's seed)")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("schema", help="print the config JSON schema")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        fn = COMMANDS[args.command]
        if args.command == "search":
            fn(cfg)
        else:
            fn(cfg, args.checkpoint)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"xbarnas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
