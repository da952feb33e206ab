import json
from pathlib import Path

import jsonschema
import pytest
import yaml

from xbarnas.cli import main
from xbarnas.config import ConfigError, config_schema, load_config, parse_config

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "seed": 3,
    "data": {"per_class": 40, "test_per_class": 20, "validation_size": 16},
    "supernet": {"width": 4},
    "train": {"epochs": 2, "batch_size": 32, "finetune_epochs": 1, "finetune_batch_size": 40,
              "lr_arch": 0.05, "attack_steps": [1, 2]},
    "attack": {"eval_steps": [2]},
    "sweep": {"sigmas": [0.1, 0.2, 0.3, 0.4, 0.5], "attack_steps": 2},
}


def write(tmp_path, raw, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def test_shipped_schema_is_current():
    assert json.loads((ROOT / "configs" / "schema.json").read_text()) == config_schema()


@pytest.mark.parametrize("name", ["default.yaml", "desk.yaml"])
def test_shipped_configs_load_and_validate(name):
    raw = yaml.safe_load((ROOT / "configs" / name).read_text())
    jsonschema.validate(raw, config_schema())
    load_config(ROOT / "configs" / name)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"train": {"epochs": 2, "learning_rate": 0.1}},
    {"train": {"seed": 4}},
    {"train": {"epochs": "ten"}},
    {"train": {"attack_steps": [7]}},
    {"crossbars": []},
    {"crossbars": [{"size": 64}, {"size": 64}]},
    {"crossbars": [{"size": 256}]},
    {"crossbars": [{"size": 64, "r_min": 2e6}]},
    {"data": {"source": "svhn"}},
    {"seed": True},
])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"train": {"learning_rate": 0.1}}, {"train": {"seed": 4}},
                                 {"train": {"epochs": "ten"}}, {"crossbars": [{"size": 64, "extra": 1}]}])
def test_schema_rejects_structural_errors(raw):
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(raw, config_schema())


def test_seed_and_out_overrides(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 1, "output_dir": "x"}), seed=9, output_dir=str(tmp_path / "o"))
    assert cfg.seed == cfg.train.seed == 9
    assert cfg.output_dir == str(tmp_path / "o")
    assert cfg.train.validation_size == cfg.data.validation_size


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "missing.yaml")]) != 0
    assert "does not exist" in capsys.readouterr().err
    bad = write(tmp_path, {"nope": 1}, "bad.yaml")
    assert main(["search", "--config", str(bad)]) != 0
    good = write(tmp_path, TINY)
    assert main(["eval", "--config", str(good), "--checkpoint", str(tmp_path / "none.ckpt")]) != 0
    assert main(["eval", "--config", str(good)]) != 0
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", str(good), "--checkpoint", str(tmp_path / "junk.ckpt")]) != 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write(base, TINY)
    runs = []
    for i in range(2):
        out = base / f"run{i}"
        assert main(["search", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["finetune", "--config", str(cfg), "--out", str(out),
                     "--checkpoint", str(out / "supernet.ckpt")]) == 0
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "subnet.ckpt")]) == 0
        assert main(["sweep", "--config", str(cfg), "--out", str(out), "--checkpoint", str(out / "subnet.ckpt")]) == 0
        runs.append(out)
    return base, cfg, runs


def read_kv(path):
    return dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if "=" in line)


def test_pipeline_emits_artifacts(pipeline):
    _, _, (out, _) = pipeline
    for name in ("supernet.ckpt", "subnet.txt", "hardware_report.txt", "search_history.csv",
                 "subnet.ckpt", "eval_report.txt", "sweep.csv"):
        assert (out / name).exists(), name
    report = read_kv(out / "hardware_report.txt")
    for key in ("area_mm2", "energy_mJ", "delay_ms", "edap", "avg_underutilization_pct", "block_edap.R-III"):
        assert key in report
    ev = read_kv(out / "eval_report.txt")
    assert set(ev) == {"acc.ideal.clean", "acc.n64.clean", "acc.n64.pgd2"}


def test_pipeline_is_byte_deterministic(pipeline):
    _, _, (a, b) = pipeline
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_sweep_table(pipeline):
    _, _, (out, _) = pipeline
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "sigma_over_mu,clean_acc,pgd2_acc"
    sig = [float(r.split(",")[0]) for r in rows[1:]]
    assert sig == [0.1, 0.2, 0.3, 0.4, 0.5]


def test_zero_sigma_sweep_reproduces_clean_eval(pipeline, tmp_path):
    base, _, (out, _) = pipeline
    raw = dict(TINY, sweep={"sigmas": [0.0], "attack_steps": None})
    cfg = write(tmp_path, raw)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--checkpoint", str(out / "subnet.ckpt")]) == 0
    value = float((tmp_path / "s" / "sweep.csv").read_text().splitlines()[1].split(",")[1])
    assert value == float(read_kv(out / "eval_report.txt")["acc.ideal.clean"])


def test_seed_changes_search(pipeline, tmp_path):
    _, cfg, (out, _) = pipeline
    assert main(["search", "--config", str(cfg), "--out", str(tmp_path), "--seed", "11"]) == 0
    assert (tmp_path / "supernet.ckpt").read_bytes() != (out / "supernet.ckpt").read_bytes()
