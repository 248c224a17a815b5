import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from cpcfl.cli import ENV_OUTPUT_ROOT, main
from cpcfl.config import config_from_dict, load_config
from cpcfl.datagen import load_dataset
from cpcfl.nn import build_model, load_checkpoint

TINY = {
    "seed": 3,
    "data": {"dim": 12, "per_class": 400, "unlabeled": 300, "latent_dim": 4, "modes_per_class": 2, "proxy_per_class": 20},
    "partition": {"num_clients": 6},
    "model": {"encoder_widths": [16], "rep_dim": 8},
    "pretrain": {"epochs": 2, "probe_epochs": 3},
    "federation": {"rounds": 12, "explore_rounds": 2, "eval_every": 4},
    "experiment": {"trials": 2, "methods": ["fedavg(none)", "ifca(none)", "cpcfl(simclr)"]},
}


def write_config(tmp_path, **changes):
    cfg = json.loads(json.dumps(TINY))
    for dotted, value in changes.items():
        section, _, key = dotted.partition("__")
        if key:
            cfg.setdefault(section, {})[key] = value
        else:
            cfg[section] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- usage errors


def test_missing_config_is_usage_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_key_is_usage_error(tmp_path):
    cfg = write_config(tmp_path, federation__roundz=3)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_invalid_values_are_usage_errors(tmp_path):
    assert main(["generate", "--config", write_config(tmp_path, federation__explore_rounds=50), "--out", str(tmp_path / "o")]) == 2
    assert main(["federate", "--config", write_config(tmp_path), "--method", "fedprox(none)", "--out", str(tmp_path / "o")]) == 2


def test_bad_subcommand_and_help(capsys):
    assert main(["bogus"]) == 2
    assert main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def test_yaml_defaults_round_trip(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.data.dim == 12 and cfg.partition.major_count == 20 and cfg.federation.local_epochs == 3
    assert config_from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- generate


def test_generate_default_partition(tmp_path, capsys):
    cfg = write_config(tmp_path, partition={}, data={"dim": 8, "per_class": 2000, "unlabeled": 50})
    out = tmp_path / "g"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    trains = sorted((out / "clients").glob("*_train.bin"))
    assert len(trains) == 60
    assert all(len(load_dataset(p)) == 50 for p in trains)
    table = capsys.readouterr().out
    assert len(table.strip().splitlines()) == 61
    with open(out / "partition.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60 and {r["train_size"] for r in rows} == {"50"}


def test_generate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert main(["generate", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "c"), "--quiet"]) == 0
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_environment_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path / "root"))
    assert main(["generate", "--config", write_config(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "root" / "generate" / "labeled.bin").is_file()


# ---------------------------------------------------------------- pretrain


def test_pretrain_zero_epochs_checkpoints_initialization(tmp_path):
    cfg_path = write_config(tmp_path, pretrain__epochs=0)
    out = tmp_path / "p"
    assert main(["pretrain", "--config", cfg_path, "--out", str(out), "--quiet"]) == 0
    enc = load_checkpoint(out / "encoder.ckpt")
    init = build_model(load_config(cfg_path).arch(3)).subset(["encoder"])
    for a, b in zip(enc.state().values(), init.state().values()):
        assert a.tobytes() == b.tobytes()
    assert (out / "losses.csv").read_text() == "epoch,mean_loss\n"


def test_pretrain_variants_and_loss_rows(tmp_path):
    cfg = write_config(tmp_path, pretrain__epochs=3, pretrain__variants=[{"lr": 0.001}, {"lr": 0.003}])
    out = tmp_path / "p"
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and [r["selected"] for r in rows].count("True") == 1
    assert len((out / "losses.csv").read_text().splitlines()) == 1 + 3


def test_pretrain_reads_generated_data_without_mutating_it(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "g"), "--quiet"]) == 0
    before = digest(tmp_path / "g")
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "g"), "--out", str(tmp_path / "p"), "--quiet"]) == 0
    assert digest(tmp_path / "g") == before
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "q")]) == 2


# ---------------------------------------------------------------- federate


def test_federate_outputs_and_comm_cost(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--method", "fedavg(none)", "--out", str(out), "--quiet"]) == 0
    cost = json.loads((out / "comm_cost.json").read_text())
    assert cost["units"] == 2 * 12
    history = (out / "history.jsonl").read_text().splitlines()
    assert len(history) == 12
    assert (out / "model_0.ckpt").is_file() and not (out / "model_1.ckpt").exists()
    trace = (out / "cluster_trace.csv").read_text().splitlines()
    assert len(trace) == 2 + 12


def test_cpcfl_cost_at_full_budget(tmp_path):
    cfg = write_config(tmp_path, federation={"rounds": 100, "explore_rounds": 10, "eval_every": 0, "local_epochs": 0})
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["comm_cost"]["units"] == 400 and summary["rounds"] == 100


def test_federate_with_encoder_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "p"), "--quiet"]) == 0
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--encoder", str(tmp_path / "p" / "encoder.ckpt"), "--out", str(out), "--quiet"]) == 0
    enc = load_checkpoint(tmp_path / "p" / "encoder.ckpt")
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert history[0]["phase"] == "explore"
    # wrong-width encoder: configuration error
    other = write_config(tmp_path, model={"encoder_widths": [16], "rep_dim": 6})
    assert main(["federate", "--config", other, "--encoder", str(tmp_path / "p" / "encoder.ckpt"), "--out", str(tmp_path / "x")]) == 2
    assert enc.has("encoder")


def test_federate_periodic_checkpoints(tmp_path):
    cfg = write_config(tmp_path, federation__checkpoint_every=6)
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--method", "ifca(none)", "--out", str(out), "--quiet"]) == 0
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names[0] == "round_0005_model_0.ckpt" and len(names) == 6


def test_clustering_failure_exit_code(tmp_path, capsys):
    # one participant per round means exactly one nonempty cluster every round
    cfg = write_config(tmp_path, federation={"rounds": 6, "explore_rounds": 1, "participation": 0.1, "failure_window": 1, "max_restarts": 0})
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--method", "ifca(none)", "--out", str(out), "--quiet"]) == 1
    assert "clustering failure" in capsys.readouterr().err
    summary = json.loads((out / "summary.json").read_text())
    assert summary["failure"] is True and summary["rounds"] == 1


# ---------------------------------------------------------------- experiment / report


def test_experiment_table_and_determinism(tmp_path, capsys):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "--config", cfg, "--out", str(a), "--quiet"]) == 0
    assert main(["experiment", "--config", cfg, "--out", str(b), "--jobs", "2", "--quiet"]) == 0
    assert digest(a) == digest(b)
    table = (a / "table.txt").read_text()
    for m in TINY["experiment"]["methods"]:
        assert m in table
    assert main(["report", str(a)]) == 0
    assert capsys.readouterr().out == table


def test_single_trial_sd_not_applicable(tmp_path):
    cfg = write_config(tmp_path, experiment={"trials": 1, "methods": ["fedavg(none)"]})
    out = tmp_path / "e"
    assert main(["experiment", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    assert "± n/a" in (out / "table.txt").read_text()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rows"][0]["sd"] is None


def test_trials_flag_and_default_rows(tmp_path):
    cfg = write_config(tmp_path, experiment={"trials": 5}, federation={"rounds": 3, "explore_rounds": 1, "eval_every": 0})
    out = tmp_path / "e"
    assert main(["experiment", "--config", cfg, "--trials", "1", "--out", str(out), "--quiet"]) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["fedavg(none)", "fedavg(simclr)", "ifca(none)", "ifca(fedavg)", "cpcfl(simclr)"]
    assert {r["trial"] for r in rows} == {"0"}


def test_sweep_grid(tmp_path):
    cfg = write_config(
        tmp_path,
        experiment={"trials": 1, "methods": ["ifca(none)"], "sweep": {"federation.num_clusters": [1, 2]}},
        federation={"rounds": 3, "explore_rounds": 1, "eval_every": 0},
    )
    out = tmp_path / "e"
    assert main(["experiment", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    with open(out / "results.csv") as fh:
        settings = [r["setting"] for r in csv.DictReader(fh)]
    assert settings == ["federation.num_clusters=1", "federation.num_clusters=2"]


def test_report_errors(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_report_on_federate_run(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "f"
    assert main(["federate", "--config", cfg, "--method", "ifca(none)", "--out", str(out), "--quiet"]) == 0
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "ifca(none)" in text and "comm cost   48 units" in text
    assert np.isfinite(json.loads((out / "summary.json").read_text())["scores"]["accuracy"])
