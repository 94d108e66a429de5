import csv
import json

import pytest

from promptmil.cli import main
from promptmil.config import (ConfigError, RunConfig, build_experiment_config,
                              config_with, parse_experiment_config)
from promptmil.prompts import load_pack


# ---------------------------------------------------------------------------
# config parsing


def test_parse_flat_config(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "# experiment settings\n"
        "manifest = data/manifest.json\n"
        "embedding_bundle = data/embeddings/index.json\n"
        "out_dir = out\n"
        "seed = 11\n"
        "shots = 8\n"
        "lambda = 0.4   # fusion weight\n"
        "r = 0.5\n"
        "scales = low,high\n"
        "no_graph = true\n")
    cfg = parse_experiment_config(cfg_file)
    assert cfg.run.seed == 11
    assert cfg.run.fusion_lambda == 0.4
    assert cfg.run.selection_ratio == 0.5
    assert cfg.run.no_graph is True


def test_unknown_key_rejected(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("manifest = m\nembedding_bundle = b\nmystery = 1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_experiment_config(cfg_file)


def test_lambda_out_of_range_rejected(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("manifest = m\nembedding_bundle = b\nlambda = 1.5\n")
    with pytest.raises(ConfigError, match="lambda"):
        parse_experiment_config(cfg_file)


def test_requires_exactly_one_embedding_source():
    with pytest.raises(ConfigError, match="exactly one"):
        build_experiment_config({"manifest": "m"})
    with pytest.raises(ConfigError, match="exactly one"):
        build_experiment_config({"manifest": "m", "prompt_pack": "p",
                                 "embedding_bundle": "b"})


def test_run_config_invariants():
    with pytest.raises(ConfigError):
        RunConfig(entity_only=True, slide_only=True)
    with pytest.raises(ConfigError):
        RunConfig(scales=())
    with pytest.raises(ConfigError):
        RunConfig(scales=("medium",))
    with pytest.raises(ConfigError):
        RunConfig(selection_ratio=0.0)
    with pytest.raises(ConfigError):
        RunConfig(shots=0)


def test_effective_flags():
    assert RunConfig(entity_only=True).effective_lambda == 0.0
    assert RunConfig(slide_only=True).effective_lambda == 1.0
    assert RunConfig(no_selection=True, selection_ratio=0.3).effective_ratio == 1.0
    assert config_with(RunConfig(), seed=9).seed == 9


def test_bad_bool_rejected(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("manifest = m\nembedding_bundle = b\nno_graph = maybe\n")
    with pytest.raises(ConfigError, match="boolean"):
        parse_experiment_config(cfg_file)


# ---------------------------------------------------------------------------
# CLI


def test_gen_prompts_fixture(tmp_path, capsys):
    out = tmp_path / "pack.json"
    code = main(["gen-prompts", "--classes", "LUAD,LUSC", "--entities", "3",
                 "--backend", "fixture", "--out", str(out)])
    assert code == 0
    pack = load_pack(out)
    assert len(pack.scales["low"].entities) == 3


def test_gen_prompts_missing_classes_is_usage_error(capsys):
    assert main(["gen-prompts"]) == 2


def test_gen_prompts_single_class_is_error(tmp_path):
    assert main(["gen-prompts", "--classes", "LUAD",
                 "--out", str(tmp_path / "p.json")]) == 1


def test_gen_prompts_http_without_credentials(tmp_path, monkeypatch):
    monkeypatch.delenv("PROMPTMIL_API_KEY", raising=False)
    code = main(["gen-prompts", "--classes", "A,B", "--backend", "http",
                 "--base-url", "http://llm.test", "--model", "m",
                 "--out", str(tmp_path / "p.json")])
    assert code == 1


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    code = main(["gen-synthetic", "--out", str(root), "--classes", "2",
                 "--entities", "3", "--instances", "10", "--bags-per-class", "10",
                 "--separation", "5.0", "--dim", "24", "--seed", "4"])
    assert code == 0
    return root


def _write_config(path, root, **overrides):
    values = {
        "manifest": str(root / "manifest.json"),
        "embedding_bundle": str(root / "embeddings" / "index.json"),
        "out_dir": str(path.parent / "out"),
        "seed": "5",
        "shots": "3",
        "repeats": "1",
        "n_entities": "3",
        "n_neighbors": "3",
        "max_epochs": "4",
        "patience": "4",
    }
    values.update(overrides)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def test_cmd_train_writes_artifacts(tmp_path, tiny_dataset, capsys):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "report.csv").exists()
    assert (out / "report.json").exists()
    assert (out / "repeat_00" / "history.csv").exists()
    assert (out / "repeat_00" / "checkpoint" / "index.json").exists()
    assert "auc" in capsys.readouterr().out


def test_cmd_train_rerun_identical_history(tmp_path, tiny_dataset):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    hist1 = (tmp_path / "out" / "repeat_00" / "history.csv").read_bytes()
    assert main(["train", "--config", str(cfg)]) == 0
    hist2 = (tmp_path / "out" / "repeat_00" / "history.csv").read_bytes()
    assert hist1 == hist2


def test_cmd_train_invalid_lambda_in_config(tmp_path, tiny_dataset, capsys):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset, **{"lambda": "2.0"})
    assert main(["train", "--config", str(cfg)]) == 1
    assert "lambda" in capsys.readouterr().err


def test_cmd_eval_runs_on_checkpoint(tmp_path, tiny_dataset, capsys):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out" / "repeat_00" / "checkpoint"
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    assert "acc" in capsys.readouterr().out


def test_cmd_eval_dumps_traces(tmp_path, tiny_dataset):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out" / "repeat_00" / "checkpoint"
    traces = tmp_path / "traces"
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--dump-traces", str(traces)]) == 0
    with open(traces / "selection.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["slide_id", "scale", "index", "score", "kept"]
    with open(traces / "attention.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["slide_id", "scale", "entity", "instance_index", "weight"]
    assert list(traces.glob("graph_*.json"))


def test_cmd_sweep_rows_and_endpoint_consistency(tmp_path, tiny_dataset):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["sweep", "--config", str(cfg), "--key", "lambda",
                 "--values", "0.0,0.5,1.0"]) == 0
    out = tmp_path / "out"
    with open(out / "sweep_lambda.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "lambda"
    assert len(rows) == 4

    # the lambda=0 sweep row must match a dedicated entity_only run exactly
    cfg2 = tmp_path / "exp2.cfg"
    _write_config(cfg2, tiny_dataset,
                  out_dir=str(tmp_path / "out_entity"), entity_only="true")
    assert main(["train", "--config", str(cfg2)]) == 0
    sweep_report = json.loads(
        (out / "lambda_0.0" / "report.json").read_text())
    dedicated = json.loads(
        (tmp_path / "out_entity" / "report.json").read_text())
    assert sweep_report["mean"] == dedicated["mean"]


def test_cmd_sweep_unknown_key_is_usage_error(tmp_path, tiny_dataset):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset)
    assert main(["sweep", "--config", str(cfg), "--key", "banana",
                 "--values", "1,2"]) == 2


def test_cmd_sweep_parallel_matches_sequential(tmp_path, tiny_dataset):
    cfg = tmp_path / "exp.cfg"
    _write_config(cfg, tiny_dataset, out_dir=str(tmp_path / "seq"))
    assert main(["sweep", "--config", str(cfg), "--key", "shots",
                 "--values", "2,3"]) == 0
    cfg2 = tmp_path / "exp_par.cfg"
    _write_config(cfg2, tiny_dataset, out_dir=str(tmp_path / "par"))
    assert main(["sweep", "--config", str(cfg2), "--key", "shots",
                 "--values", "2,3", "--parallel", "2"]) == 0
    seq = (tmp_path / "seq" / "sweep_shots.csv").read_text().splitlines()
    par = (tmp_path / "par" / "sweep_shots.csv").read_text().splitlines()
    assert seq == par


def test_gen_synthetic_rerun_byte_identical(tmp_path):
    args = ["--classes", "2", "--entities", "2", "--instances", "6",
            "--bags-per-class", "3", "--separation", "1.0", "--dim", "8",
            "--seed", "3"]
    assert main(["gen-synthetic", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["gen-synthetic", "--out", str(tmp_path / "b")] + args) == 0
    files_a = sorted((tmp_path / "a").rglob("*.mapf"))
    files_b = sorted((tmp_path / "b").rglob("*.mapf"))
    assert [f.read_bytes() for f in files_a] == [f.read_bytes() for f in files_b]
