import csv
import json
import os

import pytest
import yaml

from .backend_files.checkpoint import save_encoders
from .backend_files.errors import ConfigError
from .cli import build_parser, load_config_file, main, resolve_config

TINY_ENCODER = {"d_text": 16, "n_layers_text": 1, "n_heads_text": 2, "d_image": 16, "n_layers_image": 1,
                "n_heads_image": 2, "d_joint": 16, "patch_size": 8, "image_side": 24, "max_seq_len": 24}


def write_yaml(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh)
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


# ---------------- configuration ----------------

def test_precedence_defaults_file_flags(tmp_path):
    config = write_yaml(tmp_path / "run.yaml", {"lr": 0.5, "seed": 3, "patience": 9})
    args = build_parser().parse_args(["train", "--config", config, "--seed", "9"])
    cfg = resolve_config(args)
    assert cfg.seed == 9  # flag beats file
    assert cfg.lr == 0.5 and cfg.patience == 9  # file beats default
    assert cfg.batch == 64 and cfg.command == "train"

    train_cfg = cfg.train_config()
    assert train_cfg.lr == 0.5 and train_cfg.max_steps == 1500 and train_cfg.seed == 9


def test_pretrain_defaults():
    cfg = resolve_config(build_parser().parse_args(["pretrain", "--steps", "7"]))
    hparams = cfg.pretrain_config()
    assert hparams.steps == 7 and hparams.lr == 3e-4


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(write_yaml(tmp_path / "bad.yaml", {"learning_rate": 1.0}))
    with pytest.raises(ConfigError):
        load_config_file(write_yaml(tmp_path / "list.yaml", [1, 2]))
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.yaml"))


def test_invalid_settings():
    parser = build_parser()
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["eval", "--k", "0"]))
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["train", "--mask-policy", "some-nouns"])).train_config()


def test_subcommand_defaults_survive_parsing():
    cfg = resolve_config(build_parser().parse_args(["eval", "--out", "somewhere"]))
    assert cfg.split == "test" and cfg.baselines is False and cfg.keep_reference is False

    cfg = resolve_config(build_parser().parse_args(["analyze-noise"]))
    assert cfg.samples == 100_000 and cfg.dims == [256, 768] and cfg.histogram is False

    cfg = resolve_config(build_parser().parse_args(["eval", "--split", "dev"]))
    assert cfg.split == "dev"


def test_explicit_values_are_not_replaced_by_defaults(tmp_path):
    parser = build_parser()
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["train", "--lr", "0"]))
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["pretrain", "--steps", "-1"]))
    cfg = resolve_config(parser.parse_args(["train", "--steps", "0"]))
    assert cfg.train_config().max_steps == 0
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["pretrain", "--encoder-ckpt", str(tmp_path / "encoders.lncr")]))


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["ablate", "everything"])
    assert info.value.code == 2


# ---------------- commands ----------------

def test_analyze_noise_writes_tables(tmp_path):
    out = str(tmp_path / "out")
    code = main(["analyze-noise", "--out", out, "--samples", "200", "--dims", "8", "16", "--histogram", "--quiet"])
    assert code == 0

    rows = read_csv(os.path.join(out, "noise_norms.csv"))
    assert list(rows[0]) == ["kind", "d", "n_samples", "mean_norm", "std_norm"]
    assert len(rows) == 14
    assert {r["kind"] for r in rows} >= {"none", "gaussian", "scaled-gaussian"}
    none = next(r for r in rows if r["kind"] == "none")
    assert float(none["mean_norm"]) == 0.0

    histogram = read_csv(os.path.join(out, "noise_histogram.csv"))
    assert len(histogram) == 7 * 60
    assert sum(int(r["count"]) for r in histogram if r["kind"] == "gaussian") == 200


def test_config_echo_replays(tmp_path):
    out = str(tmp_path / "out")
    assert main(["analyze-noise", "--out", out, "--samples", "50", "--dims", "4", "--quiet"]) == 0
    echo = os.path.join(out, "config.json")
    with open(echo, encoding="utf-8") as fh:
        saved = json.load(fh)
    assert saved["samples"] == 50 and saved["dims"] == [4] and saved["command"] == "analyze-noise"

    replayed = resolve_config(build_parser().parse_args(["analyze-noise", "--config", echo]))
    assert replayed.samples == 50 and replayed.dims == [4] and replayed.out == out


def test_photo_prompt_is_reported(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--supervision", "photo-prompt", "--quiet"])
    assert code == 1
    assert error_line(capsys) == "ERROR [smp-trainer]: not implemented"


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    code = main(["eval", "--out", str(tmp_path), "--quiet"])
    assert code == 1
    assert error_line(capsys).startswith("ERROR [dual-encoder]: no projection checkpoint")


def test_bad_noise_is_reported(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--noise", "pink", "--quiet"])
    assert code == 1
    assert error_line(capsys).startswith("ERROR [smp-trainer]: unknown noise kind")


def test_bad_config_file_is_reported(tmp_path, capsys):
    config = write_yaml(tmp_path / "bad.yaml", {"colour": "red"})
    code = main(["train", "--out", str(tmp_path), "--config", config, "--quiet"])
    assert code == 1
    assert error_line(capsys).startswith("ERROR [cli]: unknown settings")


# ---------------- end to end ----------------

@pytest.mark.slow
def test_pretrain_train_eval_ablate(tmp_path):
    out = str(tmp_path / "run")
    config = write_yaml(tmp_path / "tiny.yaml", {"encoder": TINY_ENCODER, "batch": 16})
    common = ["--out", out, "--config", config, "--quiet"]

    assert main(["pretrain", "--steps", "20", *common]) == 0
    with open(os.path.join(out, "pretrain.json"), encoding="utf-8") as fh:
        pretrain = json.load(fh)
    assert 0.0 <= pretrain["heldout_r1"] <= 1.0
    assert os.path.exists(os.path.join(out, "encoders.lncr"))
    for name in ("dev.jsonl", "test.jsonl", "gallery.jsonl", "corpus.txt"):
        assert os.path.exists(os.path.join(out, "benchmark", name))

    assert main(["train", "--steps", "4", "--eval-every", "2", "--lr", "0.001", *common]) == 0
    with open(os.path.join(out, "train.json"), encoding="utf-8") as fh:
        trained = json.load(fh)
    assert trained["skipped_captions"] == 4 and trained["steps_run"] <= 4
    assert len(read_csv(os.path.join(out, "history.csv"))) == trained["steps_run"]

    assert main(["eval", "--baselines", "--k", "3", *common]) == 0
    with open(os.path.join(out, "metrics.json"), encoding="utf-8") as fh:
        metrics = json.load(fh)
    assert metrics["n_queries"] == 192
    assert "R@3" in metrics["metrics"] and "mAP@3" in metrics["metrics"]
    assert metrics["baselines"]["oracle"]["R@1"] == 1.0
    assert metrics["modality_gap"]["encoder"] >= 0.0
    results = read_csv(os.path.join(out, "results.csv"))
    assert len(results) == 192 * 50

    assert main(["ablate", "prompts", *common]) == 0
    rows = read_csv(os.path.join(out, "ablate_prompts.csv"))
    assert len(rows) == 63 and rows[0]["config"] == "a photo of [$] that [cond]"


def test_missing_corpus_is_reported(tiny_encoders, tmp_path, capsys):
    encoders = str(tmp_path / "encoders.lncr")
    save_encoders(encoders, tiny_encoders)
    missing = str(tmp_path / "nope.txt")
    code = main(["train", "--out", str(tmp_path / "out"), "--encoder-ckpt", encoders, "--corpus", missing,
                 "--quiet"])
    assert code == 1
    assert error_line(capsys) == f"ERROR [synth-bench]: cannot read {missing}: No such file or directory"
