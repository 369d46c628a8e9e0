"""
Command-line surface: pretrain, train, eval, ablate and analyze-noise.

Settings resolve as dataclass defaults < YAML file (--config) < explicit flags,
and every command writes the resolved settings to <out>/config.json so a run
can be replayed with --config <out>/config.json.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import yaml

from .backend_files.encoders import EncoderConfig, PretrainConfig
from .backend_files.errors import ConfigError, LincirError
from .backend_files.projection import NoiseSpec
from .backend_files.retrieval import DEFAULT_TEMPLATE, PromptTemplate
from .backend_files.smp_trainer import SupervisionMode, TrainConfig
from .backend_files.tensor import set_debug
from .backend_files.text_pipeline import MaskPolicy
from .lincir_app import LinCIR
from .utils.log import setup_logging
from .utils.paths import DEFAULT_OUTPUT_DIR

logger = logging.getLogger(__name__)

COMMANDS = ("pretrain", "train", "eval", "ablate", "analyze-noise")
ABLATION_TABLES = ("masking", "noise", "supervision", "prompts")
EXIT_OK, EXIT_FAILED = 0, 1


@dataclass
class RunConfig:
    command: str = "train"
    table: Optional[str] = None
    corpus: Optional[str] = None
    encoder_ckpt: Optional[str] = None
    phi_ckpt: Optional[str] = None
    benchmark: Optional[str] = None
    out: str = DEFAULT_OUTPUT_DIR
    seed: int = 0
    steps: Optional[int] = None  # pre-training steps for 'pretrain', SMP steps otherwise
    batch: int = 64
    lr: Optional[float] = None  # 3e-4 for 'pretrain', 1e-4 otherwise
    wd: float = 0.01
    dropout: float = 0.5
    mask_policy: str = "all-keywords"
    noise: str = "scaled-gaussian"
    supervision: str = SupervisionMode.TEXT_ANCHORED.value
    eval_every: int = 100
    patience: int = 5
    template: str = DEFAULT_TEMPLATE
    k: Optional[int] = None
    split: str = "test"
    baselines: bool = False
    keep_reference: bool = False
    histogram: bool = False
    samples: int = 100_000
    dims: List[int] = field(default_factory=lambda: [256, 768])
    encoder: Dict = field(default_factory=dict)  # EncoderConfig overrides, config-file only

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}'")
        if self.command == "ablate" and self.table not in ABLATION_TABLES:
            raise ConfigError(f"ablate needs one of {', '.join(ABLATION_TABLES)}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"--k must be >= 1, got {self.k}")
        if self.split not in ("dev", "test"):
            raise ConfigError(f"--split must be 'dev' or 'test', got '{self.split}'")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"--lr must be positive, got {self.lr}")
        if self.steps is not None and self.steps < 0:
            raise ConfigError(f"--steps must be >= 0, got {self.steps}")
        if self.command == "pretrain" and self.encoder_ckpt:
            raise ConfigError("pretrain writes <out>/encoders.lncr; --encoder-ckpt is for the later commands")
        unknown = set(self.encoder) - {f.name for f in fields(EncoderConfig)}
        if unknown:
            raise ConfigError(f"unknown encoder settings: {sorted(unknown)}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.encoder)

    def pretrain_config(self) -> PretrainConfig:
        defaults = PretrainConfig()
        return PretrainConfig(steps=self.steps if self.steps is not None else defaults.steps,
                              batch_size=self.batch, lr=self.lr if self.lr is not None else defaults.lr,
                              weight_decay=self.wd, seed=self.seed)

    def train_config(self) -> TrainConfig:
        defaults = TrainConfig()
        try:
            cfg = TrainConfig(
                lr=self.lr if self.lr is not None else defaults.lr, weight_decay=self.wd,
                batch_size=self.batch, dropout=self.dropout,
                max_steps=self.steps if self.steps is not None else defaults.max_steps,
                eval_every=self.eval_every, patience=self.patience,
                mask_policy=MaskPolicy.parse(self.mask_policy),
                noise=NoiseSpec.parse(self.noise, seed=self.seed), seed=self.seed,
                supervision=SupervisionMode(self.supervision))
        except LincirError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg


# ==============================================
# Argument parsing
# ==============================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML (or JSON) file with settings; flags override it")
    common.add_argument("--corpus", help="UTF-8 caption file, one caption per line")
    common.add_argument("--encoder-ckpt", dest="encoder_ckpt", help="dual-encoder checkpoint (.lncr)")
    common.add_argument("--phi-ckpt", dest="phi_ckpt", help="projection checkpoint (.lncr)")
    common.add_argument("--benchmark", help="directory with dev.jsonl, test.jsonl, gallery.jsonl [, corpus.txt]")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--wd", type=float)
    common.add_argument("--dropout", type=float)
    common.add_argument("--mask-policy", dest="mask_policy")
    common.add_argument("--noise")
    common.add_argument("--supervision", choices=[m.value for m in SupervisionMode])
    common.add_argument("--eval-every", dest="eval_every", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--template", help="inference prompt with one [$] and one [cond]")
    common.add_argument("--k", type=int, help="extra R@K / mAP@K cut-off")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="lincir", description="Language-only training for zero-shot CIR")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="contrastively pre-train the dual encoder")
    sub.add_parser("train", parents=[common], help="train the projection module with SMP")
    evaluate = sub.add_parser("eval", parents=[common], help="composed-retrieval metrics")
    evaluate.add_argument("--split", choices=("dev", "test"), default=argparse.SUPPRESS)
    evaluate.add_argument("--baselines", action="store_true", default=argparse.SUPPRESS)
    evaluate.add_argument("--keep-reference", dest="keep_reference", action="store_true",
                          default=argparse.SUPPRESS, help="do not drop the reference image from the ranking")
    ablate = sub.add_parser("ablate", parents=[common], help="ablation tables")
    ablate.add_argument("table", choices=ABLATION_TABLES)
    noise = sub.add_parser("analyze-noise", parents=[common], help="noise norm statistics")
    noise.add_argument("--histogram", action="store_true", default=argparse.SUPPRESS)
    noise.add_argument("--samples", type=int, default=argparse.SUPPRESS)
    noise.add_argument("--dims", type=int, nargs="+", default=argparse.SUPPRESS)
    return parser


def load_config_file(path: str) -> Dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown settings in {path}: {unknown}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < explicit flags"""
    values = asdict(RunConfig())
    flags = vars(args)
    if flags.get("config"):
        values.update(load_config_file(flags["config"]))
    values.update({k: v for k, v in flags.items() if k in values})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def write_config_echo(cfg: RunConfig) -> str:
    path = os.path.join(cfg.out, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_json(path: str, payload: Dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, rows: Sequence[Dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# ==============================================
# Commands
# ==============================================

def cmd_pretrain(cfg: RunConfig, app: LinCIR):
    ok, msg, payload = app.pretrain(cfg.pretrain_config())
    if ok:
        _write_json(os.path.join(cfg.out, "pretrain.json"), payload)
    return ok, msg


def cmd_train(cfg: RunConfig, app: LinCIR):
    ok, msg, payload = app.train(cfg.train_config(), cfg.corpus)
    if ok:
        _write_json(os.path.join(cfg.out, "train.json"), payload)
    return ok, msg


def cmd_eval(cfg: RunConfig, app: LinCIR):
    try:
        template = PromptTemplate(cfg.template)
    except LincirError as e:
        return False, e.describe()
    ok, msg, payload = app.evaluate(cfg.phi_ckpt, cfg.split, template, cfg.k, cfg.baselines,
                                    exclude_reference=not cfg.keep_reference)
    if ok:
        payload["config"] = asdict(cfg)
        _write_json(os.path.join(cfg.out, "metrics.json"), payload)
    return ok, msg


def cmd_ablate(cfg: RunConfig, app: LinCIR):
    ok, msg, payload = app.ablate(cfg.table, cfg.train_config(), cfg.corpus, cfg.phi_ckpt)
    if ok:
        rows = payload["rows"]
        columns = list(dict.fromkeys(k for row in rows for k in row))
        _write_csv(os.path.join(cfg.out, f"ablate_{cfg.table}.csv"), rows, columns)
    return ok, msg


def cmd_analyze_noise(cfg: RunConfig, app: LinCIR):
    ok, msg, payload = app.analyze_noise(cfg.dims, cfg.samples, cfg.histogram)
    if ok:
        _write_csv(os.path.join(cfg.out, "noise_norms.csv"), payload["rows"],
                   ("kind", "d", "n_samples", "mean_norm", "std_norm"))
        if payload["histogram"] is not None:
            _write_csv(os.path.join(cfg.out, "noise_histogram.csv"), payload["histogram"],
                       ("kind", "bin_left", "bin_right", "count"))
    return ok, msg


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze-noise": cmd_analyze_noise,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if getattr(args, "verbose", False) else (
        logging.WARNING if getattr(args, "quiet", False) else logging.INFO)

    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        setup_logging(level, cfg.out)
        write_config_echo(cfg)
        if os.environ.get("LINCIR_DEBUG", "") not in ("", "0"):
            set_debug(True)
        app = LinCIR(cfg.out, cfg.seed, cfg.encoder_config(), cfg.benchmark)
        if cfg.encoder_ckpt:
            app.get_encoders(cfg.encoder_ckpt)
        ok, msg = HANDLERS[cfg.command](cfg, app)
    except LincirError as e:
        ok, msg = False, e.describe()
    except NotImplementedError as e:
        ok, msg = False, f"smp-trainer: {e}"
    except OSError as e:
        ok, msg = False, f"cli: {e}"

    if not ok:
        module, _, text = msg.partition(": ")
        print(f"ERROR [{module}]: {text}", file=sys.stderr)
        return EXIT_FAILED
    logger.info(msg)
    return EXIT_OK
