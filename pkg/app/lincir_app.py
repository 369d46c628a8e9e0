"""
LinCIR Application Integration Class
Controller that delegates to the encoder, SMP-trainer, retrieval and benchmark layers.

Every public method returns (success, message, payload). Engine errors are
caught here, logged, and reported as "<module>: <message>".
"""
from __future__ import annotations

import functools
import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .backend_files import synth_bench as bench_lib
from .backend_files.checkpoint import (file_digest, load_encoders, load_projection, parameter_digest,
                                       save_encoders, save_projection)
from .backend_files.encoders import (DualEncoder, EncoderConfig, PretrainConfig, encode_captions,
                                     encode_images, image_to_caption_recall, pretrain_contrastive)
from .backend_files.errors import CorruptCheckpointError, EmptyInputError, LincirError
from .backend_files.projection import NoiseKind, NoiseSpec, ProjectionModule, noise_norms
from .backend_files.retrieval import (GalleryIndex, PromptTemplate, build_index, load_templates, make_validator,
                                      metric_report, modality_gap, projected_gap, query_latents, retrieve,
                                      truth_map, write_results)
from .backend_files.smp_trainer import (CorpusEntry, PreparedCorpus, SupervisionMode, TrainConfig, TrainResult,
                                        noise_ablation_configs, prepare_corpus, train, write_history)
from .backend_files.text_pipeline import MaskPolicy
from .utils.log import progress_disabled

logger = logging.getLogger(__name__)

Result = Tuple[bool, str, Optional[Dict]]

ENCODERS_FILE = "encoders.lncr"
PHI_FILE = "phi.lncr"
GALLERY_FILE = "gallery.lncr"
SUMMARY_METRICS = ("R@1", "R@5", "R@10", "mAP@5", "mAP@10")
MASKING_ROWS = ("non-keywords", "random-token", "all-nouns", "1-keywords", "3-keywords", "5-keywords",
                "all-keywords")


def _reports_errors(method):
    """Turn engine errors into (False, "<module>: <message>", None)"""

    @functools.wraps(method)
    def wrapper(self, *args, **kwargs) -> Result:
        try:
            return method(self, *args, **kwargs)
        except LincirError as e:
            logger.error(e.describe())
            return (False, e.describe(), None)

    return wrapper


class LinCIR:
    def __init__(self, out_dir: str, seed: int = 0, encoder_cfg: Optional[EncoderConfig] = None,
                 benchmark_dir: Optional[str] = None):
        self.out_dir = out_dir
        self.seed = seed
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.benchmark_dir = benchmark_dir
        self._benchmark: Optional[bench_lib.Benchmark] = None
        self._encoders: Optional[DualEncoder] = None
        self._index: Optional[GalleryIndex] = None
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    # ========================================
    # WORLD & ARTIFACTS
    # ========================================

    @property
    def side(self) -> int:
        return self.encoder_cfg.image_side

    def get_benchmark(self) -> bench_lib.Benchmark:
        """Benchmark from --benchmark, or the synthetic one for this seed (written to <out>/benchmark)"""
        if self._benchmark is not None:
            return self._benchmark
        if self.benchmark_dir:
            self._benchmark = self._read_benchmark(self.benchmark_dir)
        else:
            self._benchmark = bench_lib.build_cir_benchmark(self.seed)
            self._write_benchmark(self._benchmark, self.path("benchmark"))
        return self._benchmark

    @staticmethod
    def _read_benchmark(directory: str) -> bench_lib.Benchmark:
        def part(name: str) -> str:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise EmptyInputError(f"benchmark file missing: {path}", module="synth-bench")
            return path

        gallery = bench_lib.read_gallery(part("gallery.jsonl"))
        for position, (item_id, _) in enumerate(gallery):
            if item_id != bench_lib.scene_id(position):
                raise EmptyInputError(f"gallery item {position} has id '{item_id}'", module="synth-bench")
        corpus_path = os.path.join(directory, "corpus.txt")
        corpus = bench_lib.read_corpus(corpus_path) if os.path.exists(corpus_path) else []
        return bench_lib.Benchmark(corpus, bench_lib.read_records(part("dev.jsonl")),
                                   bench_lib.read_records(part("test.jsonl")), [],
                                   tuple(scene for _, scene in gallery))

    @staticmethod
    def _write_benchmark(bench: bench_lib.Benchmark, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        bench_lib.write_records(os.path.join(directory, "dev.jsonl"), bench.dev)
        bench_lib.write_records(os.path.join(directory, "test.jsonl"), bench.test)
        bench_lib.write_gallery(os.path.join(directory, "gallery.jsonl"), bench.gallery)
        bench_lib.write_corpus(os.path.join(directory, "corpus.txt"), bench.corpus)

    def get_encoders(self, checkpoint: Optional[str] = None) -> DualEncoder:
        if self._encoders is None:
            path = checkpoint or self.path(ENCODERS_FILE)
            if not os.path.exists(path):
                raise CorruptCheckpointError(f"no encoder checkpoint at {path} (run 'pretrain' first)")
            self._encoders = load_encoders(path)
            self.encoder_cfg = self._encoders.cfg
        return self._encoders

    def get_index(self) -> GalleryIndex:
        """Gallery index, reused from <out>/gallery.lncr when it was built by the same encoders"""
        if self._index is not None:
            return self._index
        encoders = self.get_encoders()
        bench = self.get_benchmark()
        key = f"{parameter_digest(encoders)}:{self.side}:{len(bench.gallery)}"
        path = self.path(GALLERY_FILE)
        if os.path.exists(path):
            try:
                index, stored = GalleryIndex.load(path)
                if stored == key:
                    logger.info(f"Reusing gallery index {path}")
                    self._index = index
                    return index
            except CorruptCheckpointError as e:
                logger.warning(f"Ignoring unreadable gallery index: {e}")
        self._index = build_index(encoders, bench.gallery_ids, bench.gallery_images(self.side))
        self._index.save(path, key)
        return self._index

    def corpus(self, policy: MaskPolicy, corpus_path: Optional[str] = None) -> PreparedCorpus:
        if corpus_path:
            entries = [CorpusEntry(line) for line in bench_lib.read_corpus(corpus_path)]
        else:
            entries = bench_lib.corpus_entries(self.get_benchmark(), self.side)
        if not entries:
            raise EmptyInputError("the caption corpus is empty", module="smp-trainer")
        return prepare_corpus(entries, self.get_encoders(), policy)

    # ========================================
    # PRE-TRAINING
    # ========================================

    @_reports_errors
    def pretrain(self, hparams: PretrainConfig, held_out: float = 0.1) -> Result:
        """Contrastively pre-train the dual encoder on synthetic pairs and freeze it"""
        bench = self.get_benchmark()
        pairs = bench_lib.pretrain_pairs(self.side)
        train_pairs, test_pairs = bench_lib.split_pretrain_pairs(pairs, held_out, seed=hparams.seed)
        templates = [t.text for t in load_templates()]
        vocab = bench_lib.benchmark_vocabulary(bench, templates)

        result = pretrain_contrastive(train_pairs, replace(self.encoder_cfg), vocab, hparams)
        recall = image_to_caption_recall(result.encoders, test_pairs)
        path = self.path(ENCODERS_FILE)
        save_encoders(path, result.encoders)
        self._encoders, self._index = result.encoders, None
        self.encoder_cfg = result.encoders.cfg

        logger.info(f"Held-out image->caption R@1: {recall:.4f}")
        payload = {
            "checkpoint": path,
            "heldout_pairs": len(test_pairs),
            "heldout_r1": recall,
            "final_loss": result.losses[-1] if result.losses else None,
            "sha256": file_digest(path),
        }
        return (True, f"Encoder checkpoint written to {path}", payload)

    # ========================================
    # SMP TRAINING
    # ========================================

    def _train_phi(self, cfg: TrainConfig, corpus: PreparedCorpus, label: Optional[str] = None) -> TrainResult:
        validate = make_validator(self.get_benchmark().dev, self.get_index(), self.get_encoders())
        return train(corpus, self.get_encoders(), cfg, validate, label=label)

    @_reports_errors
    def train(self, cfg: TrainConfig, corpus_path: Optional[str] = None) -> Result:
        """Train phi with SMP, early-stopped on dev R@1; writes phi.lncr and history.csv"""
        if cfg.supervision is SupervisionMode.PHOTO_PROMPT:
            raise NotImplementedError("not implemented")
        encoders = self.get_encoders()
        before = parameter_digest(encoders)
        corpus = self.corpus(cfg.mask_policy, corpus_path)
        result = self._train_phi(cfg, corpus)
        if parameter_digest(encoders) != before:
            raise LincirError("encoder parameters changed during SMP training", module="smp-trainer")

        path = self.path(PHI_FILE)
        save_projection(path, result.phi)
        write_history(self.path("history.csv"), result.history)
        payload = {
            "checkpoint": path,
            "label": result.label,
            "used_captions": result.used,
            "skipped_captions": result.skipped,
            "initial_score": result.initial_score,
            "best_score": result.best_score,
            "best_step": result.best_step,
            "steps_run": len(result.history),
            "encoder_sha256": before,
        }
        return (True, f"Projection checkpoint written to {path}", payload)

    # ========================================
    # EVALUATION
    # ========================================

    def get_phi(self, checkpoint: Optional[str] = None) -> ProjectionModule:
        path = checkpoint or self.path(PHI_FILE)
        if not os.path.exists(path):
            raise CorruptCheckpointError(f"no projection checkpoint at {path} (run 'train' first)")
        return load_projection(path)

    def _gap_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """(z_i, z_c) over the gallery scenes and their first-template captions"""
        bench = self.get_benchmark()
        encoders = self.get_encoders()
        captions = [bench_lib.caption(scene) for scene in bench.gallery]
        return self.get_index().raw, encode_captions(encoders, captions)

    def _score(self, phi: ProjectionModule, split: str, template: PromptTemplate = PromptTemplate(),
               exclude_reference: bool = True, extra_k: Optional[int] = None) -> Dict[str, float]:
        records = self.get_benchmark().split(split)
        index = self.get_index()
        queries = query_latents("composed", records, index, self.get_encoders(), phi, template)
        return metric_report(retrieve(records, queries, index, exclude_reference), truth_map(records), extra_k)

    @_reports_errors
    def evaluate(self, phi_checkpoint: Optional[str] = None, split: str = "test",
                 template: PromptTemplate = PromptTemplate(), extra_k: Optional[int] = None,
                 baselines: bool = False, exclude_reference: bool = True) -> Result:
        """Composed retrieval metrics, both modality-gap readings and optional baselines"""
        phi = self.get_phi(phi_checkpoint)
        encoders = self.get_encoders()
        records = self.get_benchmark().split(split)
        index = self.get_index()
        truths = truth_map(records)

        queries = query_latents("composed", records, index, encoders, phi, template)
        results = retrieve(records, queries, index, exclude_reference)
        write_results(self.path("results.csv"), results)

        z_image, z_text = self._gap_pairs()
        payload: Dict = {
            "split": split,
            "n_queries": len(records),
            "template": template.text,
            "metrics": metric_report(results, truths, extra_k),
            "modality_gap": {"encoder": modality_gap(z_text, z_image),
                             "projected": projected_gap(encoders, phi, z_image, z_text)},
        }
        if baselines:
            payload["baselines"] = self._baselines(records, extra_k, exclude_reference, payload["metrics"])
        return (True, f"Evaluated {len(records)} {split} queries", payload)

    def _baselines(self, records: Sequence[bench_lib.BenchmarkRecord], extra_k: Optional[int],
                   exclude_reference: bool, composed: Dict[str, float]) -> Dict[str, Dict[str, float]]:
        index = self.get_index()
        truths = truth_map(records)
        report = {"composed": composed}
        for mode in ("text_only", "image_only"):
            queries = query_latents(mode, records, index, self.get_encoders())
            report[mode] = metric_report(retrieve(records, queries, index, exclude_reference), truths, extra_k)
        if all(r.mutation is not None for r in records):
            report["oracle"] = metric_report(bench_lib.oracle_rank(records, exclude_reference), truths, extra_k)
        else:
            logger.warning("Oracle baseline skipped: benchmark records were loaded from file")
        return report

    # ========================================
    # ABLATIONS
    # ========================================

    def _ablation_row(self, label: str, phi: ProjectionModule, extra: Optional[Dict] = None) -> Dict:
        metrics = self._score(phi, "test")
        z_image, z_text = self._gap_pairs()
        row = {"config": label}
        row.update({k: metrics[k] for k in SUMMARY_METRICS})
        row["projected_gap"] = projected_gap(self.get_encoders(), phi, z_image, z_text)
        row.update(extra or {})
        return row

    @staticmethod
    def _sweep(rows: Sequence, table: str):
        return tqdm(rows, desc=f"ablate {table}", disable=progress_disabled())

    @_reports_errors
    def ablate(self, table: str, cfg: TrainConfig, corpus_path: Optional[str] = None,
               phi_checkpoint: Optional[str] = None) -> Result:
        """Rows of one ablation table: masking, noise, supervision or prompts"""
        rows: List[Dict] = []
        if table == "masking":
            for label in self._sweep(MASKING_ROWS, table):
                policy = MaskPolicy.parse(label)
                run = replace(cfg, mask_policy=policy)
                result = self._train_phi(run, self.corpus(policy, corpus_path), label=label)
                rows.append(self._ablation_row(label, result.phi, {"val_r1": result.best_score}))
        elif table == "noise":
            corpus = self.corpus(cfg.mask_policy, corpus_path)
            for label, run in self._sweep(noise_ablation_configs(cfg), table):
                result = self._train_phi(run, corpus, label=label)
                rows.append(self._ablation_row(label, result.phi, {"val_r1": result.best_score}))
        elif table == "supervision":
            corpus = self.corpus(cfg.mask_policy, corpus_path)
            logger.info(f"Supervision row '{SupervisionMode.PHOTO_PROMPT.value}' is not implemented; skipped")
            for mode in self._sweep((SupervisionMode.IMAGE_ANCHORED, SupervisionMode.TEXT_ANCHORED), table):
                result = self._train_phi(replace(cfg, supervision=mode), corpus, label=mode.value)
                rows.append(self._ablation_row(mode.value, result.phi, {"val_r1": result.best_score}))
        elif table == "prompts":
            phi = self.get_phi(phi_checkpoint)
            for template in self._sweep(load_templates(), table):
                metrics = self._score(phi, "test", template)
                rows.append({"config": template.text, **{k: metrics[k] for k in SUMMARY_METRICS}})
        else:
            raise LincirError(f"unknown ablation table '{table}'", module="cli")
        return (True, f"Ablation '{table}': {len(rows)} rows", {"table": table, "rows": rows})

    # ========================================
    # NOISE ANALYSIS
    # ========================================

    @_reports_errors
    def analyze_noise(self, dims: Sequence[int] = (256, 768), n_samples: int = 100_000,
                      histogram: bool = False, bins: int = 60) -> Result:
        """Norm mean/std per noise kind and width; optional norm histograms at the largest width"""
        if n_samples < 1 or not dims:
            raise EmptyInputError("need at least one width and one sample", module="smp-trainer")
        rows, hist_rows = [], []
        for kind in NoiseKind:
            for d in dims:
                rng = np.random.default_rng(self.seed)
                norms = noise_norms(NoiseSpec(kind=kind, seed=self.seed), d, n_samples, rng)
                rows.append({"kind": kind.value, "d": d, "n_samples": n_samples,
                             "mean_norm": float(norms.mean()), "std_norm": float(norms.std())})
                if histogram and d == max(dims):
                    counts, edges = np.histogram(norms, bins=bins)
                    hist_rows.extend({"kind": kind.value, "bin_left": float(edges[i]),
                                      "bin_right": float(edges[i + 1]), "count": int(counts[i])}
                                     for i in range(bins))
        payload = {"rows": rows, "histogram": hist_rows if histogram else None}
        return (True, f"Noise norms for {len(NoiseKind)} kinds x {len(dims)} widths", payload)
