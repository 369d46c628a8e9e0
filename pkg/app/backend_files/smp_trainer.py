"""
Self-Masking Projection (SMP) training of the projection module phi.

For every caption the frozen text encoder gives z_c. phi maps z_c plus noise
into the token-embedding space, that row replaces every keyword span of the
caption, the masked caption is re-encoded, and phi is trained to make the
re-encoded latent match z_c (plain MSE, no l2-normalization on this path).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..utils.log import progress_disabled
from .encoders import DualEncoder, encode_images
from .errors import ConfigError, EmptyInputError, NoKeywordsError, UnpairedCorpusError
from .optim import AdamW
from .projection import NoiseKind, NoiseSpec, ProjectionConfig, ProjectionModule, sample_noise_batch
from .tensor import Tensor, backward, mse, no_grad
from .text_pipeline import MaskPolicy, PosLexicon, Tag, TokenSequence, extract_keyword_spans, get_default_lexicon, tag_pos

logger = logging.getLogger(__name__)

Validator = Callable[[ProjectionModule], float]


class SupervisionMode(str, Enum):
    TEXT_ANCHORED = "text-anchored"
    IMAGE_ANCHORED = "image-anchored"
    PHOTO_PROMPT = "photo-prompt"  # phi trained through the fixed prompt "a photo of [$]"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    dropout: float = 0.5
    max_steps: int = 1500
    eval_every: int = 100
    patience: int = 5
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    supervision: SupervisionMode = SupervisionMode.TEXT_ANCHORED

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("max_steps >= 0, eval_every >= 1 and patience >= 1 are required")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be positive and weight decay non-negative")
        self.noise.validate()

    def to_dict(self) -> Dict:
        return {
            "lr": self.lr, "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "dropout": self.dropout, "max_steps": self.max_steps, "eval_every": self.eval_every,
            "patience": self.patience, "mask_policy": self.mask_policy.label,
            "noise": self.noise.kind.value, "seed": self.seed, "supervision": self.supervision.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        values = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(values.get("mask_policy"), str):
            values["mask_policy"] = MaskPolicy.parse(values["mask_policy"])
        if isinstance(values.get("noise"), str):
            values["noise"] = NoiseSpec.parse(values["noise"])
        if isinstance(values.get("supervision"), str):
            try:
                values["supervision"] = SupervisionMode(values["supervision"])
            except ValueError:
                raise ConfigError(f"unknown supervision mode '{values['supervision']}'") from None
        return cls(**values)


# ==============================================
# Corpus preparation
# ==============================================

@dataclass
class CorpusEntry:
    text: str
    image: Optional[np.ndarray] = None  # paired image, only needed for IMAGE_ANCHORED


@dataclass
class PreparedCaption:
    tokens: TokenSequence  # spans already chosen unless the policy is random
    tags: List[Tag]
    image: Optional[np.ndarray] = None


@dataclass
class PreparedCorpus:
    captions: List[PreparedCaption]
    skipped: int = 0

    @property
    def used(self) -> int:
        return len(self.captions)

    def __len__(self) -> int:
        return len(self.captions)


def prepare_corpus(entries: Sequence[CorpusEntry], encoders: DualEncoder, policy: MaskPolicy,
                   lexicon: Optional[PosLexicon] = None) -> PreparedCorpus:
    """Tokenize and tag every caption; captions with nothing to mask are skipped and counted"""
    lexicon = lexicon or get_default_lexicon()
    check_rng = np.random.default_rng(0)
    prepared = PreparedCorpus([])
    for entry in entries:
        tokens = encoders.tokenize(entry.text)
        tags = tag_pos(tokens, lexicon)
        try:
            spanned = extract_keyword_spans(tokens, tags, policy, check_rng)
        except NoKeywordsError as e:
            logger.debug(f"Skipping caption: {e}")
            prepared.skipped += 1
            continue
        prepared.captions.append(PreparedCaption(spanned, tags, entry.image))

    logger.info(f"Corpus: {prepared.used} captions used, {prepared.skipped} skipped (policy {policy.label})")
    return prepared


# ==============================================
# One SMP step
# ==============================================

def smp_step(batch: Sequence[TokenSequence], encoders: DualEncoder, phi: ProjectionModule, spec: NoiseSpec,
             rng: np.random.Generator, targets: Optional[np.ndarray] = None,
             anchors: Optional[np.ndarray] = None, training: bool = True) -> Tuple[Tensor, Dict[int, np.ndarray]]:
    """
    SMP loss of one batch and its gradients.

    Args:
        batch: captions with at least one keyword span each
        encoders: frozen dual encoder
        phi: projection module being trained
        spec: noise added to the phi input, one fresh draw per caption
        rng: drives noise and dropout
        targets: precomputed clean latents z_c [B, d_joint]; encoded here if omitted
        anchors: phi inputs replacing z_c (image latents when image-anchored)
        training: enables dropout

    Returns:
        (scalar loss, gradients keyed by phi parameter node_id)
    """
    if not batch:
        raise EmptyInputError("empty SMP batch", module="smp-trainer")
    for tokens in batch:
        if not tokens.keyword_spans:
            raise NoKeywordsError(f"caption without keyword spans reached smp_step: {tokens.masked_text()!r}",
                                  module="smp-trainer")
    if targets is None:
        with no_grad():
            targets = encoders.text.encode_ids([t.ids for t in batch]).numpy()
    inputs = targets if anchors is None else anchors

    noise = sample_noise_batch(spec, len(batch), inputs.shape[1], rng)
    projected = phi(Tensor(inputs + noise), rng=rng, training=training)

    collapsed = [t.collapse_spans() for t in batch]
    slot_map = [[(pos, b) for pos in slots] for b, (_, slots) in enumerate(collapsed)]
    predicted = encoders.text.encode_ids([ids for ids, _ in collapsed], projected, slot_map)

    loss = mse(predicted, Tensor(targets))
    return loss, backward(loss)


# ==============================================
# Training loop
# ==============================================

@dataclass
class HistoryRow:
    step: int
    loss: float
    val_score: Optional[float] = None


@dataclass
class TrainResult:
    phi: ProjectionModule
    history: List[HistoryRow] = field(default_factory=list)
    initial_score: Optional[float] = None
    best_score: Optional[float] = None
    best_step: int = 0
    used: int = 0
    skipped: int = 0
    label: str = SupervisionMode.TEXT_ANCHORED.value


def _encode_targets(encoders: DualEncoder, captions: Sequence[PreparedCaption], chunk: int = 256) -> np.ndarray:
    parts = []
    with no_grad():
        for start in range(0, len(captions), chunk):
            parts.append(encoders.text.encode_ids([c.tokens.ids for c in captions[start:start + chunk]]).numpy())
    return np.concatenate(parts)


def train(corpus: PreparedCorpus, encoders: DualEncoder, cfg: TrainConfig,
          validate: Optional[Validator] = None, label: Optional[str] = None) -> TrainResult:
    """
    Train phi with SMP and AdamW, keeping the snapshot with the best validation score.

    Validation runs before the first step, then every cfg.eval_every steps and
    after the last one. Training stops after cfg.patience evaluations without
    improvement or at cfg.max_steps.
    """
    cfg.validate()
    if cfg.supervision is SupervisionMode.PHOTO_PROMPT:
        raise NotImplementedError("not implemented")
    if not corpus.captions:
        raise EmptyInputError("no usable caption in the corpus", module="smp-trainer")

    phi = ProjectionModule(ProjectionConfig(encoders.cfg.d_joint, encoders.cfg.d_text, cfg.dropout), seed=cfg.seed)
    result = TrainResult(phi, used=corpus.used, skipped=corpus.skipped, label=label or cfg.supervision.value)
    if cfg.max_steps == 0:
        return result
    if validate is None:
        raise ConfigError("training needs a validation benchmark", module="smp-trainer")

    anchors = None
    if cfg.supervision is SupervisionMode.IMAGE_ANCHORED:
        if any(c.image is None for c in corpus.captions):
            raise UnpairedCorpusError("image-anchored supervision needs an image for every caption",
                                      module="smp-trainer")
        anchors = encode_images(encoders, np.stack([c.image for c in corpus.captions]))
    targets = _encode_targets(encoders, corpus.captions)

    rng = np.random.default_rng(cfg.seed + 1)
    optimizer = AdamW(phi.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    policy = cfg.mask_policy

    result.initial_score = result.best_score = validate(phi)
    best = phi.snapshot()
    stale = 0
    logger.info(f"[{result.label}] training phi on {corpus.used} captions, step-0 score {result.initial_score:.4f}")

    for step in tqdm(range(1, cfg.max_steps + 1), desc=f"smp {result.label}", disable=progress_disabled()):
        picked = rng.choice(corpus.used, size=min(cfg.batch_size, corpus.used), replace=False)
        if policy.is_random:
            batch = [extract_keyword_spans(corpus.captions[i].tokens, corpus.captions[i].tags, policy, rng)
                     for i in picked]
        else:
            batch = [corpus.captions[i].tokens for i in picked]
        loss, grads = smp_step(batch, encoders, phi, cfg.noise, rng, targets=targets[picked],
                               anchors=None if anchors is None else anchors[picked])
        optimizer.step(grads)
        row = HistoryRow(step, loss.item())
        result.history.append(row)

        if step % cfg.eval_every and step != cfg.max_steps:
            continue
        row.val_score = validate(phi)
        logger.debug(f"[{result.label}] step {step}: loss {row.loss:.6f}, validation {row.val_score:.4f}")
        if row.val_score > result.best_score:
            result.best_score, result.best_step, best, stale = row.val_score, step, phi.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"[{result.label}] early stop at step {step}")
                break

    phi.load_snapshot(best)
    logger.info(f"[{result.label}] best validation score {result.best_score:.4f} at step {result.best_step}")
    return result


def ablate_supervision(mode: SupervisionMode, corpus: PreparedCorpus, encoders: DualEncoder, cfg: TrainConfig,
                       validate: Optional[Validator] = None) -> TrainResult:
    """Train under one supervision design; TEXT_ANCHORED is plain train()"""
    return train(corpus, encoders, replace(cfg, supervision=mode), validate, label=mode.value)


def noise_ablation_configs(cfg: TrainConfig) -> List[Tuple[str, TrainConfig]]:
    """One config per noise kind, labelled as in the noise ablation table"""
    return [(kind.label, replace(cfg, noise=replace(cfg.noise, kind=kind))) for kind in NoiseKind]


def write_history(path: str, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "val_score"])
        for row in history:
            score = "" if row.val_score is None or math.isnan(row.val_score) else f"{row.val_score:.6f}"
            writer.writerow([row.step, f"{row.loss:.8f}", score])


def read_history(path: str) -> List[HistoryRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [HistoryRow(int(r["step"]), float(r["loss"]), float(r["val_score"]) if r["val_score"] else None)
                for r in csv.DictReader(fh)]
