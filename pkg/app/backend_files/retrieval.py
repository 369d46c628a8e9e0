"""
Composed-query inference, the gallery index, ranking and retrieval metrics.

A composed query takes the reference image latent z_i, projects it with phi
into the token-embedding space, injects it at the [$] slot of a prompt such as
"a photo of [$] that [cond]" and uses the l2-normalized text latent to rank
the gallery by cosine similarity.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
from sklearn.preprocessing import normalize

from ..utils.paths import TEMPLATES_PATH
from .checkpoint import read_container, write_container
from .encoders import DualEncoder, LatentEmbedding, encode_captions, encode_image, encode_images
from .errors import (CorruptCheckpointError, EmptyInputError, InvalidCutoffError, InvalidTemplateError,
                     PromptTooLongError, ShapeMismatchError)
from .projection import ProjectionModule
from .tensor import Tensor, no_grad
from .text_pipeline import SLOT_TOKEN, split_words

logger = logging.getLogger(__name__)

COND_TOKEN = "[cond]"
DEFAULT_TEMPLATE = "a photo of [$] that [cond]"
PHOTO_PROMPT = "a photo of [$]"
RECALL_KS = (1, 5, 10, 50)
MAP_KS = (5, 10, 25, 50)
_CHUNK = 128


def worker_threads() -> int:
    """Thread cap from LINCIR_THREADS (default 1)"""
    try:
        return max(1, int(os.environ.get("LINCIR_THREADS", "1")))
    except ValueError:
        return 1


def _in_chunks(fn: Callable[[int, int], np.ndarray], total: int, width: int) -> np.ndarray:
    """Evaluate fn(start, stop) over fixed chunks, possibly in threads, concatenated in order"""
    bounds = [(s, min(s + _CHUNK, total)) for s in range(0, total, _CHUNK)]
    if not bounds:
        return np.zeros((0, width))
    threads = min(worker_threads(), len(bounds))
    if threads == 1:
        return np.concatenate([fn(s, e) for s, e in bounds])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(lambda b: fn(*b), bounds)))


# ==============================================
# Gallery index
# ==============================================

@dataclass
class GalleryIndex:
    """
    ids: unique item ids
    latents: l2-normalized image latents [N, d_joint]
    raw: the unnormalized latents, kept so gallery items can serve as reference images
    """

    ids: List[str]
    latents: np.ndarray
    raw: Optional[np.ndarray] = None
    _position: Dict[str, int] = field(init=False, repr=False)
    _id_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ShapeMismatchError("gallery ids must be unique", module="retrieval-engine")
        latents = np.asarray(self.latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[0] != len(self.ids):
            raise ShapeMismatchError(f"{len(self.ids)} ids for latents of shape {latents.shape}",
                                     module="retrieval-engine")
        self.latents = normalize(latents) if len(latents) else latents
        self.latents.setflags(write=False)
        self._position = {item: i for i, item in enumerate(self.ids)}
        # rank of every id in ascending id order, the tie-break key
        self._id_order = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"), kind="stable")

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, item_id: str) -> int:
        try:
            return self._position[item_id]
        except KeyError:
            raise EmptyInputError(f"unknown gallery item '{item_id}'", module="retrieval-engine") from None

    def raw_latent(self, item_id: str) -> np.ndarray:
        if self.raw is None:
            raise EmptyInputError("index was built without raw latents", module="retrieval-engine")
        return self.raw[self.position(item_id)]

    def save(self, path: str, key: str = "") -> None:
        tensors = [("latents", self.latents)]
        if self.raw is not None:
            tensors.append(("raw", self.raw))
        write_container(path, "gallery-index", {"key": key}, tensors, self.ids)

    @classmethod
    def load(cls, path: str) -> Tuple["GalleryIndex", str]:
        """(index, key); rows are re-normalized after the float32 round trip"""
        container = read_container(path)
        if container.kind != "gallery-index" or "latents" not in container.tensors:
            raise CorruptCheckpointError(f"{path}: not a gallery index")
        index = cls(container.strings, container.tensors["latents"], container.tensors.get("raw"))
        return index, container.meta.get("key", "")


def build_index(encoders: DualEncoder, ids: Sequence[str], images: np.ndarray) -> GalleryIndex:
    if len(ids) == 0:
        raise EmptyInputError("cannot index an empty gallery", module="retrieval-engine")
    raw = encode_images(encoders, np.asarray(images))
    return GalleryIndex(list(ids), raw, raw)


# ==============================================
# Prompt templates
# ==============================================

@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.text.count(SLOT_TOKEN) != 1 or self.text.count(COND_TOKEN) != 1:
            raise InvalidTemplateError(f"template needs exactly one {SLOT_TOKEN} and one {COND_TOKEN}: "
                                       f"{self.text!r}")

    def fill(self, cond: str) -> str:
        return self.text.replace(COND_TOKEN, cond.strip())


def load_templates(path: str = TEMPLATES_PATH) -> List[PromptTemplate]:
    """One template per non-empty line, in file order"""
    with open(path, encoding="utf-8") as fh:
        return [PromptTemplate(line.strip()) for line in fh if line.strip() and not line.startswith("#")]


# ==============================================
# Queries
# ==============================================

def _prompt_ids(encoders: DualEncoder, text: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    words = split_words(text)
    if len(words) + 2 > encoders.cfg.max_seq_len:
        raise PromptTooLongError(f"prompt of {len(words) + 2} tokens exceeds max_seq_len "
                                 f"{encoders.cfg.max_seq_len}: {text!r}")
    return encoders.tokenize(text).collapse_spans()


def encode_prompts(encoders: DualEncoder, prompts: Sequence[str], rows: np.ndarray) -> np.ndarray:
    """
    Encode prompts that each hold one [$] slot, injecting rows[b] into prompt b.

    Returns:
        l2-normalized latents [B, d_joint]
    """
    if len(prompts) != len(rows):
        raise ShapeMismatchError(f"{len(prompts)} prompts for {len(rows)} injected rows", module="retrieval-engine")
    prepared = [_prompt_ids(encoders, p) for p in prompts]

    def run(start: int, stop: int) -> np.ndarray:
        with no_grad():
            chunk = prepared[start:stop]
            slot_map = [[(pos, b) for pos in slots] for b, (_, slots) in enumerate(chunk)]
            out = encoders.text.encode_ids([ids for ids, _ in chunk], Tensor(rows[start:stop]), slot_map)
            return out.numpy()

    return normalize(_in_chunks(run, len(prompts), encoders.cfg.d_joint))


def compose_query(ref_image: np.ndarray, cond: str, phi: ProjectionModule, encoders: DualEncoder,
                  template: PromptTemplate = PromptTemplate()) -> LatentEmbedding:
    """Normalized latent of the template with cond filled in and phi(z_i) at [$] (no noise)"""
    z_image = encode_image(encoders, ref_image).values
    projected = phi.project(z_image[None])
    return LatentEmbedding(encode_prompts(encoders, [template.fill(cond)], projected)[0], normalized=True)


def compose_queries(image_latents: np.ndarray, conds: Sequence[str], phi: ProjectionModule,
                    encoders: DualEncoder, template: PromptTemplate = PromptTemplate()) -> np.ndarray:
    """Batched compose_query from precomputed (unnormalized) reference latents"""
    projected = phi.project(np.asarray(image_latents))
    return encode_prompts(encoders, [template.fill(c) for c in conds], projected)


def text_only_queries(encoders: DualEncoder, conds: Sequence[str]) -> np.ndarray:
    return normalize(encode_captions(encoders, list(conds)))


def image_only_queries(image_latents: np.ndarray) -> np.ndarray:
    return normalize(np.asarray(image_latents))


# ==============================================
# Ranking
# ==============================================

@dataclass
class RankedResult:
    query_id: str
    items: List[Tuple[str, float]]

    def item_ids(self) -> List[str]:
        return [item for item, _ in self.items]


def _rank_row(query_id: str, scores: np.ndarray, index: GalleryIndex, exclude: Optional[str],
              top: Optional[int]) -> RankedResult:
    order = np.lexsort((index._id_order, -scores))
    if exclude is not None and exclude in index._position:
        order = order[order != index._position[exclude]]
    if top is not None:
        order = order[:top]
    return RankedResult(query_id, [(index.ids[i], float(scores[i])) for i in order])


def rank(query: LatentEmbedding, index: GalleryIndex, exclude: Optional[str] = None,
         top: Optional[int] = None, query_id: str = "") -> RankedResult:
    """Gallery items by descending cosine similarity, ties by ascending item id"""
    if len(index) == 0:
        raise EmptyInputError("empty gallery index", module="retrieval-engine")
    values = query.values if query.normalized else query.normalize().values
    return _rank_row(query_id, index.latents @ values, index, exclude, top)


def rank_all(queries: np.ndarray, query_ids: Sequence[str], index: GalleryIndex,
             excludes: Optional[Sequence[Optional[str]]] = None, top: Optional[int] = None) -> List[RankedResult]:
    if len(index) == 0:
        raise EmptyInputError("empty gallery index", module="retrieval-engine")
    scores = normalize(np.asarray(queries)) @ index.latents.T
    excludes = excludes if excludes is not None else [None] * len(query_ids)
    return [_rank_row(q, scores[i], index, excludes[i], top) for i, q in enumerate(query_ids)]


# ==============================================
# Metrics
# ==============================================

def _check(results: Sequence[RankedResult], truths: Mapping[str, Set[str]], k: int) -> None:
    if k < 1:
        raise InvalidCutoffError(f"cut-off k must be >= 1, got {k}")
    if not results:
        raise EmptyInputError("no results to score", module="retrieval-engine")
    for result in results:
        if not truths.get(result.query_id):
            raise EmptyInputError(f"query '{result.query_id}' has no ground truth", module="retrieval-engine")


def recall_at_k(results: Sequence[RankedResult], truths: Mapping[str, Set[str]], k: int) -> float:
    """Fraction of queries with at least one ground-truth item in the top k"""
    _check(results, truths, k)
    hits = [any(item in truths[r.query_id] for item, _ in r.items[:k]) for r in results]
    return float(np.mean(hits))


def average_precision_at_k(ranked_ids: Sequence[str], positives: Set[str], k: int) -> float:
    """AP@k normalized by min(k, |positives|)"""
    found, total = 0, 0.0
    for r, item in enumerate(ranked_ids[:k], start=1):
        if item in positives:
            found += 1
            total += found / r
    return total / min(k, len(positives))


def map_at_k(results: Sequence[RankedResult], truths: Mapping[str, Set[str]], k: int) -> float:
    _check(results, truths, k)
    return float(np.mean([average_precision_at_k(r.item_ids(), truths[r.query_id], k) for r in results]))


def metric_report(results: Sequence[RankedResult], truths: Mapping[str, Set[str]],
                  extra_k: Optional[int] = None) -> Dict[str, float]:
    recall_ks = sorted(set(RECALL_KS) | ({extra_k} if extra_k else set()))
    map_ks = sorted(set(MAP_KS) | ({extra_k} if extra_k else set()))
    report = {f"R@{k}": recall_at_k(results, truths, k) for k in recall_ks}
    report.update({f"mAP@{k}": map_at_k(results, truths, k) for k in map_ks})
    return report


def modality_gap(text_latents: Iterable[np.ndarray], image_latents: Iterable[np.ndarray]) -> float:
    """Distance between the centroids of l2-normalized image and text latents"""
    texts = np.asarray(list(text_latents), dtype=np.float64)
    images = np.asarray(list(image_latents), dtype=np.float64)
    if texts.size == 0 or images.size == 0:
        raise EmptyInputError("modality gap needs non-empty text and image sets", module="retrieval-engine")
    return float(np.linalg.norm(normalize(images).mean(axis=0) - normalize(texts).mean(axis=0)))


def projected_gap(encoders: DualEncoder, phi: ProjectionModule, image_latents: np.ndarray,
                  caption_latents: np.ndarray) -> float:
    """Gap between "a photo of [$]" latents built from phi(z_i) and from phi(z_c) of paired captions"""
    prompts = [PHOTO_PROMPT] * len(image_latents)
    from_images = encode_prompts(encoders, prompts, phi.project(np.asarray(image_latents)))
    prompts = [PHOTO_PROMPT] * len(caption_latents)
    from_texts = encode_prompts(encoders, prompts, phi.project(np.asarray(caption_latents)))
    return modality_gap(from_texts, from_images)


# ==============================================
# Benchmark evaluation
# ==============================================

class QueryRecord(Protocol):
    query_id: str
    reference_id: str
    condition: str
    targets: List[str]


QUERY_MODES = ("composed", "text_only", "image_only")


def query_latents(mode: str, records: Sequence[QueryRecord], index: GalleryIndex, encoders: DualEncoder,
                  phi: Optional[ProjectionModule] = None,
                  template: PromptTemplate = PromptTemplate()) -> np.ndarray:
    if not records:
        raise EmptyInputError("no benchmark queries", module="retrieval-engine")
    refs = np.stack([index.raw_latent(r.reference_id) for r in records])
    if mode == "composed":
        if phi is None:
            raise EmptyInputError("composed queries need a projection module", module="retrieval-engine")
        return compose_queries(refs, [r.condition for r in records], phi, encoders, template)
    if mode == "text_only":
        return text_only_queries(encoders, [r.condition for r in records])
    if mode == "image_only":
        return image_only_queries(refs)
    raise ValueError(f"unknown query mode '{mode}'")


def retrieve(records: Sequence[QueryRecord], queries: np.ndarray, index: GalleryIndex,
             exclude_reference: bool = True, top: Optional[int] = None) -> List[RankedResult]:
    excludes = [r.reference_id if exclude_reference else None for r in records]
    return rank_all(queries, [r.query_id for r in records], index, excludes, top)


def truth_map(records: Sequence[QueryRecord]) -> Dict[str, Set[str]]:
    return {r.query_id: set(r.targets) for r in records}


def make_validator(records: Sequence[QueryRecord], index: GalleryIndex, encoders: DualEncoder,
                   template: PromptTemplate = PromptTemplate(),
                   exclude_reference: bool = True) -> Callable[[ProjectionModule], float]:
    """phi -> composed-retrieval R@1 on `records`"""
    truths = truth_map(records)

    def validate(phi: ProjectionModule) -> float:
        queries = query_latents("composed", records, index, encoders, phi, template)
        return recall_at_k(retrieve(records, queries, index, exclude_reference, top=1), truths, 1)

    return validate


def write_results(path: str, results: Sequence[RankedResult], top: int = 50) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "rank", "item_id", "score"])
        for result in results:
            for r, (item, score) in enumerate(result.items[:top], start=1):
                writer.writerow([result.query_id, r, item, f"{score:.6f}"])
