"""
Compact vision-language dual encoder standing in for a frozen CLIP backbone.

The text side is a causal pre-LN transformer over token embeddings E_w with
learned positional embeddings, pooled at the [EOS] position. The image side
cuts the image into patches and mean-pools a non-causal transformer. Both end in
a linear projection into the shared latent space. After contrastive
pre-training every parameter is frozen.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from ..utils.log import progress_disabled
from .errors import EmptyInputError, ShapeMismatchError
from .optim import AdamW
from .tensor import (Parameter, Tensor, backward, cross_entropy, embed_with_injection, exp, gather_rows,
                     gelu, l2_normalize, layer_norm, linear, matmul, no_grad, softmax_attention, stack,
                     take_rows)
from .text_pipeline import EOS_ID, PAD_ID, TokenSequence, Vocabulary, tokenize

logger = logging.getLogger(__name__)

Injection = Union[Tensor, Mapping[int, Tensor], None]


@dataclass
class EncoderConfig:
    """Desk-scale encoder shapes (a scaled-down CLIP configuration)"""

    vocab_size: int = 0
    d_text: int = 64
    n_layers_text: int = 2
    n_heads_text: int = 4
    max_seq_len: int = 32
    d_image: int = 64
    n_layers_image: int = 2
    n_heads_image: int = 4
    patch_size: int = 8
    image_side: int = 24
    d_joint: int = 64
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_text % self.n_heads_text:
            raise ValueError("d_text must be divisible by n_heads_text")
        if self.d_image % self.n_heads_image:
            raise ValueError("d_image must be divisible by n_heads_image")
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.d_joint <= 0 or self.vocab_size <= 0:
            raise ValueError("d_joint and vocab_size must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class LatentEmbedding:
    """Pooled encoder output z_c or z_i"""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.normalized and abs(np.linalg.norm(self.values) - 1.0) > 1e-9:
            raise ValueError("normalized latent must have unit norm")

    def normalize(self) -> "LatentEmbedding":
        return LatentEmbedding(self.values / np.linalg.norm(self.values), normalized=True)


# ==============================================
# Building blocks
# ==============================================

class Module:
    """Ordered collection of named parameters and sub-modules"""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out: List[Tuple[str, Parameter]] = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    out.extend(sub.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for param in self.parameters():
            param.freeze()

    @property
    def is_frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape), name=name)


class LayerNorm(Module):
    def __init__(self, d: int, name: str):
        self.gamma = Parameter(np.ones(d), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(d), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float, name: str, bias: bool = True):
        self.weight = _normal(rng, (d_in, d_out), std, f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class TransformerBlock(Module):
    """Pre-LN block: x + Attn(LN(x)), then x + MLP(LN(x)) with a 4d GeLU MLP"""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, std: float, name: str):
        self.n_heads = n_heads
        self.ln_attn = LayerNorm(d, f"{name}.ln_attn")
        self.query = Linear(rng, d, d, std, f"{name}.query")
        self.key = Linear(rng, d, d, std, f"{name}.key")
        self.value = Linear(rng, d, d, std, f"{name}.value")
        self.attn_out = Linear(rng, d, d, std, f"{name}.attn_out")
        self.ln_mlp = LayerNorm(d, f"{name}.ln_mlp")
        self.fc_in = Linear(rng, d, 4 * d, std, f"{name}.fc_in")
        self.fc_out = Linear(rng, 4 * d, d, std, f"{name}.fc_out")

    def _heads(self, x: Tensor, batch: int, steps: int) -> Tensor:
        d_head = x.shape[-1] // self.n_heads
        return x.reshape(batch, steps, self.n_heads, d_head).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        batch, steps, d = x.shape
        h = self.ln_attn(x)
        q = self._heads(self.query(h), batch, steps)
        k = self._heads(self.key(h), batch, steps)
        v = self._heads(self.value(h), batch, steps)
        attended = softmax_attention(q, k, v, causal=causal).transpose(0, 2, 1, 3).reshape(batch, steps, d)
        x = x + self.attn_out(attended)
        return x + self.fc_out(gelu(self.fc_in(self.ln_mlp(x))))


# ==============================================
# Encoders
# ==============================================

class TextEncoder(Module):
    """psi_C over token embeddings E_w; latent = projection of the [EOS] hidden state"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        std = cfg.init_std
        self.cfg = cfg
        self.token_embedding = _normal(rng, (cfg.vocab_size, cfg.d_text), std, "text.token_embedding")
        self.positional_embedding = _normal(rng, (cfg.max_seq_len, cfg.d_text), std / 2, "text.positional_embedding")
        self.blocks = [TransformerBlock(rng, cfg.d_text, cfg.n_heads_text, std, f"text.block{i}")
                       for i in range(cfg.n_layers_text)]
        self.ln_final = LayerNorm(cfg.d_text, "text.ln_final")
        self.projection = _normal(rng, (cfg.d_text, cfg.d_joint), cfg.d_text ** -0.5, "text.projection")

    def encode_ids(self, sequences: Sequence[Sequence[int]], injected: Optional[Tensor] = None,
                   slot_map: Optional[Sequence[Sequence[Tuple[int, int]]]] = None) -> Tensor:
        """
        Encode a batch of id sequences (each ending in [EOS]).

        Args:
            sequences: token ids per caption; shorter ones are padded after [EOS]
            injected: rows [S, d_text] that replace token embeddings at slots
            slot_map: per sequence, (position, row of `injected`) pairs

        Returns:
            Unnormalized latents [B, d_joint]
        """
        if not sequences:
            raise EmptyInputError("nothing to encode", module="dual-encoder")
        steps = max(len(s) for s in sequences)
        if steps > self.cfg.max_seq_len:
            raise ShapeMismatchError(
                f"sequence of {steps} tokens exceeds max_seq_len {self.cfg.max_seq_len}", module="dual-encoder")
        ids = np.full((len(sequences), steps), PAD_ID, dtype=np.int64)
        eos = np.empty(len(sequences), dtype=np.int64)
        slot_rows = np.full(ids.shape, -1, dtype=np.int64)
        for b, seq in enumerate(sequences):
            ids[b, :len(seq)] = seq
            eos[b] = len(seq) - 1
            if slot_map is not None:
                for position, row in slot_map[b]:
                    slot_rows[b, position] = row

        x = embed_with_injection(self.token_embedding, ids, injected, slot_rows if injected is not None else None)
        x = x + take_rows(self.positional_embedding, np.arange(steps))
        for block in self.blocks:
            x = block(x, causal=True)
        pooled = gather_rows(self.ln_final(x), eos)
        return matmul(pooled, self.projection)

    def encode(self, tokens: TokenSequence, injected: Injection = None) -> Tensor:
        """
        z_c = psi_C(E_w(t_c)) for one sequence, as a graph node of shape [d_joint].

        Args:
            tokens: caption tokens; its keyword spans are the injection points
            injected: None (plain caption), one Tensor[d_text] used for every
                span, or a mapping span-index -> Tensor[d_text]

        Each keyword span collapses to one position holding the injected row.
        """
        if injected is None:
            return self.encode_ids([tokens.ids]).reshape(self.cfg.d_joint)

        ids, slots = tokens.collapse_spans()
        if not slots:
            raise ShapeMismatchError("injection requested but the sequence has no span or [$] slot",
                                     module="dual-encoder")
        if isinstance(injected, Tensor):
            rows = injected.reshape(1, injected.size) if injected.ndim == 1 else injected
            slot_map = [[(pos, 0) for pos in slots]]
        else:
            bad = [k for k in injected if not 0 <= k < len(slots)]
            if bad:
                raise ShapeMismatchError(f"span index out of range: {bad}", module="dual-encoder")
            missing = [k for k in range(len(slots)) if k not in injected]
            if missing:
                raise ShapeMismatchError(f"no injected row for spans {missing}", module="dual-encoder")
            rows = stack([injected[k] for k in range(len(slots))])
            slot_map = [[(pos, k) for k, pos in enumerate(slots)]]
        if rows.shape[-1] != self.cfg.d_text:
            raise ShapeMismatchError(
                f"injected width {rows.shape[-1]} != d_text {self.cfg.d_text}", module="dual-encoder")
        return self.encode_ids([ids], rows, slot_map).reshape(self.cfg.d_joint)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, S, S, 3] -> [B, n_patches, patch_size * patch_size * 3] in row-major patch order"""
    batch, side = images.shape[0], images.shape[1]
    grid = side // patch_size
    patches = images.reshape(batch, grid, patch_size, grid, patch_size, 3).transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(batch, grid * grid, patch_size * patch_size * 3)


class ImageEncoder(Module):
    """psi_I: patch projection, positional embedding, transformer, mean-pool, projection"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        std = cfg.init_std
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.cfg = cfg
        self.patch_projection = Linear(rng, patch_dim, cfg.d_image, patch_dim ** -0.5, "image.patch_projection")
        self.positional_embedding = _normal(rng, (cfg.n_patches, cfg.d_image), std, "image.positional_embedding")
        self.blocks = [TransformerBlock(rng, cfg.d_image, cfg.n_heads_image, std, f"image.block{i}")
                       for i in range(cfg.n_layers_image)]
        self.ln_final = LayerNorm(cfg.d_image, "image.ln_final")
        self.projection = _normal(rng, (cfg.d_image, cfg.d_joint), cfg.d_image ** -0.5, "image.projection")

    def encode_batch(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        side = self.cfg.image_side
        if images.ndim != 4 or images.shape[1:] != (side, side, 3):
            raise ShapeMismatchError(
                f"expected images of shape [B, {side}, {side}, 3], got {images.shape}", module="dual-encoder")
        x = self.patch_projection(Tensor(patchify(images, self.cfg.patch_size)))
        x = x + self.positional_embedding
        for block in self.blocks:
            x = block(x, causal=False)
        return matmul(self.ln_final(x).mean(axis=1), self.projection)

    def encode(self, image: np.ndarray) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        return self.encode_batch(image[None]).reshape(self.cfg.d_joint)


class DualEncoder(Module):
    """Text encoder, image encoder, learnable temperature and the vocabulary they were trained with"""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, seed: int = 0,
                 temperature: float = 0.07):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.text = TextEncoder(cfg, rng)
        self.image = ImageEncoder(cfg, rng)
        self.logit_scale = Parameter(np.array(math.log(1.0 / temperature)), name="logit_scale")

    def tokenize(self, caption: str) -> TokenSequence:
        return tokenize(caption, self.vocab, self.cfg.max_seq_len)


def encode_text(encoders: DualEncoder, tokens: TokenSequence, injected: Injection = None) -> LatentEmbedding:
    """Unnormalized text latent (no graph is recorded)"""
    with no_grad():
        return LatentEmbedding(encoders.text.encode(tokens, injected).numpy())


def encode_image(encoders: DualEncoder, image: np.ndarray) -> LatentEmbedding:
    """Unnormalized image latent for one [side, side, 3] image with values in [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    if image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    with no_grad():
        return LatentEmbedding(encoders.image.encode(image).numpy())


def encode_captions(encoders: DualEncoder, captions: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """[N, d_joint] unnormalized latents of plain captions"""
    chunks = []
    with no_grad():
        for start in range(0, len(captions), batch_size):
            ids = [encoders.tokenize(c).ids for c in captions[start:start + batch_size]]
            chunks.append(encoders.text.encode_ids(ids).numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, encoders.cfg.d_joint))


def encode_images(encoders: DualEncoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """[N, d_joint] unnormalized latents of a stack of images"""
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(encoders.image.encode_batch(images[start:start + batch_size]).numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, encoders.cfg.d_joint))


# ==============================================
# Contrastive pre-training
# ==============================================

class PretrainPair(NamedTuple):
    image: np.ndarray
    caption: str
    group: int  # pairs sharing a group describe the same scene


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    temperature: float = 0.07
    max_logit_scale: float = math.log(100.0)
    seed: int = 0


@dataclass
class PretrainResult:
    encoders: DualEncoder
    losses: List[float] = field(default_factory=list)


def contrastive_loss(z_image: Tensor, z_text: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE over l2-normalized latents; row i of each side is a positive pair"""
    if z_image.shape != z_text.shape or z_image.shape[0] < 2:
        raise ShapeMismatchError(f"contrastive loss needs >= 2 matched pairs, got {z_image.shape}",
                                 module="dual-encoder")
    logits = exp(logit_scale) * matmul(l2_normalize(z_image), l2_normalize(z_text).transpose())
    targets = np.arange(z_image.shape[0])
    return (cross_entropy(logits, targets) + cross_entropy(logits.transpose(), targets)) * 0.5


def _sample_batch(pairs: Sequence[PretrainPair], by_group: Dict[int, List[int]],
                  batch_size: int, rng: np.random.Generator) -> List[PretrainPair]:
    groups = sorted(by_group)
    chosen = rng.choice(len(groups), size=min(batch_size, len(groups)), replace=False)
    return [pairs[by_group[groups[g]][rng.integers(len(by_group[groups[g]]))]] for g in chosen]


def pretrain_contrastive(pairs: Sequence[PretrainPair], cfg: EncoderConfig, vocab: Vocabulary,
                         hparams: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """
    Train both encoders with symmetric InfoNCE, then freeze them.

    Each batch draws pairs from distinct groups so no batch holds two captions of
    the same scene.
    """
    by_group: Dict[int, List[int]] = {}
    for i, pair in enumerate(pairs):
        by_group.setdefault(pair.group, []).append(i)
    if min(hparams.batch_size, len(by_group)) < 2:
        raise EmptyInputError("contrastive pre-training needs batches of at least 2 pairs",
                              module="dual-encoder")

    cfg.vocab_size = len(vocab)
    encoders = DualEncoder(cfg, vocab, seed=hparams.seed, temperature=hparams.temperature)
    optimizer = AdamW(encoders.parameters(), lr=hparams.lr, weight_decay=hparams.weight_decay)
    rng = np.random.default_rng(hparams.seed + 1)
    result = PretrainResult(encoders)

    logger.info(f"Pre-training dual encoder on {len(pairs)} pairs ({len(by_group)} scenes) "
                f"for {hparams.steps} steps")
    for step in tqdm(range(hparams.steps), desc="pretrain", disable=progress_disabled()):
        batch = _sample_batch(pairs, by_group, hparams.batch_size, rng)
        z_image = encoders.image.encode_batch(np.stack([p.image for p in batch]))
        z_text = encoders.text.encode_ids([encoders.tokenize(p.caption).ids for p in batch])
        loss = contrastive_loss(z_image, z_text, encoders.logit_scale)
        optimizer.step(backward(loss))
        encoders.logit_scale.assign(np.minimum(encoders.logit_scale.data, hparams.max_logit_scale))
        result.losses.append(loss.item())
        if step % 500 == 0:
            logger.debug(f"pretrain step {step}: loss {loss.item():.4f}")

    encoders.freeze()
    logger.info(f"Pre-training done, final loss {result.losses[-1]:.4f}" if result.losses
                else "Pre-training skipped (0 steps)")
    return result


def image_to_caption_recall(encoders: DualEncoder, pairs: Sequence[PretrainPair]) -> float:
    """R@1 of image -> caption retrieval among `pairs`; a hit is any caption of the same group"""
    if not pairs:
        raise EmptyInputError("no held-out pairs", module="dual-encoder")
    z_img = encode_images(encoders, np.stack([p.image for p in pairs]))
    z_txt = encode_captions(encoders, [p.caption for p in pairs])
    z_img /= np.linalg.norm(z_img, axis=1, keepdims=True)
    z_txt /= np.linalg.norm(z_txt, axis=1, keepdims=True)
    best = np.argmax(z_img @ z_txt.T, axis=1)
    groups = np.array([p.group for p in pairs])
    return float(np.mean(groups[best] == groups))
