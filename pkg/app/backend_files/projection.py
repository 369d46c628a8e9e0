"""
The projection module phi (latent space -> token-embedding space) and the
noise distributions added to its input during training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .encoders import LayerNorm, Linear, Module
from .errors import InvalidNoiseSpecError
from .tensor import Tensor, dropout, gelu, no_grad, reshape
from ..utils.log import progress_disabled


# ==============================================
# Projection module
# ==============================================

@dataclass
class ProjectionConfig:
    d_joint: int = 64
    d_text: int = 64
    dropout: float = 0.5

    @property
    def hidden(self) -> int:
        return 4 * self.d_joint

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProjectionConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


class ProjectionModule(Module):
    """
    LN -> Linear(d, 4d) -> GeLU -> Linear(4d, 4d) -> GeLU -> Linear(4d, d_text) -> LN

    Dropout acts on the two hidden activations during training only.
    """

    def __init__(self, cfg: ProjectionConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.ln_in = LayerNorm(cfg.d_joint, "phi.ln_in")
        self.fc1 = Linear(rng, cfg.d_joint, cfg.hidden, cfg.d_joint ** -0.5, "phi.fc1")
        self.fc2 = Linear(rng, cfg.hidden, cfg.hidden, cfg.hidden ** -0.5, "phi.fc2")
        self.fc3 = Linear(rng, cfg.hidden, cfg.d_text, cfg.hidden ** -0.5, "phi.fc3")
        self.ln_out = LayerNorm(cfg.d_text, "phi.ln_out")

    def __call__(self, z: Tensor, rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        """z is one latent [d_joint] or a batch [n, d_joint]; the output keeps the leading shape"""
        single = z.ndim == 1
        if single:
            z = reshape(z, (1, z.shape[0]))
        rate = self.cfg.dropout
        h = self.ln_in(z)
        h = dropout(gelu(self.fc1(h)), rate, rng, training)
        h = dropout(gelu(self.fc2(h)), rate, rng, training)
        out = self.ln_out(self.fc3(h))
        return reshape(out, (self.cfg.d_text,)) if single else out

    def project(self, z: np.ndarray) -> np.ndarray:
        """Inference projection (no noise, no dropout, no graph)"""
        with no_grad():
            return self(Tensor(z)).numpy()

    def snapshot(self) -> List[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_snapshot(self, arrays: List[np.ndarray]) -> None:
        for param, values in zip(self.parameters(), arrays):
            param.assign(values)


# ==============================================
# Noise
# ==============================================

class NoiseKind(str, Enum):
    NONE = "none"
    STUDENT_T = "student-t"
    EXPONENTIAL = "exponential"
    CHI2 = "chi2"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    SCALED_GAUSSIAN = "scaled-gaussian"

    @property
    def label(self) -> str:
        return _NOISE_LABELS[self]


_NOISE_LABELS = {
    NoiseKind.NONE: "No noise",
    NoiseKind.STUDENT_T: "Student-t",
    NoiseKind.EXPONENTIAL: "Exponential",
    NoiseKind.CHI2: "chi^2",
    NoiseKind.GAUSSIAN: "N(0,1)",
    NoiseKind.UNIFORM: "Unif(-1,1)",
    NoiseKind.SCALED_GAUSSIAN: "N(0,1) x Unif(0,1)",
}


@dataclass(frozen=True)
class NoiseSpec:
    """
    Noise added to the latent before phi. Parameter conventions:
    Student-t df=5, chi^2 k=1, exponential rate 1, uniform on (-1, 1).
    SCALED_GAUSSIAN draws one u ~ Unif(0,1) per vector and multiplies a N(0, I) vector.
    """

    kind: NoiseKind = NoiseKind.SCALED_GAUSSIAN
    df: float = 5.0
    k: float = 1.0
    rate: float = 1.0
    low: float = -1.0
    high: float = 1.0
    seed: int = 0

    @classmethod
    def parse(cls, text: str, **params) -> "NoiseSpec":
        value = text.strip().lower().replace("_", "-")
        aliases = {"no-noise": "none", "normal": "gaussian", "t": "student-t", "exp": "exponential",
                   "chi-squared": "chi2", "unif": "uniform", "scaled-normal": "scaled-gaussian"}
        try:
            kind = NoiseKind(aliases.get(value, value))
        except ValueError:
            raise InvalidNoiseSpecError(f"unknown noise kind '{text}'") from None
        spec = cls(kind=kind, **params)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.kind is NoiseKind.STUDENT_T and not self.df > 0:
            raise InvalidNoiseSpecError(f"student-t needs df > 0, got {self.df}")
        if self.kind is NoiseKind.CHI2 and not self.k > 0:
            raise InvalidNoiseSpecError(f"chi2 needs k > 0, got {self.k}")
        if self.kind is NoiseKind.EXPONENTIAL and not self.rate > 0:
            raise InvalidNoiseSpecError(f"exponential needs rate > 0, got {self.rate}")
        if self.kind is NoiseKind.UNIFORM and not self.low < self.high:
            raise InvalidNoiseSpecError(f"uniform needs low < high, got ({self.low}, {self.high})")


def sample_noise_batch(spec: NoiseSpec, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n independent noise vectors [n, d]"""
    spec.validate()
    kind = spec.kind
    if kind is NoiseKind.NONE:
        return np.zeros((n, d))
    if kind is NoiseKind.GAUSSIAN:
        return rng.standard_normal((n, d))
    if kind is NoiseKind.UNIFORM:
        return rng.uniform(spec.low, spec.high, size=(n, d))
    if kind is NoiseKind.STUDENT_T:
        return rng.standard_t(spec.df, size=(n, d))
    if kind is NoiseKind.EXPONENTIAL:
        return rng.exponential(1.0 / spec.rate, size=(n, d))
    if kind is NoiseKind.CHI2:
        return rng.chisquare(spec.k, size=(n, d))
    if kind is NoiseKind.SCALED_GAUSSIAN:
        scale = rng.random((n, 1))
        return scale * rng.standard_normal((n, d))
    raise InvalidNoiseSpecError(f"unsupported noise kind {kind}")


def sample_noise(spec: NoiseSpec, d: int, rng: np.random.Generator) -> np.ndarray:
    """One noise vector of width d"""
    return sample_noise_batch(spec, 1, d, rng)[0]


def noise_norms(spec: NoiseSpec, d: int, n_samples: int, rng: np.random.Generator,
                chunk: int = 10_000) -> np.ndarray:
    """Euclidean norms of n_samples draws, sampled in chunks to bound memory"""
    sizes = [min(chunk, n_samples - start) for start in range(0, n_samples, chunk)]
    norms = [np.linalg.norm(sample_noise_batch(spec, size, d, rng), axis=1)
             for size in tqdm(sizes, desc=f"noise {spec.kind.value} d={d}", disable=progress_disabled())]
    return np.concatenate(norms) if norms else np.zeros(0)


def norm_statistics(spec: NoiseSpec, d: int, n_samples: int, seed: int = 0) -> Tuple[float, float]:
    """(mean, std) of the noise norm by Monte Carlo"""
    norms = noise_norms(spec, d, n_samples, np.random.default_rng(seed))
    return float(norms.mean()), float(norms.std())
