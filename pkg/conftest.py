import numpy as np
import pytest

from app.backend_files.encoders import DualEncoder, EncoderConfig
from app.backend_files.projection import ProjectionConfig, ProjectionModule
from app.backend_files.text_pipeline import Vocabulary

TINY_TEXTS = (
    "gray cat sleeps on a pillow",
    "a russian blue cat is gray and cute",
    "a photo of [$] that is red instead",
    "a large red cat on a white background",
    "a small blue dog on a dark background",
    "change the cat to a dog",
    "run quickly now",
)


def tiny_encoder_config(vocab_size: int) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, d_text=16, n_layers_text=1, n_heads_text=2, max_seq_len=24,
                         d_image=16, n_layers_image=1, n_heads_image=2, patch_size=8, image_side=24,
                         d_joint=16, init_std=0.2)


@pytest.fixture
def tiny_vocab():
    return Vocabulary.build(TINY_TEXTS)


@pytest.fixture
def tiny_encoders(tiny_vocab):
    """d=16, one layer per tower, random weights, frozen"""
    encoders = DualEncoder(tiny_encoder_config(len(tiny_vocab)), tiny_vocab, seed=3)
    encoders.freeze()
    return encoders


@pytest.fixture
def tiny_phi():
    return ProjectionModule(ProjectionConfig(d_joint=16, d_text=16, dropout=0.0), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
