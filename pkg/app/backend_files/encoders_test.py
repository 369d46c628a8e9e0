import math

import numpy as np
import pytest

from conftest import tiny_encoder_config
from .encoders import (DualEncoder, EncoderConfig, PretrainConfig, PretrainPair, contrastive_loss, encode_captions,
                       encode_image, encode_images, encode_text, image_to_caption_recall, patchify,
                       pretrain_contrastive)
from .errors import EmptyInputError, FrozenParameterError, ShapeMismatchError
from .tensor import Parameter, Tensor, backward, no_grad
from .text_pipeline import extract_keyword_spans, get_default_lexicon, tag_pos


def keyworded(encoders, caption):
    tokens = encoders.tokenize(caption)
    return extract_keyword_spans(tokens, tag_pos(tokens, get_default_lexicon()))


def test_latent_shapes(tiny_encoders, rng):
    z_c = encode_text(tiny_encoders, tiny_encoders.tokenize("gray cat sleeps on a pillow"))
    z_i = encode_image(tiny_encoders, rng.random((24, 24, 3)))
    assert z_c.values.shape == z_i.values.shape == (16,)
    assert np.all(np.isfinite(z_c.values)) and np.all(np.isfinite(z_i.values))
    assert abs(np.linalg.norm(z_c.normalize().values) - 1.0) < 1e-12


def test_batch_matches_single(tiny_encoders, rng):
    captions = ["gray cat", "a small blue dog on a dark background", "run quickly now"]
    batched = encode_captions(tiny_encoders, captions, batch_size=2)
    for row, caption in zip(batched, captions):
        single = encode_text(tiny_encoders, tiny_encoders.tokenize(caption)).values
        np.testing.assert_allclose(row, single, atol=1e-10)

    images = rng.random((3, 24, 24, 3))
    np.testing.assert_allclose(encode_images(tiny_encoders, images)[1],
                               encode_image(tiny_encoders, images[1]).values, atol=1e-10)


def test_padding_after_eos_has_no_effect(tiny_encoders):
    """Causal attention: positions after [EOS] never reach the pooled state"""
    short = tiny_encoders.tokenize("gray cat").ids
    long = tiny_encoders.tokenize("a small blue dog on a dark background").ids
    with no_grad():
        together = tiny_encoders.text.encode_ids([short, long]).numpy()
        alone = tiny_encoders.text.encode_ids([short]).numpy()
    np.testing.assert_allclose(together[0], alone[0], atol=1e-10)


def test_injection_replaces_token_embedding(tiny_encoders):
    """Injecting the embedding row of a word equals encoding that word in place of the span"""
    vocab = tiny_encoders.vocab
    table = tiny_encoders.text.token_embedding.data
    row = Tensor(table[vocab.lookup("dog")])
    injected = encode_text(tiny_encoders, keyworded(tiny_encoders, "gray cat sleeps on a pillow"), row).values
    plain = encode_text(tiny_encoders, tiny_encoders.tokenize("dog sleeps on dog")).values
    np.testing.assert_allclose(injected, plain, atol=1e-10)


def test_injection_per_span(tiny_encoders):
    vocab = tiny_encoders.vocab
    table = tiny_encoders.text.token_embedding.data
    rows = {0: Tensor(table[vocab.lookup("dog")]), 1: Tensor(table[vocab.lookup("cat")])}
    tokens = keyworded(tiny_encoders, "gray cat sleeps on a pillow")
    injected = encode_text(tiny_encoders, tokens, rows).values
    plain = encode_text(tiny_encoders, tiny_encoders.tokenize("dog sleeps on cat")).values
    np.testing.assert_allclose(injected, plain, atol=1e-10)

    with pytest.raises(ShapeMismatchError):
        encode_text(tiny_encoders, tokens, {0: rows[0]})
    with pytest.raises(ShapeMismatchError):
        encode_text(tiny_encoders, tokens, {0: rows[0], 1: rows[1], 2: rows[1]})


def test_injection_errors(tiny_encoders):
    with pytest.raises(ShapeMismatchError):
        encode_text(tiny_encoders, tiny_encoders.tokenize("run quickly now"), Tensor(np.zeros(16)))
    with pytest.raises(ShapeMismatchError):
        encode_text(tiny_encoders, keyworded(tiny_encoders, "gray cat"), Tensor(np.zeros(8)))


def test_input_validation(tiny_encoders, rng):
    with pytest.raises(ShapeMismatchError):
        encode_image(tiny_encoders, rng.random((16, 16, 3)))
    with pytest.raises(ValueError):
        encode_image(tiny_encoders, rng.random((24, 24, 3)) + 1.0)
    with pytest.raises(EmptyInputError):
        tiny_encoders.text.encode_ids([])
    with pytest.raises(ShapeMismatchError):
        tiny_encoders.text.encode_ids([[1] + [5] * 30 + [2]])


def test_frozen_encoders(tiny_encoders):
    assert tiny_encoders.is_frozen
    with pytest.raises(FrozenParameterError):
        tiny_encoders.text.token_embedding.assign(np.zeros((len(tiny_encoders.vocab), 16)))


def test_gradient_flows_to_injected_row_only(tiny_encoders):
    row = Parameter(np.full(16, 0.1), name="row")
    z = tiny_encoders.text.encode(keyworded(tiny_encoders, "gray cat sleeps"), row)
    grads = backward((z * z).sum())
    assert set(grads) == {row.node_id}
    assert np.any(grads[row.node_id] != 0.0)


def test_parameter_names_unique(tiny_encoders):
    names = [name for name, _ in tiny_encoders.named_parameters()]
    assert len(names) == len(set(names))
    assert "text.token_embedding" in names and "logit_scale" in names


def test_patchify_order():
    images = np.arange(2 * 4 * 4 * 3, dtype=float).reshape(2, 4, 4, 3)
    patches = patchify(images, 2)
    assert patches.shape == (2, 4, 12)
    np.testing.assert_array_equal(patches[0, 1].reshape(2, 2, 3), images[0, 0:2, 2:4])
    np.testing.assert_array_equal(patches[1, 2].reshape(2, 2, 3), images[1, 2:4, 0:2])


def test_config_round_trip_and_validation():
    cfg = tiny_encoder_config(40)
    assert EncoderConfig.from_dict({**cfg.to_dict(), "unused": 1}) == cfg
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, d_text=15, n_heads_text=2).validate()
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, image_side=20, patch_size=8).validate()


# ---------------- contrastive pre-training ----------------

def test_contrastive_loss_uniform_logits():
    """Identical latents give uniform logits: each cross-entropy is ln B"""
    batch = 4
    z = Tensor(np.ones((batch, 8)))
    loss = contrastive_loss(z, z, Tensor(np.array(0.0)))
    assert abs(loss.item() - math.log(batch)) < 1e-12


def test_contrastive_loss_at_init(tiny_encoders, rng):
    z_image = tiny_encoders.image.encode_batch(rng.random((4, 24, 24, 3)))
    z_text = tiny_encoders.text.encode_ids([tiny_encoders.tokenize(c).ids for c in
                                            ["gray cat", "a dog", "red cat", "blue dog"]])
    loss = contrastive_loss(z_image, z_text, tiny_encoders.logit_scale).item()
    assert np.isfinite(loss) and loss > 0.0
    with pytest.raises(ShapeMismatchError):
        contrastive_loss(Tensor(np.ones((1, 16))), Tensor(np.ones((1, 16))), tiny_encoders.logit_scale)


def _toy_pairs(vocab_words, rng):
    """Four solid-colour scenes, one caption each"""
    colours = {"red": (1.0, 0.0, 0.0), "blue": (0.0, 0.0, 1.0), "white": (1.0, 1.0, 1.0), "gray": (0.5, 0.5, 0.5)}
    pairs = []
    for group, (name, rgb) in enumerate(colours.items()):
        image = np.clip(np.ones((24, 24, 3)) * rgb + rng.normal(0, 0.02, (24, 24, 3)), 0.0, 1.0)
        pairs.append(PretrainPair(image, f"a {name} cat", group))
    return pairs


def test_pretrain_reduces_loss(tiny_vocab, rng):
    pairs = _toy_pairs(tiny_vocab, rng)
    cfg = tiny_encoder_config(len(tiny_vocab))
    result = pretrain_contrastive(pairs, cfg, tiny_vocab,
                                  PretrainConfig(steps=60, batch_size=4, lr=3e-3, seed=0))
    losses = result.losses
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < losses[0]
    assert result.encoders.is_frozen
    assert result.encoders.logit_scale.item() <= math.log(100.0) + 1e-12
    assert 0.0 <= image_to_caption_recall(result.encoders, pairs) <= 1.0


def test_pretrain_is_deterministic(tiny_vocab, rng):
    pairs = _toy_pairs(tiny_vocab, rng)
    hparams = PretrainConfig(steps=5, batch_size=4, lr=1e-3, seed=7)
    first = pretrain_contrastive(pairs, tiny_encoder_config(len(tiny_vocab)), tiny_vocab, hparams)
    second = pretrain_contrastive(pairs, tiny_encoder_config(len(tiny_vocab)), tiny_vocab, hparams)
    assert first.losses == second.losses
    for a, b in zip(first.encoders.parameters(), second.encoders.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_pretrain_needs_two_groups(tiny_vocab, rng):
    pairs = _toy_pairs(tiny_vocab, rng)[:1]
    with pytest.raises(EmptyInputError):
        pretrain_contrastive(pairs, tiny_encoder_config(len(tiny_vocab)), tiny_vocab, PretrainConfig(steps=1))
    with pytest.raises(EmptyInputError):
        image_to_caption_recall(DualEncoder(tiny_encoder_config(len(tiny_vocab)), tiny_vocab), [])
