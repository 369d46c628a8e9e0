import os

import numpy as np
import pytest

from .checkpoint import (MAGIC, file_digest, load_encoders, load_projection, parameter_digest, read_container,
                         save_encoders, save_projection, write_container)
from .encoders import encode_image, encode_text
from .errors import CorruptCheckpointError
from .projection import ProjectionConfig, ProjectionModule


@pytest.fixture
def encoder_file(tiny_encoders, tmp_path):
    path = str(tmp_path / "encoders.lncr")
    save_encoders(path, tiny_encoders)
    return path


def test_container_round_trip(tmp_path):
    path = str(tmp_path / "c.lncr")
    arrays = [("a", np.arange(6, dtype=float).reshape(2, 3)), ("scalar", np.array(0.5))]
    write_container(path, "test", {"z": 1, "a": [1, 2]}, arrays, ["x", "ünïcode", ""])
    container = read_container(path)
    assert container.kind == "test"
    assert container.meta == {"z": 1, "a": [1, 2]}
    np.testing.assert_array_equal(container.tensors["a"], arrays[0][1])
    assert container.tensors["scalar"].shape == ()
    assert container.strings == ["x", "ünïcode", ""]
    assert not os.path.exists(path + ".tmp")
    with open(path, "rb") as fh:
        assert fh.read(4) == MAGIC


def test_encoder_round_trip_is_byte_identical(encoder_file, tmp_path):
    loaded = load_encoders(encoder_file)
    again = str(tmp_path / "again.lncr")
    save_encoders(again, loaded)
    assert file_digest(again) == file_digest(encoder_file)
    assert parameter_digest(load_encoders(again)) == parameter_digest(loaded)


def test_loaded_encoders_match(tiny_encoders, encoder_file, rng):
    loaded = load_encoders(encoder_file)
    assert loaded.is_frozen
    assert loaded.vocab.tokens() == tiny_encoders.vocab.tokens()
    assert loaded.cfg == tiny_encoders.cfg

    tokens = tiny_encoders.tokenize("gray cat sleeps on a pillow")
    np.testing.assert_allclose(encode_text(loaded, tokens).values,
                               encode_text(tiny_encoders, tokens).values, atol=1e-5)
    image = rng.random((24, 24, 3))
    np.testing.assert_allclose(encode_image(loaded, image).values,
                               encode_image(tiny_encoders, image).values, atol=1e-5)


def test_projection_round_trip(tmp_path):
    phi = ProjectionModule(ProjectionConfig(d_joint=8, d_text=12, dropout=0.25), seed=2)
    path = str(tmp_path / "phi.lncr")
    save_projection(path, phi)
    loaded = load_projection(path)
    assert loaded.cfg == phi.cfg
    z = np.linspace(-1.0, 1.0, 8)
    np.testing.assert_allclose(loaded.project(z), phi.project(z), atol=1e-5)


def test_truncated_file(encoder_file):
    with open(encoder_file, "rb") as fh:
        raw = fh.read()
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        with open(encoder_file, "wb") as fh:
            fh.write(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_encoders(encoder_file)


def test_corrupt_headers(encoder_file, tmp_path):
    with open(encoder_file, "rb") as fh:
        raw = fh.read()

    bad_magic = str(tmp_path / "magic.lncr")
    with open(bad_magic, "wb") as fh:
        fh.write(b"XXXX" + raw[4:])
    with pytest.raises(CorruptCheckpointError):
        read_container(bad_magic)

    bad_version = str(tmp_path / "version.lncr")
    with open(bad_version, "wb") as fh:
        fh.write(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CorruptCheckpointError):
        read_container(bad_version)

    trailing = str(tmp_path / "trailing.lncr")
    with open(trailing, "wb") as fh:
        fh.write(raw + b"\x00")
    with pytest.raises(CorruptCheckpointError):
        read_container(trailing)

    with pytest.raises(CorruptCheckpointError):
        read_container(str(tmp_path / "missing.lncr"))


def test_wrong_kind(encoder_file, tmp_path):
    with pytest.raises(CorruptCheckpointError):
        load_projection(encoder_file)
    phi_path = str(tmp_path / "phi.lncr")
    save_projection(phi_path, ProjectionModule(ProjectionConfig(d_joint=8, d_text=8)))
    with pytest.raises(CorruptCheckpointError):
        load_encoders(phi_path)


def test_shape_mismatch(tmp_path):
    path = str(tmp_path / "phi.lncr")
    phi = ProjectionModule(ProjectionConfig(d_joint=8, d_text=8))
    tensors = [(n, p.data) for n, p in phi.named_parameters()]
    tensors[0] = (tensors[0][0], np.ones(3))
    write_container(path, "projection", {"config": phi.cfg.to_dict()}, tensors)
    with pytest.raises(CorruptCheckpointError):
        load_projection(path)

    write_container(path, "projection", {"config": phi.cfg.to_dict()}, tensors[1:])
    with pytest.raises(CorruptCheckpointError):
        load_projection(path)


def test_parameter_digest_tracks_values():
    a = ProjectionModule(ProjectionConfig(d_joint=8, d_text=8), seed=1)
    b = ProjectionModule(ProjectionConfig(d_joint=8, d_text=8), seed=1)
    c = ProjectionModule(ProjectionConfig(d_joint=8, d_text=8), seed=2)
    assert parameter_digest(a) == parameter_digest(b) != parameter_digest(c)
