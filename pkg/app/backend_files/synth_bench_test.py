import numpy as np
import pytest

from .errors import EmptyInputError, InputFileError, NoKeywordsError
from .retrieval import metric_report, truth_map
from .synth_bench import (CAPTION_TEMPLATES, FILLER_LINES, MUTABLE, PARAPHRASE_TEMPLATES, SIZES, BenchmarkRecord,
                          Scene, all_scenes, brute_force_targets, build_cir_benchmark, caption,
                          benchmark_vocabulary, corpus_entries, fill_caption, oracle_rank, pretrain_pairs,
                          read_corpus, read_gallery, read_records, render, render_all, scene_by_id, scene_id,
                          split_pretrain_pairs, write_corpus, write_gallery, write_records)
from .text_pipeline import Vocabulary, extract_keyword_spans, get_default_lexicon, tag_pos, tokenize


@pytest.fixture(scope="module")
def bench():
    return build_cir_benchmark(seed=0)


def keyword_count(text, vocab):
    tokens = tokenize(text, vocab, 32)
    return len(extract_keyword_spans(tokens, tag_pos(tokens, get_default_lexicon())).keyword_spans)


# ---------------- scenes & rendering ----------------

def test_scene_enumeration():
    scenes = all_scenes()
    assert len(scenes) == 288 == len(set(scenes))
    assert scene_id(7) == "scene_007"
    assert scene_by_id("scene_007") == scenes[7]
    assert scenes[7].scene_id == "scene_007"
    with pytest.raises(EmptyInputError):
        scene_by_id("scene_999")
    with pytest.raises(ValueError):
        Scene("unicorn", "red", "small", "white")


def test_renders_are_distinct_and_deterministic():
    images = render_all(all_scenes())
    assert images.shape == (288, 24, 24, 3)
    assert images.min() >= 0.0 and images.max() <= 1.0
    flat = images.reshape(288, -1)
    assert len({row.tobytes() for row in flat}) == 288
    np.testing.assert_array_equal(render(all_scenes()[5]), images[5])


def test_render_sizes_differ_in_area():
    small = Scene("ball", "red", "small", "white")
    large = Scene("ball", "red", "large", "white")
    area = lambda img: np.sum(np.all(img == (0.90, 0.10, 0.10), axis=-1))
    assert area(render(large)) > area(render(small)) > 0


# ---------------- captions ----------------

def test_every_caption_has_two_keyword_spans():
    texts = [fill_caption(t, s) for s in all_scenes() for t in CAPTION_TEMPLATES + PARAPHRASE_TEMPLATES]
    vocab = Vocabulary.build(texts)
    for text in texts:
        assert keyword_count(text, vocab) >= 2, text


def test_filler_lines_have_no_keywords():
    vocab = Vocabulary.build(FILLER_LINES)
    for line in FILLER_LINES:
        with pytest.raises(NoKeywordsError):
            keyword_count(line, vocab)


def test_caption_choice():
    scene = Scene("cat", "gray", "small", "grid")
    assert caption(scene) == "a small gray cat on a grid background"
    rng_a, rng_b = np.random.default_rng(2), np.random.default_rng(2)
    assert caption(scene, rng=rng_a) == caption(scene, rng=rng_b)
    with pytest.raises(EmptyInputError):
        caption(scene, templates=())


def test_pretrain_pairs_and_split():
    pairs = pretrain_pairs(templates=CAPTION_TEMPLATES[:2])
    assert len(pairs) == 576
    assert pairs[3].group == 1 and pairs[3].caption == fill_caption(CAPTION_TEMPLATES[1], all_scenes()[1])
    train, held = split_pretrain_pairs(pairs, held_out=0.1, seed=0)
    assert len(train) + len(held) == 576
    assert len(held) == 58
    seen = {(p.group, p.caption) for p in train}
    assert not any((p.group, p.caption) in seen for p in held)


# ---------------- benchmark ----------------

def test_benchmark_shape(bench):
    assert len(bench.dev) == 96 and len(bench.test) == 192
    assert len(bench.train_scenes) == 144
    assert bench.gallery_ids[:2] == ["scene_000", "scene_001"]
    assert len(bench.corpus) == 144 * (len(CAPTION_TEMPLATES) + len(PARAPHRASE_TEMPLATES)) + len(FILLER_LINES)


def test_queries_have_two_brute_force_targets(bench):
    for record in bench.dev + bench.test:
        attribute, value = record.mutation
        assert attribute in MUTABLE
        assert len(record.targets) == len(SIZES) == 2
        reference = scene_by_id(record.reference_id)
        assert record.targets == brute_force_targets(reference, attribute, value)
        assert record.reference_id not in record.targets


def test_query_scenes_are_held_out(bench):
    train_ids = {s.scene_id for s in bench.train_scenes}
    for record in bench.dev + bench.test:
        assert record.reference_id not in train_ids


def test_splits_are_disjoint(bench):
    dev = {(r.reference_id, r.mutation) for r in bench.dev}
    test = {(r.reference_id, r.mutation) for r in bench.test}
    assert len(dev) == 96 and len(test) == 192
    assert not dev & test
    assert not {r.query_id for r in bench.dev} & {r.query_id for r in bench.test}


def test_benchmark_is_deterministic(bench):
    again = build_cir_benchmark(seed=0)
    assert [r.to_json() for r in again.test] == [r.to_json() for r in bench.test]
    other = build_cir_benchmark(seed=1)
    assert [r.to_json() for r in other.test] != [r.to_json() for r in bench.test]
    with pytest.raises(ValueError):
        build_cir_benchmark(seed=0, n_dev=5000)
    with pytest.raises(ValueError):
        bench.split("train")


def test_oracle_is_perfect(bench):
    for split in ("dev", "test"):
        records = bench.split(split)
        report = metric_report(oracle_rank(records), truth_map(records))
        assert report["R@1"] == 1.0
        assert report["mAP@5"] == 1.0


def test_oracle_needs_mutation():
    record = BenchmarkRecord("q", "scene_000", "is red", ["scene_010"])
    with pytest.raises(EmptyInputError):
        oracle_rank([record])


def test_record_validation():
    with pytest.raises(EmptyInputError):
        BenchmarkRecord("q", "scene_000", "is red", [])
    with pytest.raises(ValueError):
        BenchmarkRecord("q", "scene_000", "is red", ["scene_000"])


def test_corpus_entries(bench):
    entries = corpus_entries(bench)
    assert len(entries) == len(bench.corpus)
    unpaired = [e.text for e in entries if e.image is None]
    assert sorted(unpaired) == sorted(FILLER_LINES)
    assert entries[0].image.shape == (24, 24, 3)


def test_vocabulary_covers_benchmark(bench):
    vocab = benchmark_vocabulary(bench, extra_texts=["a photo of [$] that [cond]"])
    for record in bench.dev + bench.test:
        tokens = tokenize(record.condition, vocab, 32)
        assert 3 not in tokens.ids  # [UNK]
    assert "photo" in vocab and "cond" in vocab


# ---------------- files ----------------

def test_file_round_trips(bench, tmp_path):
    path = str(tmp_path / "test.jsonl")
    write_records(path, bench.test)
    loaded = read_records(path)
    assert [r.to_json() for r in loaded] == [r.to_json() for r in bench.test]
    assert all(r.mutation is None for r in loaded)
    first = open(path, encoding="utf-8").readline()
    assert first.startswith('{"condition": ')

    gallery_path = str(tmp_path / "gallery.jsonl")
    write_gallery(gallery_path, all_scenes())
    gallery = read_gallery(gallery_path)
    assert gallery[10] == ("scene_010", all_scenes()[10])

    corpus_path = str(tmp_path / "corpus.txt")
    write_corpus(corpus_path, bench.corpus)
    assert read_corpus(corpus_path) == bench.corpus


def test_unreadable_files(tmp_path):
    with pytest.raises(InputFileError, match="cannot read"):
        read_corpus(str(tmp_path / "missing.txt"))

    broken = tmp_path / "dev.jsonl"
    broken.write_text('{"query_id": "q0", "reference_id": "scene_000"\n', encoding="utf-8")
    with pytest.raises(InputFileError, match="malformed"):
        read_records(str(broken))

    broken.write_text('{"query_id": "q0"}\n', encoding="utf-8")
    with pytest.raises(InputFileError) as info:
        read_records(str(broken))
    assert info.value.describe().startswith("synth-bench: malformed file")

    gallery = tmp_path / "gallery.jsonl"
    gallery.write_text('{"item_id": "scene_000", "scene": {"obj": "unicorn"}}\n', encoding="utf-8")
    with pytest.raises(InputFileError):
        read_gallery(str(gallery))

    latin = tmp_path / "latin.txt"
    latin.write_bytes("caf\xe9 au lait\n".encode("latin-1"))
    with pytest.raises(InputFileError):
        read_corpus(str(latin))
