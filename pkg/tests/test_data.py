#!/usr/bin/env python
# -*- coding: utf-8 -*-

import numpy as np
import pytest
import torch

from app.core.exceptions import ConfigurationError, DataError, ShapeError
from app.data.dataset import (
    CaptionedImageDataset,
    PairedExample,
    iter_epoch,
    load_dataset,
    next_batch,
    pixels_to_tensor,
    read_captions_tsv,
    save_dataset,
    tensor_to_pixels,
)
from app.data.toy import SHAPE_COLORS, class_label, generate_toy_dataset, shape_mask
from app.data.vocab import Vocabulary, build_vocab, detokenize, split_words, tokenize
from app.schemas.data import ToySpec


# ------------------------ 合成数据 ------------------------
def test_toy_dataset_is_deterministic():
    spec = ToySpec(n_train=8, n_test=4, image_size=32, seed=3)
    a_train, a_test = generate_toy_dataset(spec)
    b_train, b_test = generate_toy_dataset(spec)
    for a, b in zip(list(a_train) + list(a_test), list(b_train) + list(b_test)):
        assert a.image_id == b.image_id
        assert a.captions == b.captions
        assert np.array_equal(a.pixels, b.pixels)
    other, _ = generate_toy_dataset(spec.model_copy(update={"seed": 4}))
    assert any(not np.array_equal(x.pixels, y.pixels) for x, y in zip(a_train, other))


def test_toy_dataset_sizes_and_ids(toy_train, toy_test):
    assert len(toy_train) == 12 and len(toy_test) == 6
    assert toy_train.image_size == 32
    assert toy_train[0].image_id == "train_00000"
    assert toy_test[5].image_id == "test_00005"


def test_toy_shapes_fit_and_are_drawn(toy_train):
    quadrant = toy_train.image_size // 2
    for ex in toy_train:
        assert 1 <= len(ex.shapes) <= 3
        assert len({s.position for s in ex.shapes}) == len(ex.shapes)
        for s in ex.shapes:
            x0, y0, x1, y1 = s.bbox
            assert x0 // quadrant == x1 // quadrant and y0 // quadrant == y1 // quadrant
            assert 0 <= x0 and x1 < toy_train.image_size
            # 形状中心像素就是形状颜色
            assert tuple(ex.pixels[s.cy, s.cx]) == tuple(SHAPE_COLORS[s.color])
            assert 0 <= class_label(s) < 15


def test_toy_captions_describe_shapes(toy_train):
    for ex in toy_train:
        assert len(ex.captions) >= 2 * len(ex.shapes)
        for s in ex.shapes:
            assert any(s.color in c and s.kind in c for c in ex.captions)
        assert all(ex.background in c for c in ex.captions if "background" in c)


@pytest.mark.parametrize("spec", [
    ToySpec(n_train=4, n_test=4, image_size=30),
    ToySpec(n_train=4, n_test=4, image_size=12),
    ToySpec(n_train=0, n_test=4, image_size=32),
])
def test_toy_rejects_invalid_parameters(spec):
    with pytest.raises(ConfigurationError):
        generate_toy_dataset(spec)


def _nearest_color(rgb):
    return min(SHAPE_COLORS, key=lambda name: sum((int(a) - b) ** 2 for a, b in zip(rgb, SHAPE_COLORS[name])))


def test_caption_color_words_match_pixels():
    train, _ = generate_toy_dataset(ToySpec(n_train=500, n_test=1, image_size=32, seed=3))
    for ex in train:
        size = ex.pixels.shape[0]
        for s in ex.shapes:
            region = ex.pixels[shape_mask(s.kind, s.cx, s.cy, s.radius, size)]
            colors, counts = np.unique(region, axis=0, return_counts=True)
            word = _nearest_color(colors[int(np.argmax(counts))])
            located = [c for c in ex.captions if f"{s.kind} in the {s.position} " in c]
            assert len(located) == 1, ex.image_id
            assert located[0].split()[4] == word, (ex.image_id, located[0])


# ------------------------ 词表与分词 ------------------------
def test_build_vocab_order_and_reserved_ids():
    vocab = build_vocab(["b a a", "c a b", "d"])
    assert vocab.tokens == ("<pad>", "<unk>", "a", "b", "c", "d")
    assert vocab.pad_id == 0 and vocab.unk_id == 1
    assert build_vocab(["d", "c a b", "b a a"]).tokens == vocab.tokens
    with pytest.raises(DataError):
        build_vocab([])


def test_vocab_covers_toy_corpus(toy_train, toy_vocab):
    for text in toy_train.iter_captions():
        assert all(w in toy_vocab for w in split_words(text))


def test_vocab_save_load(tmp_path):
    vocab = build_vocab(["red circle", "blue square"])
    loaded = Vocabulary.load(vocab.save(tmp_path / "vocab.txt"))
    assert loaded.tokens == vocab.tokens
    assert loaded.digest() == vocab.digest()
    with pytest.raises(DataError):
        Vocabulary.load(tmp_path / "missing.txt")


def test_tokenize_cleans_truncates_and_pads():
    vocab = build_vocab(["a red circle on a blue background"])
    cap = tokenize("A RED, circle!", vocab, t_max=5)
    assert detokenize(cap, vocab) == ["a", "red", "circle"]
    assert cap.length == 3 and cap.t_max == 5
    assert cap.ids[3:] == (vocab.pad_id, vocab.pad_id)

    long = tokenize("a red circle on a blue background", vocab, t_max=4)
    assert long.length == 4

    unknown = tokenize("a green circle", vocab, t_max=4)
    assert unknown.token_ids[1] == vocab.unk_id
    with pytest.raises(DataError):
        tokenize("a green circle", vocab, strict=True)


@pytest.mark.parametrize("text", ["", "  ", "?!,."])
def test_tokenize_rejects_empty(text):
    with pytest.raises(DataError):
        tokenize(text, build_vocab(["a"]))


# ------------------------ 批采样 ------------------------
def test_next_batch_has_distinct_images(toy_train, toy_vocab):
    rng = np.random.default_rng(0)
    for _ in range(5):
        batch = next_batch(toy_train, 6, rng, toy_vocab, t_max=16)
        assert batch.size == 6
        assert len(set(batch.image_ids)) == 6
        assert batch.images.shape == (6, 3, 32, 32)
        assert batch.mask.shape == (6, 16)
        for image_id, caption in zip(batch.image_ids, batch.captions):
            assert caption.raw in toy_train.get(image_id).captions
    with pytest.raises(DataError):
        next_batch(toy_train, 13, rng, toy_vocab)


def test_next_batch_draws_images_uniformly(toy_train, toy_vocab):
    rng = np.random.default_rng(0)
    counts = {ex.image_id: 0 for ex in toy_train}
    draws = 10_000
    for _ in range(draws):
        for image_id in next_batch(toy_train, 4, rng, toy_vocab, t_max=16).image_ids:
            counts[image_id] += 1
    expected = draws * 4 / len(toy_train)
    for image_id, n in counts.items():
        assert abs(n - expected) <= 0.05 * expected, image_id


def test_full_size_batch_is_a_permutation(toy_train, toy_vocab):
    batch = next_batch(toy_train, len(toy_train), np.random.default_rng(5), toy_vocab, t_max=16)
    assert sorted(batch.image_ids) == sorted(ex.image_id for ex in toy_train)


def test_iter_epoch_covers_dataset_once(toy_train, toy_vocab):
    batches = list(iter_epoch(toy_train, 5, np.random.default_rng(0), toy_vocab))
    assert len(batches) == 2
    seen = [i for b in batches for i in b.image_ids]
    assert len(seen) == len(set(seen)) == 10


def test_pixel_tensor_conversion():
    pixels = np.array([[[0, 127, 255]]], dtype=np.uint8)
    t = pixels_to_tensor(pixels)
    assert t.shape == (3, 1, 1)
    assert t[0].item() == pytest.approx(-1.0) and t[2].item() == pytest.approx(1.0)
    assert np.array_equal(tensor_to_pixels(t), pixels)
    assert np.array_equal(tensor_to_pixels(torch.full((3, 1, 1), 5.0)), np.full((1, 1, 3), 255, dtype=np.uint8))


def test_dataset_validation():
    pixels = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(DataError):
        PairedExample("x", pixels, ())
    with pytest.raises(ShapeError):
        PairedExample("x", np.zeros((8, 6, 3), dtype=np.uint8), ("a",))
    ex = PairedExample("x", pixels, ("a",))
    with pytest.raises(DataError):
        CaptionedImageDataset([ex, ex])
    with pytest.raises(ShapeError):
        CaptionedImageDataset([ex, PairedExample("y", np.zeros((16, 16, 3), dtype=np.uint8), ("a",))])
    with pytest.raises(DataError):
        CaptionedImageDataset([])


def test_save_and_load_dataset(tmp_path, toy_test):
    save_dataset(toy_test, tmp_path / "test")
    loaded = load_dataset(tmp_path / "test", name="test")
    assert len(loaded) == len(toy_test)
    for a, b in zip(toy_test, loaded):
        assert a.image_id == b.image_id
        assert a.captions == b.captions
        assert a.shapes == b.shapes
        assert a.background == b.background
        assert np.array_equal(a.pixels, b.pixels)


def test_read_captions_tsv(tmp_path):
    with_header = tmp_path / "a.tsv"
    with_header.write_text("image_id\tcaption\nimg1\ta red circle\nimg2\ta blue square\n", encoding="utf-8")
    assert read_captions_tsv(with_header) == [("img1", "a red circle"), ("img2", "a blue square")]
    bare = tmp_path / "b.tsv"
    bare.write_text("img1\ta red circle\n\n", encoding="utf-8")
    assert read_captions_tsv(bare) == [("img1", "a red circle")]
    broken = tmp_path / "c.tsv"
    broken.write_text("img1 only\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_captions_tsv(broken)
    with pytest.raises(DataError):
        read_captions_tsv(tmp_path / "missing.tsv")
