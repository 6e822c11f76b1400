import json

import numpy as np
import pytest

from temo import autodiff as ad
from temo.embed import (AugmentationPolicy, ColorSemanticsProvider, EmbeddingFileError, ToyImageEncoder,
                        augment_views, area_resample_matrix, bilinear_resample_matrix, file_provider_load,
                        make_provider, toy_word_features, write_embedding_file)

PROMPT = "a red sphere and a blue sphere"


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_word_features_shape_and_red_row():
    wf = toy_word_features(PROMPT)
    assert wf.shape == (7, 512)
    red_img = np.broadcast_to([1.0, 0, 0], (1, 16, 16, 3))
    enc = ColorSemanticsProvider(0).image_features(red_img).data[0]
    assert cos(wf[1], enc) > 0.99


def test_red_and_blue_words_dissimilar():
    wf = toy_word_features(PROMPT)
    assert cos(wf[1], wf[5]) < 0.5


def test_global_image_is_row_mean(rng):
    p = ColorSemanticsProvider(2)
    imgs = rng.uniform(size=(3, 8, 8, 3))
    np.testing.assert_array_equal(p.global_image(imgs).data, p.image_features(imgs).data.mean(axis=0))


def test_provider_bitwise_deterministic(rng):
    imgs = rng.uniform(size=(2, 12, 12, 3))
    a, b = ColorSemanticsProvider(5), ColorSemanticsProvider(5)
    assert np.array_equal(a.image_features(imgs).data, b.image_features(imgs).data)
    assert np.array_equal(a.word_features(PROMPT), b.word_features(PROMPT))
    assert not np.array_equal(a.word_features(PROMPT), ColorSemanticsProvider(6).word_features(PROMPT))


def test_image_feature_gradient_wrt_pixels(rng):
    enc = ToyImageEncoder(1)
    w = rng.standard_normal(512)
    rep = ad.grad_check(lambda x: ad.sum(enc(x) * w), rng.uniform(size=(2, 10, 10, 3)), indices=range(0, 600, 7))
    assert rep.max_rel_error < 1e-4


def test_area_resample_rows_average():
    m = area_resample_matrix(8, 64)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m @ np.arange(64.0), np.arange(8) * 8 + 3.5)


def test_bilinear_full_window_is_identity():
    np.testing.assert_allclose(bilinear_resample_matrix(10, 10, 0.0, 10.0), np.eye(10), atol=1e-12)


def test_augment_identity_and_count(rng):
    imgs = rng.uniform(size=(5, 12, 12, 3))
    same = augment_views(imgs, AugmentationPolicy(1, (1.0, 1.0)))
    np.testing.assert_allclose(same.data, imgs, atol=1e-12)
    assert augment_views(imgs, AugmentationPolicy(2)).shape == (10, 12, 12, 3)


def test_augment_deterministic_and_differentiable(rng):
    imgs = rng.uniform(size=(2, 8, 8, 3))
    pol = AugmentationPolicy(2, seed=9)
    np.testing.assert_array_equal(augment_views(imgs, pol).data, augment_views(imgs, pol).data)
    w = rng.standard_normal((4, 8, 8, 3))
    rep = ad.grad_check(lambda x: ad.sum(augment_views(x, pol) * w), imgs)
    assert rep.max_rel_error < 1e-4


def test_augment_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(0)
    with pytest.raises(ValueError):
        AugmentationPolicy(1, (0.0, 1.0))


def test_embedding_file_roundtrip(tmp_path):
    g = np.random.default_rng(0).standard_normal(512).astype(np.float32)
    w = np.random.default_rng(1).standard_normal((7, 512)).astype(np.float32)
    path = write_embedding_file(tmp_path / "emb.json", g, w, PROMPT)
    p = file_provider_load(path)
    assert np.array_equal(p.stored_global_text, g) and np.array_equal(p.stored_word_features, w)
    np.testing.assert_allclose(p.global_text("red sphere"), w[1:3].astype(np.float64).mean(axis=0))
    assert p.image_features(np.zeros((1, 8, 8, 3))).shape == (1, 512)
    assert make_provider({"kind": "file", "path": str(path)}).word_features(PROMPT).shape == (7, 512)


def test_embedding_file_shape_error(tmp_path):
    path = write_embedding_file(tmp_path / "e.json", np.zeros(512), np.zeros((3, 100)))
    with pytest.raises(EmbeddingFileError, match="shape"):
        file_provider_load(path)


def test_embedding_file_missing_key(tmp_path):
    path = write_embedding_file(tmp_path / "e.json", np.zeros(512), np.zeros((3, 512)))
    manifest = json.loads(path.read_text())
    del manifest["arrays"]["global_text"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(EmbeddingFileError, match="global_text"):
        file_provider_load(path)


def test_embedding_file_missing():
    with pytest.raises(FileNotFoundError):
        file_provider_load("/nonexistent/e.json")


def test_unknown_provider_kind():
    with pytest.raises(ValueError):
        make_provider({"kind": "clip"})
