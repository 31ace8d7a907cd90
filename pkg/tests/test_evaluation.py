"""AUROC, evaluation over a class, heatmaps and report files."""
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import auroc_pairs
from pedenet.dataset import ClassDataset
from pedenet.dataset import TestSample as Sample
from pedenet.errors import InvalidArgumentError, UndefinedMetricError
from pedenet.evaluation import (
    EvalReport,
    auroc,
    evaluate_class,
    format_table,
    normalize_map,
    overlay,
    peak_within_mask,
    read_reports,
    render_heatmap,
    write_reports,
)
from pedenet.scoring import EmbeddingGallery, build_gallery


class TestAuroc:
    def test_worked_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_reversed(self):
        assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
        assert auroc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_against_pair_count(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding forces ties
            assert abs(auroc(scores, labels) - auroc_pairs(scores.tolist(), labels.tolist())) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-40, 40), st.booleans()), min_size=2, max_size=40))
    def test_invariant_under_monotone_map_and_complement(self, pairs):
        scores = np.array([p[0] for p in pairs]) / 8.0
        labels = np.array([p[1] for p in pairs], dtype=int)
        if labels.min() == labels.max():
            return
        a = auroc(scores, labels)
        assert 0.0 <= a <= 1.0
        assert auroc(np.exp(scores), labels) == pytest.approx(a, abs=1e-12)
        assert a + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_nan_and_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            auroc([0.1, np.nan], [0, 1])
        with pytest.raises(InvalidArgumentError):
            auroc([0.1, 0.2, 0.3], [0, 1])


class BrightnessModel:
    """Stand-in embedder whose only feature is mean brightness."""

    dtype = np.float64

    def embed_numpy(self, patches, batch_size=256):
        return patches.mean(axis=(1, 2, 3))[:, None]


def toy_class():
    rng = np.random.default_rng(1)
    train = [np.full((3, 128, 128), 0.5) + 0.01 * rng.random((3, 128, 128)) for _ in range(2)]
    tests = []
    for i in range(4):
        image = np.full((3, 128, 128), 0.5)
        mask = np.zeros((128, 128), dtype=np.uint8)
        if i >= 2:
            image[:, 70:100, 70:100] = 1.0
            mask[70:100, 70:100] = 1
        tests.append(Sample(image, mask, int(i >= 2), f"t{i}"))
    return ClassDataset("toy", train, tests)


class TestEvaluateClass:
    def test_bright_defect_is_found(self):
        ds = toy_class()
        model = BrightnessModel()
        gallery = build_gallery(model, ds.train_images, stride=16)
        result = evaluate_class(model, gallery, ds)
        r = result.report
        assert r.image_auroc == 1.0 and r.pixel_auroc > 0.9
        assert (r.n_test_images, r.n_anomalous, r.stride, r.gallery_rows) == (4, 2, 16, len(gallery))
        for m, s in zip(result.maps, ds.test_images):
            if s.label:
                assert peak_within_mask(m.scores, s.mask)

    def test_needs_both_labels(self):
        ds = toy_class()
        ds.test_images = ds.test_images[:2]
        with pytest.raises(UndefinedMetricError):
            evaluate_class(BrightnessModel(), EmbeddingGallery(np.zeros((1, 1)), 16), ds)


class TestPeak:
    def test_near_and_far(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:20, 10:20] = 1
        scores = np.zeros((64, 64))
        scores[25, 15] = 1.0
        assert peak_within_mask(scores, mask)
        scores[25, 15] = 0.0
        scores[40, 40] = 1.0
        assert not peak_within_mask(scores, mask)
        assert not peak_within_mask(scores, np.zeros_like(mask))


class TestHeatmap:
    def test_normalize(self):
        np.testing.assert_allclose(normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]])), [[0, 0.5], [0.25, 1]])
        assert np.all(normalize_map(np.zeros((4, 4))) == 0)
        assert np.all(normalize_map(np.full((4, 4), 2.0)) == 1)

    def test_zero_map_leaves_image_unchanged(self):
        image = np.random.default_rng(2).random((3, 32, 32))
        out = overlay(image, np.zeros((32, 32)))
        expected = np.rint(np.transpose(image, (1, 2, 0)) * 255).astype(np.uint8)
        assert np.abs(out.astype(int) - expected).max() <= 1

    def test_max_pixel_blends_to_red(self):
        image = np.zeros((3, 8, 8))
        scores = np.zeros((8, 8))
        scores[3, 4] = 7.0
        out = overlay(image, scores)
        assert tuple(out[3, 4]) == (153, 0, 0)
        assert tuple(out[0, 0]) == (0, 0, 0)

    def test_constant_positive_map_is_uniform(self):
        out = overlay(np.ones((3, 8, 8)), np.full((8, 8), 0.3))
        assert len(np.unique(out.reshape(-1, 3), axis=0)) == 1

    def test_size_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            overlay(np.zeros((3, 8, 8)), np.zeros((4, 4)))

    def test_png_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(3)
        image, scores = rng.random((3, 64, 64)), rng.random((64, 64))
        render_heatmap(image, scores, tmp_path / "a.png")
        render_heatmap(image, scores, tmp_path / "b.png")
        digest = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("a.png", "b.png")]
        assert digest[0] == digest[1]
        with Image.open(tmp_path / "a.png") as im:
            assert im.mode == "RGB" and im.size == (64, 64)


class TestReports:
    def test_record_round_trip(self):
        r = EvalReport("bottle", 0.9712345678901234, 0.99, 83, 63, 12.5, 16, 3380)
        assert EvalReport.parse(r.records()) == r

    def test_files(self, tmp_path):
        reports = [EvalReport("a", 0.9, 0.95, 10, 5, 1.0), EvalReport("b", 0.8, 0.85, 12, 6, 2.0)]
        table, kv = write_reports(reports, tmp_path / "out")
        assert read_reports(kv) == reports
        text = table.read_text()
        assert "mean" in text and "0.8500" in text and "0.9000" in text

    def test_single_class_table_has_no_mean(self):
        assert "mean" not in format_table([EvalReport("a", 0.9, 0.95, 10, 5, 1.0)])
