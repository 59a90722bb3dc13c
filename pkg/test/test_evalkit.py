import os

import numpy as np
import pytest
from PIL import Image

from sgseg.checkpoint import save_checkpoint
from sgseg.config import DetectorConfig, GeneratorConfig, SegNetConfig
from sgseg.data_forge import generate_dataset, load_samples
from sgseg.evalkit import (
    MetricsReport,
    SampleScore,
    ablation_summary,
    evaluate_ablation,
    evaluate_mode,
    export_attention_maps,
    label_metrics,
    normalize_map,
    overlay,
    seg_metrics,
)
from sgseg.exceptions import DataValidationException, ShapeException, UsageException
from sgseg.lerg_detector import LERGDetector, SimpleLocalizer
from sgseg.locparse import LocationLabel
from sgseg.seg_net import LanguageGuidedUNet

SMALL_SEG = SegNetConfig(image_size=32, widths=(4, 8, 8, 16), strides=(2, 2, 2, 2), text_dim=16,
                         text_heads=2, text_layers=1, attn_dim=8, attn_heads=2)
SMALL_DET = DetectorConfig(image_size=32, widths=(4, 8, 8), strides=(2, 2, 2), hidden_dim=8, heads=2,
                           num_queries=4, decoder_layers=1)


def _mask(cells):
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask.flat[list(cells)] = 1
    return mask


def test_seg_metrics_identical():
    mask = _mask(range(30))
    assert seg_metrics(mask, mask) == (1.0, 1.0, 1.0)


def test_seg_metrics_disjoint():
    score = seg_metrics(_mask(range(10)), _mask(range(10, 20)))
    assert score.dice == 0.0
    assert score.jaccard == 0.0
    assert score.accuracy == pytest.approx(1 - 20 / 400)


def test_seg_metrics_subset():
    score = seg_metrics(_mask(range(50)), _mask(range(100)))
    assert score.dice == pytest.approx(100 / 150)
    assert score.jaccard == pytest.approx(0.5)


def test_seg_metrics_blank_on_blank():
    blank = np.zeros((8, 8), dtype=np.uint8)
    assert seg_metrics(blank, blank) == (1.0, 1.0, 1.0)


def test_seg_metrics_dice_jaccard_relation():
    rng = np.random.default_rng(0)
    for _ in range(5):
        pred = rng.integers(0, 2, size=(16, 16))
        gt = rng.integers(0, 2, size=(16, 16))
        score = seg_metrics(pred, gt)
        assert score.jaccard == pytest.approx(score.dice / (2 - score.dice))
        assert score.jaccard <= score.dice


def test_seg_metrics_errors():
    with pytest.raises(DataValidationException):
        seg_metrics(np.full((4, 4), 255), np.zeros((4, 4)))
    with pytest.raises(ShapeException):
        seg_metrics(np.zeros((4, 4)), np.zeros((4, 5)))


def test_label_metrics_identical_and_blank():
    labels = [LocationLabel.from_str(s) for s in ("100001", "010000", "000000")]
    assert label_metrics(labels, labels).macro_f1 == 1.0
    assert label_metrics(labels, labels).exact_match == 1.0
    blanks = [LocationLabel()] * 4
    assert label_metrics(blanks, blanks).macro_f1 == 1.0


def test_label_metrics_counts():
    # region 0: TP=8, FP=2, FN=2; other regions empty
    pred = [(1, 0, 0, 0, 0, 0)] * 10 + [(0,) * 6] * 2
    gt = [(1, 0, 0, 0, 0, 0)] * 8 + [(0,) * 6] * 2 + [(1, 0, 0, 0, 0, 0)] * 2
    metrics = label_metrics(pred, gt)
    assert metrics.precision[0] == pytest.approx(0.8)
    assert metrics.recall[0] == pytest.approx(0.8)
    assert metrics.f1[0] == pytest.approx(0.8)
    assert metrics.macro_f1 == pytest.approx((0.8 + 5) / 6)
    assert metrics.exact_match == pytest.approx(8 / 12)
    assert metrics.to_mapping()["f1.left_upper"] == pytest.approx(0.8)


def test_label_metrics_length_mismatch():
    with pytest.raises(ShapeException):
        label_metrics([LocationLabel()], [])


def test_metrics_report_text_and_files(tmp_path):
    samples = [
        SampleScore("a.png", 1.0, 1.0, 1.0, "No pulmonary infection.", "No pulmonary infection."),
        SampleScore("b.png", 0.5, 0.25, 0.5, "x", "y"),
    ]
    report = MetricsReport("self-guided", samples, seed=3, checkpoints={"seg": "s@1", "det": "d@2"},
                           provenance="sgseg 0.1.0")
    assert report.dice == pytest.approx(0.625)
    assert report.report_exact_match == 0.5
    assert report.dice_by_report_match() == (1.0, 0.25)

    text = report.to_text()
    assert "dice = 0.625000\n" in text
    assert "checkpoint.det = d@2\n" in text
    assert "mode = self-guided\n" in text

    metrics_path, samples_path = report.write(str(tmp_path))
    assert os.path.basename(metrics_path) == "metrics_self_guided.txt"
    assert open(metrics_path).read() == text
    rows = open(samples_path).read().splitlines()
    assert rows[0] == "# sgseg 0.1.0"
    assert rows[1].startswith("image,accuracy,dice")
    assert rows[3].endswith(",0")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    manifest = generate_dataset(GeneratorConfig(num_samples=5, image_size=32, seed=1), str(root / "data"))
    seg_path = str(root / "segmenter.ckpt")
    det_path = str(root / "detector.ckpt")
    simple_path = str(root / "detector_simple.ckpt")
    save_checkpoint(seg_path, LanguageGuidedUNet(SMALL_SEG, seed=0))
    save_checkpoint(det_path, LERGDetector(SMALL_DET, seed=0))
    save_checkpoint(simple_path, SimpleLocalizer(DetectorConfig(image_size=32, architecture="simple")))
    return manifest, seg_path, det_path, simple_path


@pytest.mark.parametrize("mode", ["full-text", "text-free", "self-guided"])
def test_evaluate_mode(dataset, mode):
    manifest = dataset[0]
    detector = LERGDetector(SMALL_DET, seed=0) if mode == "self-guided" else None
    report = evaluate_mode(mode, LanguageGuidedUNet(SMALL_SEG), manifest, detector=detector, batch_size=2)

    assert len(report.samples) == 5
    assert 0.0 <= report.dice <= 1.0
    assert [s.image for s in report.samples] == manifest.image_paths
    if mode == "self-guided":
        assert report.labels is not None
        assert all(s.generated_report is not None for s in report.samples)
    else:
        assert report.labels is None
        assert report.report_exact_match is None


def test_evaluate_mode_errors(dataset):
    manifest = dataset[0]
    with pytest.raises(UsageException):
        evaluate_mode("self-guided", LanguageGuidedUNet(SMALL_SEG), manifest)
    with pytest.raises(UsageException):
        evaluate_mode("half-text", LanguageGuidedUNet(SMALL_SEG), manifest)


def test_text_free_ignores_reports(dataset):
    manifest = dataset[0]
    model = LanguageGuidedUNet(SMALL_SEG, seed=2)
    a = evaluate_mode("text-free", model, manifest)
    b = evaluate_mode("text-free", model, manifest)
    assert [s.dice for s in a.samples] == [s.dice for s in b.samples]


def test_ablation_full_text_without_detector(dataset):
    manifest, seg_path, _, _ = dataset
    reports = evaluate_ablation(seg_path, manifest, modes=("full-text",))
    assert list(reports) == ["full-text"]
    assert reports["full-text"].checkpoints["seg"].startswith("segmenter.ckpt@")


def test_ablation_all_modes(dataset):
    manifest, seg_path, det_path, simple_path = dataset
    modes = ("text-free", "self-guided", "full-text", "self-guided-simple")
    reports = evaluate_ablation(seg_path, manifest, modes=modes, det_ckpt=det_path,
                                simple_det_ckpt=simple_path, seed=4)
    assert list(reports) == list(modes)
    assert "det" not in reports["text-free"].checkpoints
    assert reports["self-guided"].checkpoints["det"].startswith("detector.ckpt@")
    assert reports["self-guided-simple"].checkpoints["det"].startswith("detector_simple.ckpt@")
    assert all(r.seed == 4 for r in reports.values())

    summary = ablation_summary(reports).splitlines()
    assert summary[0] == "mode,accuracy,dice,jaccard"
    assert [row.split(",")[0] for row in summary[1:]] == list(modes)


def test_ablation_requires_detector(dataset):
    manifest, seg_path, _, _ = dataset
    with pytest.raises(UsageException):
        evaluate_ablation(seg_path, manifest, modes=("self-guided",))
    with pytest.raises(UsageException):
        evaluate_ablation(seg_path, manifest, modes=("self-guided-simple",))


def test_ablation_rejects_wrong_kind(dataset):
    manifest, seg_path, det_path, _ = dataset
    with pytest.raises(DataValidationException):
        evaluate_ablation(det_path, manifest, modes=("full-text",))


@pytest.mark.parametrize("values", [np.full((4, 4), 3.0), np.zeros((2, 2))])
def test_normalize_constant_map(values):
    assert not normalize_map(values).any()


def test_normalize_map_range():
    out = normalize_map(np.array([[2.0, 4.0], [3.0, 6.0]]))
    assert out.min() == 0.0 and out.max() == 1.0
    assert out[0, 1] == pytest.approx(0.5)


def test_overlay():
    out = overlay(np.zeros((8, 8)), np.ones((8, 8)), alpha=0.5)
    assert out.shape == (8, 8, 3)
    assert out.dtype == np.uint8


def test_export_attention_maps(dataset, tmp_path):
    manifest, seg_path, _, _ = dataset
    sample = load_samples(manifest)[0]
    export = export_attention_maps(sample.image, seg_path, sample.report, str(tmp_path / "attn"),
                                   mask=sample.mask, provenance="sgseg 0.1.0")

    assert set(export.paths) == {"input", "mask", "attention", "overlay", "word_importance"}
    assert all(os.path.exists(p) for p in export.paths.values())
    assert export.attention.shape == (32, 32)
    assert export.attention.min() >= 0.0 and export.attention.max() <= 1.0
    with Image.open(export.paths["input"]) as img:
        assert img.size == (32, 32)
    for path in export.paths.values():
        with Image.open(path) as img:
            assert img.text["provenance"] == "sgseg 0.1.0", path
    with Image.open(export.paths["overlay"]) as img:
        assert img.mode == "RGB"
    assert sum(s for _, s in export.scores) == pytest.approx(1.0, abs=1e-5)


def test_dice_jaccard_identity_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        pred = rng.integers(0, 2, size=(8, 8))
        gt = rng.integers(0, 2, size=(8, 8))
        score = seg_metrics(pred, gt)
        assert score.dice >= score.jaccard
        assert abs(score.jaccard - score.dice / (2 - score.dice)) <= 1e-9
