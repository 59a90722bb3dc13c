"""
End-to-end acceptance run on the default synthetic dataset.

Usage:
    These tests train every model at desk scale (about an hour on a
    commodity CPU) and are skipped unless enabled:
        $ export SGSEG_ACCEPTANCE=1
        $ export SGSEG_ACCEPTANCE_DIR=/tmp/sgseg-acceptance   # optional

    They should be run independently with:
        pytest test/test_acceptance.py

Description:
    Trains the guided segmenter, a segmenter on empty reports and the
    detector with the command line, then checks the ablation ordering,
    detector quality, word importance, and that retraining and
    re-evaluation under the same seed give byte-identical files.
"""

import os

import numpy as np
import pytest

from sgseg.checkpoint import checkpoint_roundtrip
from sgseg.cli import EXIT_OK, run
from sgseg.data_forge import ingest_manifest, load_samples
from sgseg.evalkit import label_metrics
from sgseg.locparse import EMPTY_LABEL
from sgseg.seg_net import importance_by_group

pytestmark = pytest.mark.skipif(
    os.getenv("SGSEG_ACCEPTANCE") != "1", reason="SGSEG_ACCEPTANCE=1 is not set"
)

MODES = "text-free,self-guided,full-text"


def _read_metrics(path):
    metrics = {}
    with open(path, encoding="utf-8") as fp:
        for line in fp:
            key, _, value = line.rstrip("\n").partition(" = ")
            metrics[key] = value
    return metrics


@pytest.fixture(scope="module")
def acceptance_dir(tmp_path_factory):
    root = os.getenv("SGSEG_ACCEPTANCE_DIR") or str(tmp_path_factory.mktemp("acceptance"))
    data, models = os.path.join(root, "data"), os.path.join(root, "models")
    train, val = os.path.join(data, "train.csv"), os.path.join(data, "val.csv")
    labels = os.path.join(root, "labels", "labels.csv")

    steps = [
        ["gen-data", "-o", data],
        ["pseudo-label", "-m", train, "-o", os.path.join(root, "labels")],
        ["train-seg", "--train", train, "--val", val, "-o", models, "-q"],
        ["train-seg", "--train", train, "--val", val, "-o", os.path.join(root, "text_free"),
         "--report-source", "empty", "-q"],
        ["train-det", "--train", train, "--labels", labels, "--val", val, "-o", models, "-q"],
    ]
    for argv in steps:
        assert run(argv + ["-s", "0", "-nl"]) == EXIT_OK, argv[0]
    return root


def _ablate(root, out):
    return run([
        "ablate", "-m", os.path.join(root, "data", "test.csv"),
        "--seg-ckpt", os.path.join(root, "models", "segmenter.ckpt"),
        "--det-ckpt", os.path.join(root, "models", "detector.ckpt"),
        "--text-free-ckpt", os.path.join(root, "text_free", "segmenter.ckpt"),
        "--modes", MODES, "-s", "0", "-o", out, "-nl",
    ])


def test_ablation_ordering(acceptance_dir):
    out = os.path.join(acceptance_dir, "ablation")
    assert _ablate(acceptance_dir, out) == EXIT_OK

    dice = {
        mode: float(_read_metrics(os.path.join(out, "metrics_{}.txt".format(mode.replace("-", "_"))))["dice"])
        for mode in MODES.split(",")
    }
    assert dice["full-text"] >= dice["self-guided"] >= dice["text-free"] + 0.01
    assert dice["self-guided"] >= 0.70


def test_detector_quality(acceptance_dir):
    detector = checkpoint_roundtrip(
        os.path.join(acceptance_dir, "models", "detector.ckpt"), image_size=64, kind="detector"
    )
    samples = load_samples(ingest_manifest(os.path.join(acceptance_dir, "data", "val.csv")))
    outputs = detector.predict_batch(np.stack([s.image for s in samples]))

    metrics = label_metrics([o.label for o in outputs], [s.label for s in samples])
    assert metrics.macro_f1 >= 0.90
    exact = np.mean([o.report == s.report for o, s in zip(outputs, samples)])
    assert exact >= 0.75
    blanks = [o.report for o, s in zip(outputs, samples) if s.label == EMPTY_LABEL]
    assert np.mean([r == "No pulmonary infection." for r in blanks]) >= 0.9


def test_location_words_dominate_importance(acceptance_dir):
    segmenter = checkpoint_roundtrip(
        os.path.join(acceptance_dir, "models", "segmenter.ckpt"), image_size=64, kind="segmenter"
    )
    samples = load_samples(ingest_manifest(os.path.join(acceptance_dir, "data", "test.csv")))

    wins = []
    for sample in samples:
        if sample.label == EMPTY_LABEL:
            continue
        location, filler = importance_by_group(segmenter.word_importance(sample.image, sample.report))
        wins.append(location > filler)
    assert np.mean(wins) >= 0.70


def test_ablation_is_byte_identical(acceptance_dir):
    first, second = (os.path.join(acceptance_dir, name) for name in ("repeat_a", "repeat_b"))
    assert _ablate(acceptance_dir, first) == EXIT_OK
    assert _ablate(acceptance_dir, second) == EXIT_OK
    for name in sorted(os.listdir(first)):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read(), name


def test_training_is_byte_identical(acceptance_dir):
    data = os.path.join(acceptance_dir, "data")
    repeat = os.path.join(acceptance_dir, "models_repeat")
    code = run([
        "train-seg", "--train", os.path.join(data, "train.csv"), "--val", os.path.join(data, "val.csv"),
        "-o", repeat, "-q", "-s", "0", "-nl",
    ])
    assert code == EXIT_OK
    for name in ("segmenter.ckpt", "history_segmenter.csv"):
        with open(os.path.join(acceptance_dir, "models", name), "rb") as a, \
                open(os.path.join(repeat, name), "rb") as b:
            assert a.read() == b.read(), name
