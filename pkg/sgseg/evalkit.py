"""
Segmentation and localization metrics, the text-guidance ablation runner and
attention map exports.

Metric conventions: a blank prediction on a blank ground truth scores 1 for
Dice and Jaccard; per-region precision, recall and F1 are 1 when their
denominator is 0.
"""

import csv
import io
import logging
import os
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib import colormaps
from matplotlib.figure import Figure

from sgseg.checkpoint import build_model, load_checkpoint
from sgseg.data_forge import load_sample, load_samples, to_uint8, write_png
from sgseg.exceptions import DataValidationException, ShapeException, UsageException
from sgseg.locparse import NUM_REGIONS, REGIONS

logger = logging.getLogger(__name__)

MODES = ("text-free", "self-guided", "full-text", "self-guided-simple")
SELF_GUIDED_MODES = ("self-guided", "self-guided-simple")
THRESHOLD = 0.5
REGION_KEYS = tuple("{}_{}".format(side, zone) for side, zone in REGIONS)

SegScore = namedtuple("SegScore", ["accuracy", "dice", "jaccard"])


def _binary(mask, name):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataValidationException("{} mask is not binary".format(name))
    return mask.astype(bool)


def seg_metrics(pred, gt):
    """Pixel accuracy, Dice and Jaccard of two binary masks."""
    pred, gt = _binary(pred, "Predicted"), _binary(gt, "Ground-truth")
    if pred.shape != gt.shape:
        raise ShapeException("Mask shapes differ: {} vs {}".format(pred.shape, gt.shape))

    intersection = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    total = pred.sum() + gt.sum()

    accuracy = float((pred == gt).mean())
    dice = 1.0 if total == 0 else float(2 * intersection / total)
    jaccard = 1.0 if union == 0 else float(intersection / union)
    return SegScore(accuracy, dice, jaccard)


def _ratio(num, den):
    return 1.0 if den == 0 else num / den


@dataclass
class LabelMetrics:
    precision: tuple
    recall: tuple
    f1: tuple
    macro_f1: float
    exact_match: float

    def to_mapping(self):
        mapping = OrderedDict(macro_f1=self.macro_f1, label_exact_match=self.exact_match)
        for name, values in (("precision", self.precision), ("recall", self.recall), ("f1", self.f1)):
            for key, value in zip(REGION_KEYS, values):
                mapping["{}.{}".format(name, key)] = value
        return mapping


def label_metrics(pred, gt):
    if len(pred) != len(gt):
        raise ShapeException("{} predictions for {} ground-truth labels".format(len(pred), len(gt)))

    pred = np.asarray([tuple(p) for p in pred], dtype=int).reshape(-1, NUM_REGIONS)
    gt = np.asarray([tuple(g) for g in gt], dtype=int).reshape(-1, NUM_REGIONS)

    tp = ((pred == 1) & (gt == 1)).sum(axis=0)
    fp = ((pred == 1) & (gt == 0)).sum(axis=0)
    fn = ((pred == 0) & (gt == 1)).sum(axis=0)

    precision = tuple(_ratio(tp[i], tp[i] + fp[i]) for i in range(NUM_REGIONS))
    recall = tuple(_ratio(tp[i], tp[i] + fn[i]) for i in range(NUM_REGIONS))
    f1 = tuple(_ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn[i]) for i in range(NUM_REGIONS))
    exact = float((pred == gt).all(axis=1).mean()) if len(pred) else 1.0

    return LabelMetrics(
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        macro_f1=float(np.mean(f1)),
        exact_match=exact,
    )


@dataclass
class SampleScore:
    image: str
    accuracy: float
    dice: float
    jaccard: float
    report: str
    generated_report: str = None

    @property
    def report_match(self):
        if self.generated_report is None:
            return None
        return self.generated_report == self.report


@dataclass
class MetricsReport:
    mode: str
    samples: list
    seed: int = 0
    checkpoints: dict = field(default_factory=dict)
    labels: LabelMetrics = None
    provenance: str = ""

    def _mean(self, attr, samples=None):
        samples = self.samples if samples is None else samples
        return float(np.mean([getattr(s, attr) for s in samples])) if samples else float("nan")

    @property
    def accuracy(self):
        return self._mean("accuracy")

    @property
    def dice(self):
        return self._mean("dice")

    @property
    def jaccard(self):
        return self._mean("jaccard")

    @property
    def report_exact_match(self):
        matches = [s.report_match for s in self.samples if s.report_match is not None]
        return float(np.mean(matches)) if matches else None

    def dice_by_report_match(self):
        """Mean Dice over samples whose generated report matched / did not match."""
        matched = [s for s in self.samples if s.report_match is True]
        mismatched = [s for s in self.samples if s.report_match is False]
        return (
            self._mean("dice", matched) if matched else None,
            self._mean("dice", mismatched) if mismatched else None,
        )

    def to_mapping(self):
        mapping = OrderedDict()
        mapping["provenance"] = self.provenance
        mapping["mode"] = self.mode
        mapping["seed"] = self.seed
        for name in sorted(self.checkpoints):
            mapping["checkpoint.{}".format(name)] = self.checkpoints[name]
        mapping["samples"] = len(self.samples)
        mapping["accuracy"] = self.accuracy
        mapping["dice"] = self.dice
        mapping["jaccard"] = self.jaccard

        if self.report_exact_match is not None:
            mapping["report_exact_match"] = self.report_exact_match
            matched, mismatched = self.dice_by_report_match()
            if matched is not None:
                mapping["dice_report_match"] = matched
            if mismatched is not None:
                mapping["dice_report_mismatch"] = mismatched
        if self.labels is not None:
            mapping.update(self.labels.to_mapping())
        return mapping

    def to_text(self):
        lines = []
        for key, value in self.to_mapping().items():
            if isinstance(value, float):
                value = "{:.6f}".format(value)
            lines.append("{} = {}".format(key, value))
        return "\n".join(lines) + "\n"

    def to_table(self):
        buffer = io.StringIO()
        if self.provenance:
            buffer.write("# {}\n".format(self.provenance))
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["image", "accuracy", "dice", "jaccard", "report", "generated_report", "report_match"])
        for s in self.samples:
            writer.writerow([
                s.image,
                "{:.6f}".format(s.accuracy),
                "{:.6f}".format(s.dice),
                "{:.6f}".format(s.jaccard),
                s.report,
                "" if s.generated_report is None else s.generated_report,
                "" if s.report_match is None else int(s.report_match),
            ])
        return buffer.getvalue()

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        stem = self.mode.replace("-", "_")
        paths = (
            os.path.join(out_dir, "metrics_{}.txt".format(stem)),
            os.path.join(out_dir, "samples_{}.csv".format(stem)),
        )
        with open(paths[0], "w", encoding="utf-8", newline="") as fp:
            fp.write(self.to_text())
        with open(paths[1], "w", encoding="utf-8", newline="") as fp:
            fp.write(self.to_table())
        return paths


def _images_tensor(samples):
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]


@torch.no_grad()
def evaluate_mode(mode, segmenter, manifest, detector=None, tau=0.5, batch_size=32, seed=0,
                  checkpoints=None, provenance=""):
    """
    Score one inference mode on ``manifest``.

    ``full-text`` feeds the ground-truth report, ``text-free`` the empty
    report and the self-guided modes the report generated by ``detector``.
    Masks are binarized at 0.5 in every mode.
    """
    if mode not in MODES:
        raise UsageException("Unknown evaluation mode: {}".format(mode))
    if mode in SELF_GUIDED_MODES and detector is None:
        raise UsageException("Mode {} needs a detector checkpoint".format(mode))

    samples = load_samples(manifest)
    scores, predicted, truth = [], [], []

    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        records = manifest.records[start:start + batch_size]
        images = _images_tensor(chunk)

        generated = [None] * len(chunk)
        if mode == "full-text":
            reports = [s.report for s in chunk]
        elif mode == "text-free":
            reports = [""] * len(chunk)
        else:
            outputs = detector.predict_batch(images, tau)
            generated = [o.report for o in outputs]
            reports = generated
            predicted.extend(o.label for o in outputs)
            truth.extend(s.label for s in chunk)

        masks = segmenter.segment(images, reports).binarize(THRESHOLD).numpy()
        for record, sample, mask, gen in zip(records, chunk, masks, generated):
            score = seg_metrics(mask, sample.mask)
            scores.append(SampleScore(
                image=record.image_path,
                accuracy=score.accuracy,
                dice=score.dice,
                jaccard=score.jaccard,
                report=sample.report,
                generated_report=gen,
            ))

    return MetricsReport(
        mode=mode,
        samples=scores,
        seed=seed,
        checkpoints=dict(checkpoints or {}),
        labels=label_metrics(predicted, truth) if mode in SELF_GUIDED_MODES else None,
        provenance=provenance,
    )


def _checkpoint_id(path, checkpoint):
    return "{}@{}".format(os.path.basename(path), checkpoint.config_hash)


def _load(path, image_size, kind):
    checkpoint = load_checkpoint(path, image_size)
    if checkpoint.kind != kind:
        raise DataValidationException("{} holds a {} checkpoint, expected a {}".format(
            path, checkpoint.kind, kind
        ))
    return build_model(checkpoint), _checkpoint_id(path, checkpoint)


def evaluate_ablation(seg_ckpt, test_manifest, modes=("text-free", "self-guided", "full-text"),
                      det_ckpt=None, text_free_ckpt=None, simple_det_ckpt=None, tau=0.5, seed=0,
                      provenance=""):
    """
    Run every requested mode on the same samples and return the reports in
    mode order. ``text-free`` uses ``text_free_ckpt`` when given (a segmenter
    trained on empty reports) and ``seg_ckpt`` otherwise; it never loads a
    detector.
    """
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise UsageException("Unknown evaluation mode(s): {}".format(", ".join(unknown)))
    if "self-guided" in modes and not det_ckpt:
        raise UsageException("Mode self-guided needs --det-ckpt")
    if "self-guided-simple" in modes and not simple_det_ckpt:
        raise UsageException("Mode self-guided-simple needs --simple-det-ckpt")
    if not test_manifest.records:
        raise DataValidationException("Test manifest has no valid records")

    image_size = load_sample(test_manifest, test_manifest.records[0]).image.shape[0]
    segmenter, seg_id = _load(seg_ckpt, image_size, "segmenter")

    reports = OrderedDict()
    for mode in modes:
        model, checkpoints, detector = segmenter, {"seg": seg_id}, None
        if mode == "text-free" and text_free_ckpt:
            model, tf_id = _load(text_free_ckpt, image_size, "segmenter")
            checkpoints = {"seg": tf_id}
        elif mode in SELF_GUIDED_MODES:
            det_path = det_ckpt if mode == "self-guided" else simple_det_ckpt
            detector, det_id = _load(det_path, image_size, "detector")
            checkpoints["det"] = det_id

        reports[mode] = evaluate_mode(
            mode, model, test_manifest, detector=detector, tau=tau, seed=seed,
            checkpoints=checkpoints, provenance=provenance,
        )
        logger.info("%s: dice %.4f", mode, reports[mode].dice)
    return reports


def ablation_summary(reports):
    rows = ["mode,accuracy,dice,jaccard"]
    for mode, report in reports.items():
        rows.append("{},{:.6f},{:.6f},{:.6f}".format(mode, report.accuracy, report.dice, report.jaccard))
    return "\n".join(rows) + "\n"


def normalize_map(values):
    """Min-max scaling to [0, 1]; a constant field maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high - low <= 0:
        return np.zeros_like(values)
    return np.clip((values - low) / (high - low), 0.0, 1.0)


def overlay(image, attention, alpha=0.5):
    """RGB blend of the grayscale image with the jet-coloured attention."""
    base = np.repeat(np.clip(image, 0.0, 1.0)[..., None], 3, axis=-1)
    heat = colormaps["jet"](attention)[..., :3]
    return to_uint8((1 - alpha) * base + alpha * heat)


def heat_strip(scores, path, provenance=""):
    """Word-importance strip: one cell per report token."""
    tokens = [t for t, _ in scores]
    values = np.asarray([[s for _, s in scores]]) if scores else np.zeros((1, 1))

    fig = Figure(figsize=(max(2.0, 0.6 * len(tokens)), 1.2))
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(values, cmap="Reds", aspect="auto", vmin=0.0, vmax=max(values.max(), 1e-12))
    ax.set_xticks(range(len(tokens)))
    ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=7)
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"provenance": provenance})


@dataclass
class AttentionExport:
    paths: dict
    attention: np.ndarray
    scores: list


def export_attention_maps(image, segmenter, report, out_dir, mask=None, provenance=""):
    """
    Write the input, the ground-truth mask (when given), the normalized
    attention field, its overlay on the input and the word-importance strip.
    ``segmenter`` is a model or a checkpoint path.
    """
    if isinstance(segmenter, str):
        segmenter, _ = _load(segmenter, np.asarray(image).shape[0], "segmenter")

    image = np.asarray(image, dtype=np.float32)
    attention = normalize_map(segmenter.attention_map(image, report))
    scores = segmenter.word_importance(image, report)

    paths = OrderedDict(
        input=os.path.join(out_dir, "input.png"),
        attention=os.path.join(out_dir, "attention.png"),
        overlay=os.path.join(out_dir, "overlay.png"),
        word_importance=os.path.join(out_dir, "word_importance.png"),
    )
    try:
        os.makedirs(out_dir, exist_ok=True)
        write_png(paths["input"], to_uint8(image), provenance)
        if mask is not None:
            paths["mask"] = os.path.join(out_dir, "mask.png")
            write_png(paths["mask"], (np.asarray(mask) > 0).astype(np.uint8) * 255, provenance)
        write_png(paths["attention"], to_uint8(attention), provenance)
        write_png(paths["overlay"], overlay(image, attention), provenance)
        heat_strip(scores, paths["word_importance"], provenance)
    except OSError as ex:
        raise DataValidationException(
            "Cannot write attention maps to {}: {}".format(out_dir, ex.strerror or ex)
        )

    return AttentionExport(paths=dict(paths), attention=attention, scores=scores)
