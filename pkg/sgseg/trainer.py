"""
Training loops for the segmenter and the detector.

Both use AdamW with a per-step cosine schedule and keep the parameters of
the best validation epoch. Randomness is derived from ``TrainConfig.seed``:
shuffling uses ``derive_seed(seed, epoch)`` and augmentation of the sample
at position ``i`` uses ``derive_seed(seed, epoch, i)``.
"""

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from sgseg.checkpoint import save_checkpoint
from sgseg.config import DetectorConfig, SegNetConfig, TrainConfig
from sgseg.data_forge import Sample, label_from_mask, load_samples
from sgseg.evalkit import label_metrics, seg_metrics
from sgseg.exceptions import DataValidationException, NumericException
from sgseg.lerg_detector import bce_loss, build_detector
from sgseg.locparse import parse_report, read_label_file, synthesize_report
from sgseg.seg_net import LanguageGuidedUNet, batch_token_ids
from sgseg.utils import derive_seed, seed_everything

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationSpec:
    crop: bool = True
    mask: bool = True
    rotate: bool = True
    max_crop_offset: float = 0.08
    max_erase_area: float = 0.10
    max_rotation: float = 15.0

    @classmethod
    def from_config(cls, config):
        return cls(crop=config.augment_crop, mask=config.augment_mask, rotate=config.augment_rotate)

    @classmethod
    def disabled(cls):
        return cls(crop=False, mask=False, rotate=False)

    @property
    def enabled(self):
        return self.crop or self.mask or self.rotate


def _pad_and_crop(image, mask, rng, max_offset):
    size = image.shape[0]
    pad = int(max_offset * size)
    if pad < 1:
        return image, mask
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    image = np.pad(image, pad, mode="edge")[dy:dy + size, dx:dx + size]
    mask = np.pad(mask, pad, mode="constant")[dy:dy + size, dx:dx + size]
    return image, mask


def _erase_rectangle(image, rng, max_area):
    size = image.shape[0]
    limit = max_area * size * size
    height = int(rng.integers(1, max(2, int(math.sqrt(limit)) + 1)))
    width = int(rng.integers(1, max(2, int(limit // height) + 1)))
    width = min(width, size)
    top = int(rng.integers(0, size - height + 1))
    left = int(rng.integers(0, size - width + 1))
    image = image.copy()
    image[top:top + height, left:left + width] = 0.0
    return image


def _rotate(image, mask, angle):
    image = ndimage.rotate(image, angle, reshape=False, order=0, mode="nearest")
    mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    return image, mask


def augment(sample, seed, spec=None):
    """
    Random pad-and-crop, rectangle erasing (image only) and rotation
    (nearest neighbour, shared by image and mask). The label is recomputed
    from the transformed mask; the report is re-synthesized only when the
    label changed.
    """
    spec = spec or AugmentationSpec()
    if not spec.enabled:
        return sample

    rng = np.random.default_rng(seed)
    image, mask = sample.image, sample.mask

    if spec.crop:
        image, mask = _pad_and_crop(image, mask, rng, spec.max_crop_offset)
    if spec.mask:
        image = _erase_rectangle(image, rng, spec.max_erase_area)
    if spec.rotate:
        angle = float(rng.uniform(-spec.max_rotation, spec.max_rotation))
        image, mask = _rotate(image, mask, angle)

    label = label_from_mask(mask)
    report = sample.report if label == sample.label else synthesize_report(label)
    return Sample(
        image=image.astype(np.float32),
        mask=(mask > 0).astype(np.uint8),
        report=report,
        label=label,
    )


def cosine_schedule(step, total_steps, initial, floor):
    """Cosine annealing from ``initial`` at step 0 down to ``floor`` at the last step."""
    if total_steps <= 1:
        return initial
    progress = min(step, total_steps - 1) / (total_steps - 1)
    return floor + (initial - floor) * (1 + math.cos(math.pi * progress)) / 2


def dice_loss(logits, masks, smooth=1.0):
    p = torch.sigmoid(logits).flatten(1)
    g = masks.flatten(1)
    dice = (2 * (p * g).sum(-1) + smooth) / (p.sum(-1) + g.sum(-1) + smooth)
    return (1 - dice).mean()


def segmentation_loss(logits, masks, lambda_dice=1.0, lambda_bce=1.0):
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, masks)
    return lambda_dice * dice_loss(logits, masks) + lambda_bce * bce


def report_for(sample, report_source):
    if report_source == "empty":
        return ""
    if report_source == "synthesized":
        return synthesize_report(sample.label)
    return sample.report


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    best_epoch: int
    best_metric: float
    metric_name: str
    step_losses: list = field(default_factory=list)

    @property
    def metrics(self):
        return {self.metric_name: self.best_metric}


def _optimizer(model, config, steps_per_epoch):
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    total_steps = config.epochs * steps_per_epoch
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: cosine_schedule(step, total_steps, config.learning_rate, config.lr_floor)
        / config.learning_rate,
    )
    return optimizer, scheduler


def _check_loss(loss, epoch, step):
    if not torch.isfinite(loss):
        raise NumericException(
            "Non-finite training loss at epoch {} step {}".format(epoch, step),
            location=(epoch, step),
        )


class SampleDataset(Dataset):
    """
    Training samples as tensors. The sample at position ``i`` is augmented
    with ``derive_seed(seed, epoch, i)``; call :meth:`set_epoch` before
    iterating a new epoch.
    """

    def __init__(self, samples, seed, spec=None, report_source="ground-truth", targets=None):
        super().__init__()
        self.samples = samples
        self.seed = seed
        self.spec = spec or AugmentationSpec.disabled()
        self.report_source = report_source
        self.targets = targets
        self.epoch = 0

    def __len__(self):
        return len(self.samples)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __getitem__(self, index):
        sample = augment(self.samples[index], derive_seed(self.seed, self.epoch, index), self.spec)
        item = {
            "image": torch.from_numpy(np.asarray(sample.image, dtype=np.float32))[None],
            "mask": torch.from_numpy(np.asarray(sample.mask, dtype=np.float32)),
            "report": report_for(sample, self.report_source),
        }
        if self.targets is not None:
            item["target"] = self.targets[index]
        return item


def epoch_loader(dataset, batch_size, seed, epoch):
    """Shuffled batches for ``epoch``; the order depends only on ``derive_seed(seed, epoch)``."""
    dataset.set_epoch(epoch)
    generator = torch.Generator().manual_seed(derive_seed(seed, epoch))
    return DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=generator)


def _images_tensor(samples):
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]


def _run_epochs(model, config, dataset, step_fn, validate, metric_name, verbose):
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    optimizer, scheduler = _optimizer(model, config, steps_per_epoch)

    history, step_losses = [], []
    best_state, best_epoch, best_metric = None, 0, -math.inf
    epochs = tqdm(range(1, config.epochs + 1), desc=metric_name, disable=not verbose)

    for epoch in epochs:
        model.train()
        losses = []
        for step, batch in enumerate(epoch_loader(dataset, config.batch_size, config.seed, epoch)):
            lr = optimizer.param_groups[0]["lr"]
            loss = step_fn(batch)
            _check_loss(loss, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(loss.item())
        step_losses.extend(losses)

        model.eval()
        metric = validate()
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), val_metric=metric, lr=lr)
        history.append(record)
        logger.debug("epoch %d loss %.5f %s %.4f", epoch, record.train_loss, metric_name, metric)
        epochs.set_postfix(loss=record.train_loss, **{metric_name: metric})

        if metric > best_metric:
            best_state = copy.deepcopy(model.state_dict())
            best_epoch, best_metric = epoch, metric

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_metric=best_metric,
        metric_name=metric_name,
        step_losses=step_losses,
    )


@torch.no_grad()
def predict_masks(model, samples, reports, batch_size=32):
    masks = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        result = model.segment(_images_tensor(chunk), list(reports[i:i + batch_size]))
        masks.extend(result.binarize().numpy())
    return masks


def mean_dice(model, samples, report_source):
    if not samples:
        return 0.0
    reports = [report_for(s, report_source) for s in samples]
    masks = predict_masks(model, samples, reports)
    return float(np.mean([seg_metrics(m, s.mask)[1] for m, s in zip(masks, samples)]))


def train_segmenter(train_manifest, val_manifest, config=None, seg_config=None, out_path=None,
                    provenance="", verbose=True):
    """
    Fit a :class:`LanguageGuidedUNet` on ``train_manifest`` with
    ``lambda_dice * Dice + lambda_bce * BCE`` and keep the epoch with the best
    validation Dice. The text input is chosen by ``config.report_source``.
    """
    config = config or TrainConfig()
    seg_config = seg_config or SegNetConfig(image_size=config.image_size)
    seed_everything(config.seed, config.deterministic)

    train = load_samples(train_manifest)
    val = load_samples(val_manifest) if val_manifest is not None and len(val_manifest) else train
    if not train:
        raise DataValidationException("Training manifest has no valid records")

    spec = AugmentationSpec.from_config(config)
    model = LanguageGuidedUNet(seg_config, seed=config.seed)

    dataset = SampleDataset(train, config.seed, spec, report_source=config.report_source)

    def step(batch):
        ids, mask, _ = batch_token_ids(list(batch["report"]), seg_config.max_tokens)
        logits = model(batch["image"], ids, mask)
        return segmentation_loss(logits, batch["mask"], config.lambda_dice, config.lambda_bce)

    result = _run_epochs(
        model, config, dataset, step,
        validate=lambda: mean_dice(model, val, config.report_source),
        metric_name="val_dice",
        verbose=verbose,
    )

    if out_path:
        save_checkpoint(out_path, result.model, epoch=result.best_epoch,
                        metrics=result.metrics, provenance=provenance)
    return result


def align_labels(manifest, labels):
    """
    Pseudo-labels for the records of ``manifest``, in manifest order.
    ``labels`` is a label file path or a list of ``(image_path, label)``.
    """
    if isinstance(labels, str):
        labels = read_label_file(labels)

    errors = []
    if len(labels) != len(manifest):
        errors.append("{} labels for {} records".format(len(labels), len(manifest)))
    for lineno, (record, (path, _)) in enumerate(zip(manifest.records, labels), 1):
        if record.image_path != path:
            errors.append("record {}: manifest has {} but label file has {}".format(
                lineno, record.image_path, path
            ))
    if errors:
        raise DataValidationException(
            "Pseudo-labels are not aligned with the manifest: {}".format("; ".join(errors[:5])),
            errors=errors,
        )
    return [label for _, label in labels]


@torch.no_grad()
def predict_labels_batch(detector, samples, tau=0.5, batch_size=32):
    outputs = []
    for i in range(0, len(samples), batch_size):
        outputs.extend(detector.predict_batch(_images_tensor(samples[i:i + batch_size]), tau))
    return outputs


def train_detector(train_manifest, labels, val_manifest, config=None, det_config=None,
                   out_path=None, provenance="", verbose=True):
    """
    Fit a detector on pseudo-labels with the mean BCE over the six regions and
    keep the epoch with the best validation macro-F1. Validation labels are
    parsed from the validation reports. Augmentation is limited to rectangle
    erasing, which leaves the zone labels intact.
    """
    config = config or TrainConfig()
    det_config = det_config or DetectorConfig(image_size=config.image_size)
    seed_everything(config.seed, config.deterministic)

    targets = torch.tensor([list(label) for label in align_labels(train_manifest, labels)],
                           dtype=torch.float32)
    train = load_samples(train_manifest)
    val = load_samples(val_manifest) if val_manifest is not None and len(val_manifest) else train
    val_labels = [parse_report(s.report) for s in val]

    spec = AugmentationSpec(crop=False, mask=config.augment_mask, rotate=False)
    model = build_detector(det_config, seed=config.seed)

    dataset = SampleDataset(train, config.seed, spec, targets=targets)

    def step(batch):
        p = torch.sigmoid(model(batch["image"]))
        return bce_loss(p, batch["target"])

    def validate():
        predicted = [o.label for o in predict_labels_batch(model, val)]
        return label_metrics(predicted, val_labels).macro_f1

    result = _run_epochs(
        model, config, dataset, step,
        validate=validate,
        metric_name="val_macro_f1",
        verbose=verbose,
    )

    if out_path:
        save_checkpoint(out_path, result.model, epoch=result.best_epoch,
                        metrics=result.metrics, provenance=provenance)
    return result
