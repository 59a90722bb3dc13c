"""
Synthetic chest X-ray style samples and dataset manifests.

A sample is a grayscale image with two dark elliptical lung fields over a
noisy background, bright disk lesions, the binary lesion mask, a report in
the :mod:`sgseg.locparse` grammar and the 6-zone location label.

Manifests are CSV files (``image,mask,report``) with paths relative to the
manifest's directory, so QaTa-style datasets converted to the same layout
load through :func:`ingest_manifest` as well.
"""

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from sgseg.config import GeneratorConfig
from sgseg.exceptions import DataValidationException, SGSegFormatException
from sgseg.locparse import REGIONS, LocationLabel, parse_report, synthesize_report
from sgseg.utils import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("image", "mask", "report")
SPLITS = ("train", "val", "test")

BACKGROUND_LEVEL = 0.55
LUNG_LEVEL = 0.2
NOISE_SIGMA = 0.03
MASK_THRESHOLD = 128


class LungRegion(enum.IntEnum):
    L_UPPER = 0
    L_MIDDLE = 1
    L_LOWER = 2
    R_UPPER = 3
    R_MIDDLE = 4
    R_LOWER = 5

    @property
    def side(self):
        return REGIONS[self][0]

    @property
    def zone(self):
        return REGIONS[self][1]


@dataclass(frozen=True)
class LesionSpec:
    region: LungRegion
    center: tuple
    radius: float
    intensity: float


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    report: str
    label: LocationLabel


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: str
    report: str


@dataclass(frozen=True)
class RecordError:
    line: int
    image_path: str
    message: str

    def __str__(self):
        return "line {} ({}): {}".format(self.line, self.image_path, self.message)


@dataclass
class DatasetManifest:
    records: list
    split: str = "train"
    root: str = "."
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    @property
    def image_paths(self):
        return [r.image_path for r in self.records]

    def subset(self, indices, split):
        return DatasetManifest(
            records=[self.records[i] for i in indices], split=split, root=self.root
        )


def _bounds(start, stop, parts):
    edges = np.linspace(start, stop, parts + 1)
    return [int(round(e)) for e in edges]


def side_columns(image_size):
    margin = image_size // 16
    mid = image_size // 2
    return {"left": (margin, mid), "right": (mid, image_size - margin)}


def lung_rows(image_size):
    return image_size // 8, image_size - image_size // 8


def zone_rectangle(region, image_size):
    """``(row0, row1, col0, col1)``, half-open."""
    region = LungRegion(region)
    top, bottom = lung_rows(image_size)
    rows = _bounds(top, bottom, 3)
    z = ("upper", "middle", "lower").index(region.zone)
    col0, col1 = side_columns(image_size)[region.side]
    return rows[z], rows[z + 1], col0, col1


def region_map(image_size):
    """``(S, S)`` array of region indices, -1 outside the lung rectangles."""
    regions = np.full((image_size, image_size), -1, dtype=np.int8)
    for region in LungRegion:
        r0, r1, c0, c1 = zone_rectangle(region, image_size)
        regions[r0:r1, c0:c1] = int(region)
    return regions


def label_from_mask(mask):
    mask = np.asarray(mask)
    regions = region_map(mask.shape[0])
    return LocationLabel(
        int(np.any(mask[regions == i] > 0)) for i in range(len(LungRegion))
    )


def _disk(image_size, center, radius):
    rows, cols = np.mgrid[0:image_size, 0:image_size]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2


def _validate_specs(specs, image_size):
    if image_size < 32:
        raise DataValidationException("image_size must be >= 32, got {}".format(image_size))
    if len(specs) > len(LungRegion):
        raise DataValidationException("At most 6 lesions per sample")

    seen = set()
    for spec in specs:
        region = LungRegion(spec.region)
        if region in seen:
            raise DataValidationException(
                "overlapping specs in region {}".format(region.name)
            )
        seen.add(region)

        if spec.radius <= 0:
            raise DataValidationException("Lesion radius must be positive")
        if not 0.0 <= spec.intensity <= 1.0:
            raise DataValidationException("Lesion intensity must be within [0, 1]")

        r0, r1, c0, c1 = zone_rectangle(region, image_size)
        row, col = spec.center
        if not (r0 <= row < r1 and c0 <= col < c1):
            raise DataValidationException(
                "center {} outside region {}".format(tuple(spec.center), region.name)
            )

        side_c0, side_c1 = side_columns(image_size)[region.side]
        top, bottom = lung_rows(image_size)
        disk = _disk(image_size, spec.center, spec.radius)
        rows, cols = np.nonzero(disk)
        if cols.min() < side_c0 or cols.max() >= side_c1 or rows.min() < top or rows.max() >= bottom:
            raise DataValidationException(
                "lesion in {} leaves the {} lung field".format(region.name, region.side)
            )


def render_sample(specs, image_size=64, seed=0):
    specs = list(specs)
    _validate_specs(specs, image_size)
    rng = np.random.default_rng(seed)

    image = np.full((image_size, image_size), BACKGROUND_LEVEL, dtype=np.float64)
    rows, cols = np.mgrid[0:image_size, 0:image_size]
    top, bottom = lung_rows(image_size)
    for c0, c1 in side_columns(image_size).values():
        center_r, center_c = (top + bottom - 1) / 2, (c0 + c1 - 1) / 2
        semi_r, semi_c = (bottom - top) / 2, (c1 - c0) / 2
        lung = ((rows - center_r) / semi_r) ** 2 + ((cols - center_c) / semi_c) ** 2 <= 1.0
        image[lung] = LUNG_LEVEL

    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    for spec in specs:
        disk = _disk(image_size, spec.center, spec.radius)
        image[disk] += spec.intensity
        mask[disk] = 1

    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    label = label_from_mask(mask)
    return Sample(image=image, mask=mask, report=synthesize_report(label), label=label)


def random_specs(rng, image_size, count):
    regions = sorted(rng.choice(len(LungRegion), size=count, replace=False).tolist())
    min_radius = max(2, image_size // 16)
    max_radius = max(min_radius, image_size // 10)

    specs = []
    for region in regions:
        r0, r1, c0, c1 = zone_rectangle(region, image_size)
        radius = int(rng.integers(min_radius, max_radius + 1))
        radius = min(radius, (r1 - r0 - 1) // 2, (c1 - c0 - 1) // 2)
        center = (
            int(rng.integers(r0 + radius, r1 - radius)),
            int(rng.integers(c0 + radius, c1 - radius)),
        )
        specs.append(LesionSpec(
            region=LungRegion(region),
            center=center,
            radius=radius,
            intensity=float(rng.uniform(0.35, 0.6)),
        ))
    return specs


def sample_for_index(config, index):
    """The ``index``-th sample of a generated dataset; independent of other indices."""
    seed = derive_seed(config.seed, index)
    rng = np.random.default_rng(seed)
    weights = np.asarray(config.lesion_count_weights, dtype=np.float64)
    count = int(rng.choice(len(weights), p=weights / weights.sum()))
    specs = random_specs(rng, config.image_size, count)
    return render_sample(specs, config.image_size, derive_seed(seed, 1))


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_png(path, array, provenance=None):
    """8-bit grayscale, or RGB for ``(H, W, 3)`` arrays."""
    info = None
    if provenance:
        info = PngInfo()
        info.add_text("provenance", provenance)
    Image.fromarray(array, mode="RGB" if array.ndim == 3 else "L").save(path, format="PNG", pnginfo=info)


def write_manifest(path, records, provenance=None):
    with open(path, "w", encoding="utf-8", newline="") as fp:
        if provenance:
            fp.write("# {}\n".format(provenance))
        fp.write(",".join(MANIFEST_HEADER) + "\n")
        writer = csv.writer(fp, quoting=csv.QUOTE_ALL, lineterminator="\n")
        for record in records:
            writer.writerow((record.image_path, record.mask_path, record.report))


def generate_dataset(config, out_dir, provenance=None):
    """
    Write ``config.num_samples`` samples under ``out_dir`` (``images/``,
    ``masks/``, ``manifest.csv``) and return the manifest.
    """
    if not isinstance(config, GeneratorConfig):
        config = GeneratorConfig.from_mapping(config)

    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    except OSError as ex:
        raise DataValidationException(
            "Cannot write to output directory {}: {}".format(out_dir, ex.strerror)
        )

    records = []
    for index in range(config.num_samples):
        sample = sample_for_index(config, index)
        name = "{:05d}.png".format(index)
        image_path = os.path.join("images", name)
        mask_path = os.path.join("masks", name)
        try:
            write_png(os.path.join(out_dir, image_path), to_uint8(sample.image), provenance)
            write_png(os.path.join(out_dir, mask_path), sample.mask * 255, provenance)
        except OSError as ex:
            raise DataValidationException(
                "Cannot write to output directory {}: {}".format(out_dir, ex.strerror)
            )
        records.append(ManifestRecord(image_path, mask_path, sample.report))

    write_manifest(os.path.join(out_dir, "manifest.csv"), records, provenance)
    logger.info("Generated %d samples in %s", len(records), out_dir)
    return DatasetManifest(records=records, split="train", root=out_dir)


def read_gray(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def read_image(path):
    return read_gray(path).astype(np.float32) / 255.0


def binarize_mask(raw_mask):
    """``{0, 255}`` masks are thresholded at 128, ``{0, 1}`` masks kept as-is."""
    values = set(np.unique(raw_mask).tolist())
    if not (values <= {0, 255} or values <= {0, 1}):
        raise DataValidationException("non-binary mask")
    if values <= {0, 1}:
        return raw_mask.astype(np.uint8)
    return (raw_mask >= MASK_THRESHOLD).astype(np.uint8)


def read_mask(path):
    return binarize_mask(read_gray(path))


def load_sample(manifest, record):
    image = read_image(manifest.resolve(record.image_path))
    raw_mask = read_gray(manifest.resolve(record.mask_path))

    if image.shape != raw_mask.shape:
        raise DataValidationException(
            "shape mismatch image {} vs mask {}".format(image.shape, raw_mask.shape)
        )

    return Sample(
        image=image,
        mask=binarize_mask(raw_mask),
        report=record.report,
        label=parse_report(record.report),
    )


def load_samples(manifest):
    return [load_sample(manifest, r) for r in manifest.records]


def ingest_manifest(path, split="train", validate=True):
    """
    Read a manifest; invalid records are left out and listed in
    ``manifest.errors`` instead of failing the whole file.
    """
    if not os.path.exists(path):
        raise DataValidationException("Manifest not found: {}".format(path))

    root = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(records=[], split=split, root=root)
    seen = set()

    with open(path, encoding="utf-8", newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        # leading provenance comments
        while header is not None and header and header[0].startswith("#"):
            header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != MANIFEST_HEADER:
            raise SGSegFormatException(
                "Manifest {} must start with the header 'image,mask,report'".format(path)
            )

        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                manifest.errors.append(RecordError(lineno, row[0], "expected 3 fields"))
                continue

            record = ManifestRecord(*row)
            if record.image_path in seen:
                manifest.errors.append(RecordError(lineno, record.image_path, "duplicate image path"))
                continue

            if validate:
                missing = [
                    p for p in (record.image_path, record.mask_path)
                    if not os.path.exists(manifest.resolve(p))
                ]
                if missing:
                    manifest.errors.append(
                        RecordError(lineno, record.image_path, "missing file {}".format(missing[0]))
                    )
                    continue
                try:
                    load_sample(manifest, record)
                except DataValidationException as ex:
                    manifest.errors.append(RecordError(lineno, record.image_path, ex.args[0]))
                    continue
                except OSError as ex:
                    manifest.errors.append(RecordError(lineno, record.image_path, str(ex)))
                    continue

            seen.add(record.image_path)
            manifest.records.append(record)

    for error in manifest.errors:
        logger.warning("Skipping record: %s", error)

    return manifest


def split_dataset(manifest, ratios=(4 / 6, 1 / 6, 1 / 6), seed=0):
    """
    Shuffle under ``seed`` and cut into train/val/test. Validation and test
    sizes are ``floor(n * ratio)``; train takes the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataValidationException("Split ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationException("Split ratios must sum to 1")

    n = len(manifest)
    # epsilon absorbs float error in products like 768 * (1 / 6)
    val_size, test_size = (int(math.floor(n * r + 1e-9)) for r in ratios[1:])
    train_size = n - val_size - test_size
    if min(train_size, val_size, test_size) < 1:
        raise DataValidationException(
            "{} records are too few for a split with at least one record each".format(n)
        )

    order = np.random.default_rng(seed).permutation(n)
    return (
        manifest.subset(order[:train_size], "train"),
        manifest.subset(order[train_size:train_size + val_size], "val"),
        manifest.subset(order[train_size + val_size:], "test"),
    )
