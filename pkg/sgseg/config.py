"""
Flat ``key = value`` configuration files and the dataclasses they feed.

Example::

    # desk.cfg
    epochs = 40
    batch_size = 16
    report_source = ground-truth

    cfg = TrainConfig.from_mapping(read_config_file("desk.cfg"))
"""

import dataclasses
import math
import re
import typing
from dataclasses import dataclass

from sgseg.exceptions import SGSegFormatException

_re_line = re.compile(r"^\s*(?P<key>[A-Za-z_][\w.]*)\s*=\s*(?P<value>.*?)\s*$")


def total_stride(strides):
    return math.prod(strides)


REPORT_SOURCES = ("ground-truth", "empty", "synthesized")
DETECTOR_ARCHITECTURES = ("lerg", "simple")


def parse_config_text(text):
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue

        res = _re_line.match(line)
        if not res:
            raise SGSegFormatException(
                "Malformed config line {}: {!r}".format(lineno, line)
            )
        mapping[res["key"]] = res["value"]

    return mapping


def read_config_file(path):
    with open(path, encoding="utf-8") as fp:
        return parse_config_text(fp.read())


def format_config(mapping):
    return "".join("{} = {}\n".format(key, mapping[key]) for key in sorted(mapping))


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _coerce(value, annotation, key):
    try:
        if annotation is bool:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return value
        origin = typing.get_origin(annotation)
        if origin is tuple:
            item_type = typing.get_args(annotation)[0]
            return tuple(_coerce(v.strip(), item_type, key) for v in value.split(",") if v.strip())
    except ValueError:
        raise SGSegFormatException(
            "Invalid value for '{}': {!r}".format(key, value)
        )

    raise SGSegFormatException("Unsupported config field type for '{}'".format(key))


class _MappingMixin:

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, mapping, **overrides):
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, value in mapping.items():
            if key in cls.field_names():
                kwargs[key] = _coerce(value, hints[key], key) if isinstance(value, str) else value
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def to_mapping(self):
        return {f.name: _format_value(getattr(self, f.name)) for f in dataclasses.fields(self)}


@dataclass(frozen=True)
class GeneratorConfig(_MappingMixin):
    num_samples: int = 768
    image_size: int = 64
    # relative weights for 0..6 lesions per sample
    lesion_count_weights: typing.Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    seed: int = 0
    split_ratios: typing.Tuple[float, ...] = (4 / 6, 1 / 6, 1 / 6)

    def __post_init__(self):
        if self.num_samples < 1:
            raise SGSegFormatException("num_samples must be >= 1")
        if self.image_size < 32:
            raise SGSegFormatException("image_size must be >= 32")
        weights = self.lesion_count_weights
        if len(weights) != 7 or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise SGSegFormatException(
                "lesion_count_weights needs 7 non-negative weights (0..6 lesions)"
            )


@dataclass(frozen=True)
class SegNetConfig(_MappingMixin):
    image_size: int = 64
    widths: typing.Tuple[int, ...] = (16, 32, 64, 128)
    strides: typing.Tuple[int, ...] = (4, 2, 2, 2)
    text_dim: int = 64
    text_heads: int = 4
    text_layers: int = 2
    max_tokens: int = 24
    attn_dim: int = 64
    attn_heads: int = 4

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise SGSegFormatException("Segmenter needs exactly 4 stage widths and strides")
        if list(self.widths) != sorted(self.widths):
            raise SGSegFormatException("Stage widths must be non-decreasing")
        if self.strides[0] not in (1, 2, 4) or any(s != 2 for s in self.strides[1:]):
            raise SGSegFormatException("Strides must be (1|2|4, 2, 2, 2)")
        if self.image_size % total_stride(self.strides):
            raise SGSegFormatException(
                "image_size {} is not divisible by the total stride {}".format(
                    self.image_size, total_stride(self.strides)
                )
            )
        if self.attn_dim % self.attn_heads or self.text_dim % self.text_heads:
            raise SGSegFormatException("Attention sizes must be divisible by their head counts")


@dataclass(frozen=True)
class DetectorConfig(_MappingMixin):
    image_size: int = 64
    architecture: str = "lerg"
    widths: typing.Tuple[int, ...] = (16, 32, 64)
    strides: typing.Tuple[int, ...] = (4, 2, 2)
    hidden_dim: int = 64
    heads: int = 4
    num_queries: int = 10
    decoder_layers: int = 2

    def __post_init__(self):
        if self.architecture not in DETECTOR_ARCHITECTURES:
            raise SGSegFormatException(
                "architecture must be one of {}".format(", ".join(DETECTOR_ARCHITECTURES))
            )
        if len(self.widths) != 3 or len(self.strides) != 3:
            raise SGSegFormatException("Detector backbone needs exactly 3 stage widths and strides")
        if self.strides[0] not in (1, 2, 4) or any(s != 2 for s in self.strides[1:]):
            raise SGSegFormatException("Strides must be (1|2|4, 2, 2)")
        if self.image_size % total_stride(self.strides):
            raise SGSegFormatException(
                "image_size {} is not divisible by the total stride {}".format(
                    self.image_size, total_stride(self.strides)
                )
            )
        if self.hidden_dim % self.heads:
            raise SGSegFormatException("hidden_dim must be divisible by heads")


@dataclass(frozen=True)
class TrainConfig(_MappingMixin):
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 3e-4
    lr_floor: float = 1e-6
    weight_decay: float = 1e-2
    seed: int = 0
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    augment_crop: bool = True
    augment_mask: bool = True
    augment_rotate: bool = True
    image_size: int = 64
    report_source: str = "ground-truth"
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise SGSegFormatException("epochs and batch_size must be positive")
        if not (0 < self.lr_floor < self.learning_rate):
            raise SGSegFormatException("Need 0 < lr_floor < learning_rate")
        if self.lambda_dice < 0 or self.lambda_bce < 0 or self.lambda_dice + self.lambda_bce <= 0:
            raise SGSegFormatException("Loss weights must be non-negative and not both zero")
        if self.report_source not in REPORT_SOURCES:
            raise SGSegFormatException(
                "report_source must be one of {}".format(", ".join(REPORT_SOURCES))
            )


CONFIG_CLASSES = (GeneratorConfig, SegNetConfig, DetectorConfig, TrainConfig)


def known_keys():
    keys = set()
    for cls in CONFIG_CLASSES:
        keys |= cls.field_names()
    return keys


def unknown_keys(mapping):
    return sorted(set(mapping) - known_keys())
