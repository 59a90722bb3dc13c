"""
Checkpoint archive.

Layout::

    SGSEGCKPT1
    kind = segmenter
    epoch = 12
    config_hash = 3fa1c09b2d4e
    provenance = sgseg 0.1.0 config=3fa1c09b2d4e seed=0
    config.image_size = 64
    ...
    metric.val_dice = 0.8123
    rng = <hex>
    param image_encoder.stages.0.conv.weight float32 16,1,3,3
    ...
    end
    <little-endian float32 payloads, in header order>
"""

import logging
import re
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from sgseg.config import DetectorConfig, SegNetConfig
from sgseg.exceptions import (
    CheckpointException,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from sgseg.lerg_detector import build_detector
from sgseg.seg_net import LanguageGuidedUNet
from sgseg.utils import config_hash

logger = logging.getLogger(__name__)

MAGIC = b"SGSEGCKPT"
FORMAT_VERSION = 1
KINDS = ("segmenter", "detector")

_re_param = re.compile(r"^param (?P<name>\S+) (?P<dtype>\w+) (?P<shape>[\d,]*)$")
_re_field = re.compile(r"^(?P<key>[\w.]+) = (?P<value>.*)$")


@dataclass
class Checkpoint:
    kind: str
    epoch: int
    config: dict
    params: OrderedDict
    metrics: dict = field(default_factory=dict)
    rng_state: bytes = b""
    provenance: str = ""

    @property
    def image_size(self):
        return int(self.config["image_size"])

    @property
    def config_hash(self):
        return config_hash(self.config)


def kind_of(model):
    return "segmenter" if isinstance(model, LanguageGuidedUNet) else "detector"


def save_checkpoint(path, model, epoch=0, metrics=None, rng_state=None, provenance=""):
    config = model.config.to_mapping()
    lines = [
        MAGIC.decode("ascii") + str(FORMAT_VERSION),
        "kind = {}".format(kind_of(model)),
        "epoch = {}".format(int(epoch)),
        "config_hash = {}".format(config_hash(config)),
        "provenance = {}".format(provenance),
    ]
    lines.extend("config.{} = {}".format(k, config[k]) for k in sorted(config))
    lines.extend("metric.{} = {!r}".format(k, float(v)) for k, v in sorted((metrics or {}).items()))

    if rng_state is None:
        rng_state = torch.get_rng_state().numpy().tobytes()
    lines.append("rng = {}".format(bytes(rng_state).hex()))

    payloads = []
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy().astype("<f4")
        lines.append("param {} float32 {}".format(name, ",".join(str(d) for d in array.shape)))
        payloads.append(array.tobytes())
    lines.append("end")

    with open(path, "wb") as fp:
        fp.write(("\n".join(lines) + "\n").encode("utf-8"))
        for payload in payloads:
            fp.write(payload)

    logger.info("Saved %s checkpoint to %s", kind_of(model), path)


def _read_header(fp, path):
    magic = fp.readline().rstrip(b"\n")
    if not magic.startswith(MAGIC):
        raise CheckpointException("{} is not an sgseg checkpoint".format(path))
    if magic != MAGIC + str(FORMAT_VERSION).encode("ascii"):
        raise CheckpointVersionError(
            "{}: unsupported checkpoint format {!r}, expected version {}".format(
                path, magic.decode("ascii", "replace"), FORMAT_VERSION
            )
        )

    fields, params = {}, []
    for raw in fp:
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            return fields, params

        res = _re_param.match(line)
        if res:
            if res["dtype"] != "float32":
                raise CheckpointException("{}: unsupported dtype {}".format(path, res["dtype"]))
            shape = tuple(int(d) for d in res["shape"].split(",") if d)
            params.append((res["name"], shape))
            continue

        res = _re_field.match(line)
        if not res:
            raise CheckpointException("{}: malformed header line {!r}".format(path, line))
        fields[res["key"]] = res["value"]

    raise CheckpointTruncatedError("{}: header ends before 'end'".format(path))


def load_checkpoint(path, image_size=None):
    """
    Read an archive. When ``image_size`` is given it must match the image
    size recorded in the archive.
    """
    try:
        fp = open(path, "rb")
    except OSError as ex:
        raise CheckpointException("Cannot open checkpoint {}: {}".format(path, ex.strerror))

    with fp:
        fields, shapes = _read_header(fp, path)
        payload = fp.read()

    kind = fields.get("kind")
    if kind not in KINDS:
        raise CheckpointException("{}: unknown checkpoint kind {!r}".format(path, kind))

    config = {k[len("config."):]: v for k, v in fields.items() if k.startswith("config.")}
    if image_size is not None and int(config.get("image_size", -1)) != int(image_size):
        raise CheckpointShapeError(
            "{}: checkpoint image size {} does not match declared size {}".format(
                path, config.get("image_size"), image_size
            )
        )

    params = OrderedDict()
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        size = 4 * count
        if offset + size > len(payload):
            raise CheckpointTruncatedError(
                "{}: truncated payload for parameter {}".format(path, name)
            )
        params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += size
    if offset != len(payload):
        raise CheckpointTruncatedError(
            "{}: payload has {} unexpected trailing bytes".format(path, len(payload) - offset)
        )

    return Checkpoint(
        kind=kind,
        epoch=int(fields.get("epoch", 0)),
        config=config,
        params=params,
        metrics={k[len("metric."):]: float(v) for k, v in fields.items() if k.startswith("metric.")},
        rng_state=bytes.fromhex(fields.get("rng", "")),
        provenance=fields.get("provenance", ""),
    )


def build_model(checkpoint):
    if checkpoint.kind == "segmenter":
        model = LanguageGuidedUNet(SegNetConfig.from_mapping(checkpoint.config))
    else:
        model = build_detector(DetectorConfig.from_mapping(checkpoint.config))

    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    stored = {name: tuple(a.shape) for name, a in checkpoint.params.items()}
    if expected != stored:
        diff = sorted(set(expected.items()) ^ set(stored.items()))
        raise CheckpointShapeError(
            "Checkpoint parameters do not match the model: {}".format(
                ", ".join("{} {}".format(n, s) for n, s in diff[:5])
            )
        )

    model.load_state_dict(
        OrderedDict((name, torch.from_numpy(a.copy())) for name, a in checkpoint.params.items())
    )
    model.eval()
    return model


def checkpoint_roundtrip(path, image_size=None, kind=None):
    """Load an archive and rebuild the model it describes."""
    checkpoint = load_checkpoint(path, image_size)
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointException(
            "{} holds a {} checkpoint, expected a {}".format(path, checkpoint.kind, kind)
        )
    return build_model(checkpoint)
