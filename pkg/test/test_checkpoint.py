import pytest
import torch

from sgseg.checkpoint import (
    MAGIC,
    build_model,
    checkpoint_roundtrip,
    load_checkpoint,
    save_checkpoint,
)
from sgseg.config import DetectorConfig, SegNetConfig
from sgseg.exceptions import (
    CheckpointException,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from sgseg.lerg_detector import LERGDetector, SimpleLocalizer
from sgseg.seg_net import LanguageGuidedUNet

SMALL_SEG = SegNetConfig(image_size=32, widths=(4, 8, 8, 16), strides=(2, 2, 2, 2), text_dim=16,
                         text_heads=2, text_layers=1, attn_dim=8, attn_heads=2)
SMALL_DET = DetectorConfig(image_size=32, widths=(4, 8, 8), strides=(2, 2, 2), hidden_dim=8, heads=2,
                           num_queries=4, decoder_layers=1)


@pytest.mark.parametrize("model", [
    LanguageGuidedUNet(SMALL_SEG, seed=1),
    LERGDetector(SMALL_DET, seed=1),
    SimpleLocalizer(DetectorConfig(image_size=32, architecture="simple"), seed=1),
])
def test_save_then_load_is_exact(tmp_path, model):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, model, epoch=3, metrics={"val_dice": 0.8123}, provenance="sgseg 0.1.0 config=x seed=1")

    checkpoint = load_checkpoint(path)
    assert checkpoint.epoch == 3
    assert checkpoint.metrics == {"val_dice": 0.8123}
    assert checkpoint.provenance == "sgseg 0.1.0 config=x seed=1"
    assert checkpoint.config == model.config.to_mapping()
    assert checkpoint.image_size == 32

    restored = build_model(checkpoint)
    assert type(restored) is type(model)
    assert not restored.training
    for (name, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert torch.equal(a, b), name


def test_rng_state_is_stored(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, LERGDetector(SMALL_DET), rng_state=b"\x01\x02\xff")
    assert load_checkpoint(path).rng_state == b"\x01\x02\xff"


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), LanguageGuidedUNet(SMALL_SEG))
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(CheckpointTruncatedError, match="truncated payload"):
        load_checkpoint(str(path))


def test_trailing_bytes(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), LanguageGuidedUNet(SMALL_SEG))
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(str(path))


def test_header_without_end(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(MAGIC + b"1\nkind = segmenter\n")
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(str(path))


def test_version_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), LanguageGuidedUNet(SMALL_SEG))
    path.write_bytes(path.read_bytes().replace(MAGIC + b"1", MAGIC + b"2", 1))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(str(path))


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"\x89PNG\r\n")
    with pytest.raises(CheckpointException):
        load_checkpoint(str(path))
    with pytest.raises(CheckpointException):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_declared_image_size_mismatch(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, LanguageGuidedUNet(SMALL_SEG))
    assert load_checkpoint(path, image_size=32).kind == "segmenter"
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path, image_size=64)


def test_parameter_shape_mismatch(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, LanguageGuidedUNet(SMALL_SEG))
    checkpoint = load_checkpoint(path)
    checkpoint.config["text_dim"] = "32"
    with pytest.raises(CheckpointShapeError):
        build_model(checkpoint)


def test_error_codes_are_distinct():
    codes = {CheckpointVersionError.code, CheckpointTruncatedError.code, CheckpointShapeError.code}
    assert len(codes) == 3


def test_roundtrip_checks_kind(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, LERGDetector(SMALL_DET))
    assert isinstance(checkpoint_roundtrip(path, image_size=32, kind="detector"), LERGDetector)
    with pytest.raises(CheckpointException):
        checkpoint_roundtrip(path, kind="segmenter")
