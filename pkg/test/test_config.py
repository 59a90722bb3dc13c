import pytest

from sgseg.config import (
    DetectorConfig,
    GeneratorConfig,
    SegNetConfig,
    TrainConfig,
    format_config,
    parse_config_text,
    read_config_file,
    unknown_keys,
)
from sgseg.exceptions import SGSegFormatException


def test_parse_config_text_skips_comments_and_blanks():
    text = "# desk run\n\nepochs = 3\n  batch_size=4  \nreport_source = empty\n"
    assert parse_config_text(text) == {
        "epochs": "3",
        "batch_size": "4",
        "report_source": "empty",
    }


def test_parse_config_text_names_malformed_line():
    with pytest.raises(SGSegFormatException, match="line 2"):
        parse_config_text("epochs = 3\nthis is not valid\n")


def test_read_config_file_round_trips_format_config(tmp_path):
    mapping = {"seed": "4", "epochs": "2"}
    path = tmp_path / "run.cfg"
    path.write_text(format_config(mapping), encoding="utf-8")
    assert read_config_file(str(path)) == mapping


def test_from_mapping_coerces_types():
    cfg = TrainConfig.from_mapping({
        "epochs": "3",
        "learning_rate": "0.001",
        "augment_rotate": "false",
        "report_source": "synthesized",
    })
    assert cfg.epochs == 3
    assert cfg.learning_rate == pytest.approx(1e-3)
    assert cfg.augment_rotate is False
    assert cfg.report_source == "synthesized"


def test_from_mapping_tuple_fields_and_overrides():
    cfg = SegNetConfig.from_mapping({"widths": "8,8,16,16", "image_size": "32"}, text_dim=None)
    assert cfg.widths == (8, 8, 16, 16)
    assert cfg.image_size == 32
    assert cfg.text_dim == 64


def test_to_mapping_round_trip():
    cfg = DetectorConfig(image_size=32, architecture="simple")
    assert DetectorConfig.from_mapping(cfg.to_mapping()) == cfg


def test_unknown_keys():
    assert unknown_keys({"epochs": "1", "colour": "red"}) == ["colour"]


@pytest.mark.parametrize("factory", [
    lambda: TrainConfig(lr_floor=1e-3, learning_rate=1e-4),
    lambda: TrainConfig(epochs=0),
    lambda: TrainConfig(report_source="captions"),
    lambda: TrainConfig(lambda_dice=0.0, lambda_bce=0.0),
    lambda: GeneratorConfig(image_size=16),
    lambda: GeneratorConfig(lesion_count_weights=(1.0, 1.0)),
    lambda: SegNetConfig(strides=(4, 2, 4, 2)),
    lambda: SegNetConfig(image_size=48),
    lambda: DetectorConfig(architecture="resnet"),
])
def test_invalid_configs_are_rejected(factory):
    with pytest.raises(SGSegFormatException):
        factory()


def test_invalid_value_is_reported():
    with pytest.raises(SGSegFormatException, match="epochs"):
        TrainConfig.from_mapping({"epochs": "many"})
