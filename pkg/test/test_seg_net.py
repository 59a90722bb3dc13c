import numpy as np
import pytest
import torch

from sgseg.config import SegNetConfig
from sgseg.diffkit import check_gradients
from sgseg.exceptions import ShapeException
from sgseg.seg_net import (
    CLS,
    PAD,
    UNK,
    LanguageGuidedUNet,
    as_image_batch,
    batch_token_ids,
    encode_tokens,
    importance_by_group,
    tokenize,
)

REPORT = "Bilateral pulmonary infection, two infected areas, upper left lung and lower right lung."
OTHER = "Unilateral pulmonary infection, one infected area, middle left lung."

MICRO = SegNetConfig(
    image_size=16, widths=(4, 4, 8, 8), strides=(2, 2, 2, 2),
    text_dim=8, text_heads=2, text_layers=1, attn_dim=8, attn_heads=2,
)


@pytest.fixture(scope="module")
def model():
    return LanguageGuidedUNet(seed=0).eval()


def _image(seed=0, size=64):
    return np.random.default_rng(seed).uniform(size=(size, size)).astype(np.float32)


def test_tokenize_splits_punctuation():
    assert tokenize("No pulmonary infection.") == ["no", "pulmonary", "infection", "."]


def test_encode_tokens_pads_and_marks():
    sequence = encode_tokens("No pulmonary infection.")
    assert len(sequence.ids) == 24
    assert sequence.tokens[:5] == (CLS, "no", "pulmonary", "infection", ".")
    assert sequence.tokens[5:] == (PAD,) * 19
    assert sequence.length == 5
    assert sequence.report_positions == [1, 2, 3, 4]


def test_encode_tokens_empty_report():
    sequence = encode_tokens("")
    assert sequence.tokens == (CLS,) + (PAD,) * 23
    assert sequence.report_positions == []


def test_encode_tokens_truncates():
    sequence = encode_tokens(" ".join(["lung"] * 40))
    assert len(sequence.ids) == 24
    assert all(sequence.mask)


def test_unknown_words_map_to_unk():
    assert encode_tokens("ground glass").tokens[1:3] == (UNK, UNK)


def test_one_token_difference():
    a = encode_tokens("upper left lung")
    b = encode_tokens("upper right lung")
    assert sum(x != y for x, y in zip(a.ids, b.ids)) == 1


def test_batch_token_ids():
    ids, mask, sequences = batch_token_ids([REPORT, ""], 24)
    assert ids.shape == mask.shape == (2, 24)
    assert mask[1].sum().item() == 1
    assert len(sequences) == 2


def test_encode_image_shapes(model):
    pyramid = model.encode_image(_image())
    assert pyramid.shapes == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]


def test_encode_image_large_input(model):
    pyramid = model.encode_image(np.zeros((224, 224), dtype=np.float32))
    assert pyramid.shapes[-1] == (128, 7, 7)


def test_zero_image_gives_zero_pyramid(model):
    pyramid = model.encode_image(np.zeros((64, 64), dtype=np.float32))
    assert all(not stage.any() for stage in pyramid.stages)


@pytest.mark.parametrize("shape", [(64, 32), (60, 60), (2, 3, 64, 64), (1, 1, 1, 64, 64)])
def test_encode_image_rejects_shapes(model, shape):
    with pytest.raises(ShapeException):
        model.encode_image(np.zeros(shape, dtype=np.float32))


def test_as_image_batch_shapes():
    assert as_image_batch(np.zeros((8, 8))).shape == (1, 1, 8, 8)
    assert as_image_batch(np.zeros((3, 8, 8))).shape == (3, 1, 8, 8)
    assert as_image_batch(torch.zeros(2, 1, 8, 8)).shape == (2, 1, 8, 8)


def test_encode_text_empty_report_pools_cls(model):
    with torch.no_grad():
        memory = model.encode_text("")
    assert memory.tokens.shape == (1, 24, 64)
    torch.testing.assert_close(memory.pooled[0], memory.tokens[0, 0])


def test_encode_text_is_deterministic(model):
    with torch.no_grad():
        a, b = model.encode_text(REPORT), model.encode_text(REPORT)
    torch.testing.assert_close(a.tokens, b.tokens)
    torch.testing.assert_close(a.pooled, b.pooled)


def test_segment_shapes_and_range(model):
    with torch.no_grad():
        result = model.segment(_image(), REPORT)
    assert result.logits.shape == (1, 64, 64)
    assert [tuple(a.shape) for a in result.attention] == [
        (1, 4, 4, 24), (1, 4, 16, 24), (1, 4, 64, 24), (1, 4, 256, 24),
    ]
    probabilities = result.probabilities
    assert torch.isfinite(probabilities).all()
    assert ((probabilities > 0) & (probabilities < 1)).all()
    assert set(result.binarize().unique().tolist()) <= {0, 1}


def test_segment_is_deterministic(model):
    with torch.no_grad():
        a = model.segment(_image(), REPORT)
        b = model.segment(_image(), REPORT)
    assert torch.equal(a.logits, b.logits)


def test_reports_change_the_logits(model):
    with torch.no_grad():
        a = model.segment(_image(), REPORT).logits
        b = model.segment(_image(), OTHER).logits
    assert not torch.allclose(a, b)


def test_zero_value_projections_remove_the_text_path():
    model = LanguageGuidedUNet(seed=3).eval()
    with torch.no_grad():
        for cross in model.decoder.attentions:
            cross.attention.value.weight.zero_()
            cross.attention.value.bias.zero_()
        a = model.segment(_image(), REPORT).logits
        b = model.segment(_image(), OTHER).logits
        c = model.segment(_image(), "").logits
    torch.testing.assert_close(a, b)
    torch.testing.assert_close(a, c)


def test_forward_matches_segment(model):
    ids, mask, _ = batch_token_ids([REPORT, OTHER], 24)
    images = np.stack([_image(1), _image(2)])
    with torch.no_grad():
        logits = model(images, ids, mask)
        expected = model.segment(images, [REPORT, OTHER]).logits
    torch.testing.assert_close(logits, expected)


def test_batch_size_mismatch(model):
    with torch.no_grad():
        pyramid = model.encode_image(np.stack([_image(1), _image(2)]))
        text = model.encode_text([REPORT])
        with pytest.raises(ShapeException):
            model.guided_decode(pyramid, text)


def test_word_importance_sums_to_one(model):
    scores = model.word_importance(_image(), REPORT)
    tokens = [t for t, _ in scores]
    assert tokens[:3] == ["bilateral", "pulmonary", "infection"]
    assert CLS not in tokens and PAD not in tokens
    assert sum(s for _, s in scores) == pytest.approx(1.0, abs=1e-5)
    assert all(s >= 0 for _, s in scores)


def test_word_importance_single_token(model):
    assert model.word_importance(_image(), "infection") == [("infection", pytest.approx(1.0))]


def test_word_importance_empty_report(model):
    assert model.word_importance(_image(), "") == []


def test_attention_map(model):
    attention = model.attention_map(_image(), REPORT)
    assert attention.shape == (64, 64)
    assert np.isfinite(attention).all()
    assert (attention >= 0).all() and (attention <= 1 + 1e-6).all()


def test_importance_by_group():
    location, filler = importance_by_group([("upper", 0.4), ("left", 0.2), ("pulmonary", 0.1), ("and", 0.3)])
    assert location == pytest.approx(0.3)
    assert filler == pytest.approx(0.1)
    assert np.isnan(importance_by_group([("and", 1.0)])[0])


def test_micro_segmenter_gradients():
    model = LanguageGuidedUNet(MICRO, seed=0)
    ids, mask, _ = batch_token_ids([OTHER], MICRO.max_tokens)
    images = torch.from_numpy(_image(0, size=16))[None, None]
    report = check_gradients(model, [images, ids, mask])
    report.assert_passed()
    assert report.checked >= 200


def test_padding_tokens_receive_no_attention(model):
    with torch.no_grad():
        result = model.segment(_image(), "No pulmonary infection.")
    for weights in result.attention:
        assert not weights[..., 5:].any()
        torch.testing.assert_close(weights.sum(-1), torch.ones_like(weights.sum(-1)))
