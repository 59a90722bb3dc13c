"""
Language-guided U-Net.

The image encoder is a stack of four :class:`~sgseg.diffkit.ConvStage`; the
text encoder is a small trainable transformer over a fixed report vocabulary.
The decoder walks the pyramid from the coarsest stage to the finest; at each
stage image positions query the report tokens and the attended text is added
residually to the image features before the skip merge.
"""

import logging
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sgseg.config import SegNetConfig, total_stride
from sgseg.diffkit import (
    ConvStage,
    MultiHeadAttention,
    TransformerLayer,
    UpsampleMerge,
    init_parameters,
    sine_position_encoding,
)
from sgseg.exceptions import ShapeException
from sgseg.locparse import FILLER_WORDS, GRAMMAR_WORDS, LOCATION_WORDS

logger = logging.getLogger(__name__)

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PUNCTUATION = (".", ",", ";", ":", "-")
VOCAB = (PAD, CLS, UNK) + GRAMMAR_WORDS + PUNCTUATION
TOKEN_IDS = {token: i for i, token in enumerate(VOCAB)}

_re_token = re.compile(r"\w+|[^\w\s]")


def tokenize(report):
    return _re_token.findall(report.lower())


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    ids: tuple
    mask: tuple

    @property
    def length(self):
        return sum(self.mask)

    @property
    def report_positions(self):
        """Positions of real report tokens, ``[CLS]`` excluded."""
        return [i for i in range(1, len(self.ids)) if self.mask[i]]


def encode_tokens(report, max_tokens=24):
    words = tokenize(report)
    if len(words) > max_tokens - 1:
        logger.debug("Report truncated to %d tokens: %r", max_tokens, report)
        words = words[:max_tokens - 1]

    tokens = (CLS,) + tuple(words)
    ids = tuple(TOKEN_IDS.get(t, TOKEN_IDS[UNK]) for t in tokens)
    padding = max_tokens - len(ids)
    return TokenSequence(
        tokens=tokens + (PAD,) * padding,
        ids=ids + (TOKEN_IDS[PAD],) * padding,
        mask=(True,) * len(ids) + (False,) * padding,
    )


def batch_token_ids(reports, max_tokens=24):
    sequences = [encode_tokens(r, max_tokens) for r in reports]
    ids = torch.tensor([s.ids for s in sequences], dtype=torch.long)
    mask = torch.tensor([s.mask for s in sequences], dtype=torch.bool)
    return ids, mask, sequences


@dataclass
class TextMemory:
    tokens: torch.Tensor
    mask: torch.Tensor
    pooled: torch.Tensor
    sequences: list = field(default_factory=list)


@dataclass
class FeaturePyramid:
    stages: list
    input_size: tuple

    @property
    def shapes(self):
        return [tuple(s.shape[1:]) for s in self.stages]


@dataclass
class SegLogits:
    logits: torch.Tensor
    # per decoder stage, coarsest first: (batch, heads, pixels, tokens)
    attention: list = field(default_factory=list)

    @property
    def probabilities(self):
        return torch.sigmoid(self.logits)

    def binarize(self, threshold=0.5):
        return (self.probabilities >= threshold).to(torch.uint8)


class TextEncoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.max_tokens = config.max_tokens
        self.token_embedding = nn.Embedding(len(VOCAB), config.text_dim)
        self.position_embedding = nn.Parameter(torch.zeros(config.max_tokens, config.text_dim))
        self.layers = nn.ModuleList(
            TransformerLayer(config.text_dim, config.text_heads)
            for _ in range(config.text_layers)
        )

    def forward(self, token_ids, token_mask):
        x = self.token_embedding(token_ids) + self.position_embedding[:token_ids.shape[1]]
        for layer in self.layers:
            x, _ = layer(x, token_mask)

        weights = token_mask.to(x.dtype).unsqueeze(-1)
        pooled = (x * weights).sum(dim=1) / weights.sum(dim=1)
        return x, pooled


class ImageEncoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        channels = (1,) + tuple(config.widths)
        self.strides = tuple(config.strides)
        self.stages = nn.ModuleList(
            ConvStage(channels[i], channels[i + 1], stride)
            for i, stride in enumerate(self.strides)
        )

    def forward(self, images):
        side = images.shape[-1]
        if images.shape[-2] != side:
            raise ShapeException("Expected a square image, got {}".format(tuple(images.shape[-2:])))
        if side % total_stride(self.strides):
            raise ShapeException(
                "Image side {} is not divisible by {}".format(side, total_stride(self.strides))
            )

        stages = []
        x = images
        for stage in self.stages:
            x = stage(x)
            stages.append(x)
        return stages


class CrossModalAttention(nn.Module):
    """Image positions (plus a sine encoding) attend to report tokens; residual."""

    def __init__(self, channels, text_dim, attn_dim, heads):
        super().__init__()
        self.attention = MultiHeadAttention(channels, text_dim, attn_dim, heads, out_dim=channels)

    def forward(self, features, text_tokens, text_mask):
        batch, channels, height, width = features.shape
        flat = features.flatten(2).transpose(1, 2)
        pos = sine_position_encoding(height, width, channels, dtype=features.dtype)
        out, weights = self.attention(flat + pos, text_tokens, text_mask, values=text_tokens)
        fused = flat + out
        return fused.transpose(1, 2).reshape(batch, channels, height, width), weights


class GuidedDecoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        widths = tuple(config.widths)
        self.attentions = nn.ModuleList(
            CrossModalAttention(w, config.text_dim, config.attn_dim, config.attn_heads)
            for w in reversed(widths)
        )
        self.merges = nn.ModuleList(
            UpsampleMerge(widths[i + 1], widths[i], widths[i])
            for i in reversed(range(len(widths) - 1))
        )
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, stages, text, output_size):
        skips = list(reversed(stages))
        attention = []

        x = skips[0]
        for i, cross in enumerate(self.attentions):
            if i:
                x = self.merges[i - 1](x, skips[i])
            x, weights = cross(x, text.tokens, text.mask)
            attention.append(weights)

        logits = F.interpolate(self.head(x), size=output_size, mode="bilinear", align_corners=False)
        return logits[:, 0], attention


def as_image_batch(images):
    """Accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)`` arrays or tensors."""
    if not isinstance(images, torch.Tensor):
        images = torch.from_numpy(np.asarray(images, dtype=np.float32))
    if images.dim() == 2:
        images = images[None, None]
    elif images.dim() == 3:
        images = images[:, None]
    elif images.dim() != 4 or images.shape[1] != 1:
        raise ShapeException("Unsupported image batch shape {}".format(tuple(images.shape)))
    return images


class LanguageGuidedUNet(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or SegNetConfig()
        self.image_encoder = ImageEncoder(self.config)
        self.text_encoder = TextEncoder(self.config)
        self.decoder = GuidedDecoder(self.config)
        init_parameters(self, seed)

    @property
    def dtype(self):
        return self.decoder.head.weight.dtype

    def _images(self, images):
        return as_image_batch(images).to(self.dtype)

    def encode_image(self, images):
        images = self._images(images)
        return FeaturePyramid(self.image_encoder(images), tuple(images.shape[-2:]))

    def encode_text(self, reports):
        if isinstance(reports, str):
            reports = [reports]
        ids, mask, sequences = batch_token_ids(reports, self.config.max_tokens)
        tokens, pooled = self.text_encoder(ids, mask)
        return TextMemory(tokens=tokens, mask=mask, pooled=pooled, sequences=sequences)

    def guided_decode(self, pyramid, text):
        if pyramid.stages[0].shape[0] != text.tokens.shape[0]:
            raise ShapeException(
                "Batch size mismatch: {} images vs {} reports".format(
                    pyramid.stages[0].shape[0], text.tokens.shape[0]
                )
            )
        logits, attention = self.decoder(pyramid.stages, text, pyramid.input_size)
        return SegLogits(logits=logits, attention=attention)

    def forward(self, images, token_ids, token_mask):
        images = self._images(images)
        tokens, pooled = self.text_encoder(token_ids, token_mask)
        text = TextMemory(tokens=tokens, mask=token_mask, pooled=pooled)
        logits, _ = self.decoder(self.image_encoder(images), text, tuple(images.shape[-2:]))
        return logits

    def segment(self, images, reports):
        images = self._images(images)
        if isinstance(reports, str):
            reports = [reports] * images.shape[0]
        return self.guided_decode(self.encode_image(images), self.encode_text(reports))

    @torch.no_grad()
    def word_importance(self, image, report):
        """
        ``[(token, score)]`` over the report's tokens: coarsest-stage attention
        averaged over pixels and heads, renormalized to sum to 1.
        """
        result = self.segment(image, report)
        sequence = encode_tokens(report, self.config.max_tokens)
        positions = sequence.report_positions
        if not positions:
            return []

        mass = result.attention[0][0].mean(dim=(0, 1))[positions]
        scores = (mass / mass.sum()).tolist()
        return [(sequence.tokens[p], s) for p, s in zip(positions, scores)]

    @torch.no_grad()
    def attention_map(self, image, report):
        """
        Per-pixel attention mass on the report's location words at the finest
        decoder stage (all report tokens when none is present), mean over
        heads, resized to the input with nearest neighbours.
        """
        images = self._images(image)
        result = self.segment(images, report)
        sequence = encode_tokens(report, self.config.max_tokens)

        positions = [p for p in sequence.report_positions if sequence.tokens[p] in LOCATION_WORDS]
        if not positions:
            positions = sequence.report_positions
        if not positions:
            positions = [0]

        weights = result.attention[-1][0].mean(dim=0)[:, positions].sum(dim=-1)
        finest = self.image_encoder.strides[0]
        side = images.shape[-1] // finest
        field_map = weights.reshape(1, 1, side, side)
        return F.interpolate(field_map, size=tuple(images.shape[-2:]), mode="nearest")[0, 0].double().numpy()


def importance_by_group(scores):
    """Mean score over location words and over filler words."""
    location = [s for t, s in scores if t in LOCATION_WORDS]
    filler = [s for t, s in scores if t in FILLER_WORDS]
    return (
        float(np.mean(location)) if location else float("nan"),
        float(np.mean(filler)) if filler else float("nan"),
    )
