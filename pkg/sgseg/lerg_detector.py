"""
Localization-enhanced report generation.

:class:`ObjectDetector` is a small RT-DETR style network: a three stage
convolutional backbone, self-attention over the coarsest map, cross-scale
fusion and a query decoder producing the object predictions ``X``.
:class:`LERGDetector` turns ``X`` into six region features with one learned
query per lung zone, ``A = softmax(X q^T)^T X``, and classifies each region
with its own linear head. :class:`SimpleLocalizer` is the pooled-CNN
baseline without detection decoder or aggregation.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from sgseg.config import DetectorConfig, total_stride
from sgseg.diffkit import (
    ConvStage,
    MultiHeadAttention,
    TransformerLayer,
    UpsampleMerge,
    init_parameters,
    sine_position_encoding,
)
from sgseg.exceptions import DataValidationException, ShapeException
from sgseg.locparse import NUM_REGIONS, LocationLabel, synthesize_report
from sgseg.seg_net import as_image_batch

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7


@dataclass
class ObjectPredictions:
    # (batch, n_queries, d_q)
    X: torch.Tensor

    @property
    def num_queries(self):
        return self.X.shape[-2]


@dataclass
class DetectorOutput:
    probabilities: np.ndarray
    label: LocationLabel
    tau: float

    @property
    def report(self):
        return synthesize_report(self.label)


def aggregation_weights(X, queries):
    """``softmax(X q_r)`` over the object queries, ``(..., n_queries, regions)``."""
    if X.shape[-1] != queries.shape[-1]:
        raise ShapeException(
            "Prediction size {} != query size {}".format(X.shape[-1], queries.shape[-1])
        )
    return torch.softmax(torch.matmul(X, queries.transpose(-2, -1)), dim=-2)


def aggregate(X, queries):
    """
    Location-based attention aggregation. Row ``r`` of the result is the
    convex combination of the rows of ``X`` weighted by ``softmax(X q_r)``.

    :param X: ``(..., n_queries, d)`` object predictions
    :param queries: ``(regions, d)`` location queries
    :return: ``(..., regions, d)``
    """
    weights = aggregation_weights(X, queries)
    return torch.matmul(weights.transpose(-2, -1), X)


def classification_head(A, weight, bias):
    """One linear unit per region applied to the matching row of ``A``; logits."""
    return (A * weight).sum(dim=-1) + bias


def _as_label_tensor(y, like):
    y = torch.as_tensor(y)
    if y.shape[-1] != NUM_REGIONS:
        raise DataValidationException("Expected {} labels per sample, got {}".format(NUM_REGIONS, y.shape[-1]))
    if not torch.all((y == 0) | (y == 1)):
        raise DataValidationException("Location labels must be binary")
    return y.to(like.dtype)


def bce_loss(p, y, eps=BCE_EPSILON):
    """
    Mean binary cross-entropy over the six regions (and over the batch),
    with probabilities clamped to ``[eps, 1 - eps]``.
    """
    y = _as_label_tensor(y, p)
    p = p.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


class RegionHeads(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(NUM_REGIONS, dim))
        self.bias = nn.Parameter(torch.zeros(NUM_REGIONS))

    def forward(self, A):
        return classification_head(A, self.weight, self.bias)


class QueryDecoderLayer(nn.Module):
    """Post-norm DETR decoder layer: self-attention, cross-attention, FFN."""

    def __init__(self, dim, heads, ffn_dim=None):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim or 2 * dim)
        self.linear2 = nn.Linear(ffn_dim or 2 * dim, dim)
        self.norm3 = nn.LayerNorm(dim)

    with_pos_embed = staticmethod(TransformerLayer.with_pos_embed)

    def forward(self, tgt, query_pos, memory, memory_pos):
        q = k = self.with_pos_embed(tgt, query_pos)
        out, _ = self.self_attn(q, k, values=tgt)
        tgt = self.norm1(tgt + out)

        out, weights = self.cross_attn(
            self.with_pos_embed(tgt, query_pos), self.with_pos_embed(memory, memory_pos), values=memory
        )
        tgt = self.norm2(tgt + out)

        tgt = self.norm3(tgt + self.linear2(nn.functional.gelu(self.linear1(tgt))))
        return tgt, weights


def _backbone(config):
    channels = (1,) + tuple(config.widths)
    return nn.ModuleList(
        ConvStage(channels[i], channels[i + 1], stride)
        for i, stride in enumerate(config.strides)
    )


class ObjectDetector(nn.Module):
    def __init__(self, config):
        super().__init__()
        d = config.hidden_dim
        self.config = config
        self.backbone = _backbone(config)
        self.input_proj = nn.ModuleList(nn.Conv2d(w, d, 1) for w in config.widths[1:])

        coarse = config.image_size // total_stride(config.strides)
        self.pos_embed = nn.Parameter(torch.zeros(coarse * coarse, d))
        self.encoder = TransformerLayer(d, config.heads)
        self.fusion = UpsampleMerge(d, d, d)

        self.query_embed = nn.Parameter(torch.zeros(config.num_queries, d))
        self.decoder = nn.ModuleList(
            QueryDecoderLayer(d, config.heads) for _ in range(config.decoder_layers)
        )

    def forward(self, images):
        side = images.shape[-1]
        if images.shape[-2] != side or side != self.config.image_size:
            raise ShapeException(
                "Detector expects {0}x{0} images, got {1}".format(
                    self.config.image_size, tuple(images.shape[-2:])
                )
            )

        features = []
        x = images
        for stage in self.backbone:
            x = stage(x)
            features.append(x)

        middle = self.input_proj[0](features[1])
        coarse = self.input_proj[1](features[2])
        batch, d, h, w = coarse.shape

        # intra-scale interaction on the coarsest map
        flat = coarse.flatten(2).transpose(1, 2)
        flat, _ = self.encoder(flat, pos=self.pos_embed)
        coarse = flat.transpose(1, 2).reshape(batch, d, h, w)

        fused = self.fusion(coarse, middle)
        memory = fused.flatten(2).transpose(1, 2)
        memory_pos = sine_position_encoding(fused.shape[-2], fused.shape[-1], d, dtype=memory.dtype)

        query_pos = self.query_embed.unsqueeze(0).expand(batch, -1, -1)
        tgt = torch.zeros_like(query_pos)
        for layer in self.decoder:
            tgt, _ = layer(tgt, query_pos, memory, memory_pos)
        return tgt


class _LabelPredictor:
    """Shared inference surface of the detector architectures."""

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def probabilities(self, images):
        return torch.sigmoid(self(as_image_batch(images).to(self.dtype)))

    @torch.no_grad()
    def predict_batch(self, images, tau=0.5):
        if not 0.0 < tau < 1.0:
            raise DataValidationException("Threshold tau must be within (0, 1), got {}".format(tau))
        p = self.probabilities(images).double().numpy()
        return [
            DetectorOutput(probabilities=row, label=LocationLabel(row >= tau), tau=tau)
            for row in p
        ]

    def predict_labels(self, image, tau=0.5):
        return self.predict_batch(image, tau)[0]

    def generate_report(self, image, tau=0.5):
        return self.predict_labels(image, tau).report


class LERGDetector(_LabelPredictor, nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or DetectorConfig()
        self.detector = ObjectDetector(self.config)
        self.location_queries = nn.Parameter(torch.zeros(NUM_REGIONS, self.config.hidden_dim))
        self.heads = RegionHeads(self.config.hidden_dim)
        init_parameters(self, seed)

    def detect(self, images):
        return ObjectPredictions(self.detector(as_image_batch(images).to(self.dtype)))

    def forward(self, images):
        """Region logits, ``(batch, 6)``."""
        X = self.detector(images)
        return self.heads(aggregate(X, self.location_queries))


class SimpleLocalizer(_LabelPredictor, nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or DetectorConfig(architecture="simple")
        self.backbone = _backbone(self.config)
        self.classifier = nn.Linear(self.config.widths[-1], NUM_REGIONS)
        init_parameters(self, seed)

    def forward(self, images):
        x = images
        for stage in self.backbone:
            x = stage(x)
        return self.classifier(x.mean(dim=(-2, -1)))


def build_detector(config=None, seed=0):
    config = config or DetectorConfig()
    if config.architecture == "simple":
        return SimpleLocalizer(config, seed)
    return LERGDetector(config, seed)
