"""
Differentiable building blocks shared by the segmenter and the detector.

Autograd comes from torch; this module fixes the contracts on top of it
(shapes, masking semantics, initialisation) and provides
:func:`check_gradients`, a central finite-difference check used to verify
every block in 64-bit precision.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from sgseg.exceptions import GradientCheckException, NumericException, ShapeException

ACTIVATIONS = {
    "gelu": F.gelu,
    "linear": lambda x: x,
}


def _activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ShapeException("Unknown activation: {}".format(name))


def assert_finite(tensor, what="tensor"):
    if not torch.isfinite(tensor).all():
        bad = torch.nonzero(~torch.isfinite(tensor))[0].tolist()
        raise NumericException(
            "Non-finite value in {} at {}".format(what, tuple(bad)), location=(what, tuple(bad))
        )
    return tensor


def scaled_dot_attention(queries, keys, values, mask=None):
    """
    ``softmax(Q K^T / sqrt(d)) V`` over the last two dimensions.

    :param mask: boolean, broadcastable to ``(..., n_q, n_k)``; ``True`` keeps a key.
        Masked keys receive exactly zero weight.
    :return: ``(output, weights)``
    """
    d = queries.shape[-1]
    if d <= 0:
        raise ShapeException("Attention needs a positive feature size")
    if keys.shape[-1] != d:
        raise ShapeException(
            "Query size {} != key size {}".format(d, keys.shape[-1])
        )
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeException("keys and values must have the same length")

    logits = torch.matmul(queries, keys.transpose(-2, -1)) / math.sqrt(d)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool, device=logits.device)
        mask = mask.expand(logits.shape)
        if (~mask).all(dim=-1).any():
            raise NumericException("degenerate attention row")
        logits = logits.masked_fill(~mask, float("-inf"))

    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, values), weights


def conv_stage(inputs, weight, bias, stride, activation="gelu"):
    """3x3 convolution, pointwise nonlinearity, down-sampling by ``stride``."""
    height, width = inputs.shape[-2:]
    if stride not in (1, 2, 4):
        raise ShapeException("Unsupported stride: {}".format(stride))
    if height % stride or width % stride:
        raise ShapeException(
            "Spatial size {}x{} is not divisible by stride {}".format(height, width, stride)
        )
    return _activation(activation)(F.conv2d(inputs, weight, bias, stride=stride, padding=1))


def nearest_upsample(inputs):
    return F.interpolate(inputs, scale_factor=2, mode="nearest")


def upsample_merge(low, skip, weight, bias, activation="gelu"):
    """
    Nearest-neighbour x2 up-sampling of ``low``, channel concatenation with
    ``skip`` (low channels first), then a 3x3 convolution.
    """
    if tuple(skip.shape[-2:]) != (2 * low.shape[-2], 2 * low.shape[-1]):
        raise ShapeException(
            "Skip size {} is not double the low size {}".format(
                tuple(skip.shape[-2:]), tuple(low.shape[-2:])
            )
        )
    merged = torch.cat([nearest_upsample(low), skip], dim=-3)
    return _activation(activation)(F.conv2d(merged, weight, bias, padding=1))


class ConvStage(nn.Module):
    def __init__(self, in_channels, out_channels, stride, activation="gelu"):
        super().__init__()
        self.stride = stride
        self.activation = activation
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)

    def forward(self, inputs):
        return conv_stage(inputs, self.conv.weight, self.conv.bias, self.stride, self.activation)


class UpsampleMerge(nn.Module):
    def __init__(self, low_channels, skip_channels, out_channels, activation="gelu"):
        super().__init__()
        self.activation = activation
        self.conv = nn.Conv2d(low_channels + skip_channels, out_channels, 3, padding=1)

    def forward(self, low, skip):
        return upsample_merge(low, skip, self.conv.weight, self.conv.bias, self.activation)


class MultiHeadAttention(nn.Module):
    """
    Multi-head attention with separate query and key/value input sizes, built
    on :func:`scaled_dot_attention`. Returns per-head weights
    ``(batch, heads, n_q, n_k)`` alongside the output.
    """

    def __init__(self, query_dim, key_dim, attn_dim, heads, out_dim=None):
        super().__init__()
        if attn_dim % heads:
            raise ShapeException("attn_dim {} not divisible by {} heads".format(attn_dim, heads))
        self.heads = heads
        self.query = nn.Linear(query_dim, attn_dim)
        self.key = nn.Linear(key_dim, attn_dim)
        self.value = nn.Linear(key_dim, attn_dim)
        self.output = nn.Linear(attn_dim, out_dim or query_dim)

    def _split(self, x):
        batch, length, dim = x.shape
        return x.view(batch, length, self.heads, dim // self.heads).transpose(1, 2)

    def forward(self, queries, keys, key_mask=None, values=None):
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(keys if values is None else values))

        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :]

        out, weights = scaled_dot_attention(q, k, v, mask)
        batch, _, length, _ = out.shape
        out = out.transpose(1, 2).reshape(batch, length, -1)
        return self.output(out), weights


class TransformerLayer(nn.Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, dim, heads, ffn_dim=None):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim or 2 * dim)
        self.linear2 = nn.Linear(ffn_dim or 2 * dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    @staticmethod
    def with_pos_embed(tensor, pos):
        return tensor if pos is None else tensor + pos

    def forward_ffn(self, x):
        return self.norm2(x + self.linear2(F.gelu(self.linear1(x))))

    def forward(self, x, mask=None, pos=None):
        q = k = self.with_pos_embed(x, pos)
        out, weights = self.self_attn(q, k, mask, values=x)
        x = self.norm1(x + out)
        return self.forward_ffn(x), weights


def sine_position_encoding(height, width, dim, dtype=torch.float32):
    """
    Fixed 2-D sinusoidal encoding, ``(height * width, dim)``; the first half
    of the channels encodes rows, the second half columns.
    """
    rows = (torch.arange(height, dtype=dtype) + 0.5) / height * 2 * math.pi
    cols = (torch.arange(width, dtype=dtype) + 0.5) / width * 2 * math.pi
    row_dim = dim // 2
    col_dim = dim - row_dim

    def encode(positions, size):
        enc = torch.zeros(len(positions), size, dtype=dtype)
        for k in range(0, size, 2):
            freq = 10000 ** (-k / max(size, 1))
            enc[:, k] = torch.sin(positions * freq)
            if k + 1 < size:
                enc[:, k + 1] = torch.cos(positions * freq)
        return enc

    row_enc = encode(rows, row_dim)[:, None, :].expand(height, width, row_dim)
    col_enc = encode(cols, col_dim)[None, :, :].expand(height, width, col_dim)
    return torch.cat([row_enc, col_enc], dim=-1).reshape(height * width, dim)


def init_parameters(module, seed):
    """
    Deterministic initialisation: fan-in scaled uniform weights, zero biases,
    unit LayerNorm gains.
    """
    generator = torch.Generator().manual_seed(seed)
    norm_params = set()
    for sub in module.modules():
        if isinstance(sub, nn.LayerNorm):
            norm_params.add(id(sub.weight))
            norm_params.add(id(sub.bias))

    with torch.no_grad():
        for name, param in module.named_parameters():
            if id(param) in norm_params:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                fan_in = param[0].numel() if param.dim() > 1 else param.numel()
                bound = 1.0 / math.sqrt(fan_in)
                values = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                param.copy_((values * 2 - 1) * bound)
    return module


@dataclass
class GradientReport:
    max_error: float
    worst: tuple
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def assert_passed(self):
        if not self.passed:
            raise GradientCheckException(
                "Gradient check failed: error {:.3e} > {:.1e} at {}".format(
                    self.max_error, self.tolerance, self.worst
                ),
                location=self.worst,
            )
        return self


def _scalarize(outputs):
    if isinstance(outputs, torch.Tensor):
        return outputs.sum()
    if isinstance(outputs, (tuple, list)):
        return sum(_scalarize(o) for o in outputs)
    raise ShapeException("Cannot reduce output of type {}".format(type(outputs).__name__))


def check_gradients(op, inputs, tolerance=1e-4, step=1e-5, max_entries=200, seed=0,
                    check_inputs=True):
    """
    Compare autograd gradients of ``sum(op(*inputs))`` with central finite
    differences, in float64.

    Every entry of each input (and of each parameter when ``op`` is an
    ``nn.Module``) is checked; tensors larger than ``max_entries`` are
    sub-sampled with a seeded generator. The per-entry error is
    ``|a - n| / max(1, |a|, |n|)``, absolute for small gradients and relative
    for large ones.
    """
    inputs = [
        x.detach().to(torch.float64).clone().requires_grad_(check_inputs)
        if isinstance(x, torch.Tensor) and x.is_floating_point() else x
        for x in inputs
    ]

    targets = []
    if isinstance(op, nn.Module):
        op = op.double()
        targets.extend(
            (name, p) for name, p in op.named_parameters() if p.requires_grad
        )
    targets.extend(
        ("input{}".format(i), x) for i, x in enumerate(inputs)
        if isinstance(x, torch.Tensor) and x.requires_grad
    )
    if not targets:
        raise GradientCheckException("Nothing to check: no float inputs or parameters")

    def objective(location):
        value = _scalarize(op(*inputs))
        if not torch.isfinite(value):
            raise NumericException(
                "Non-finite objective while perturbing {}".format(location), location=location
            )
        return value

    value = objective(None)
    grads = torch.autograd.grad(value, [t for _, t in targets], allow_unused=True)

    generator = torch.Generator().manual_seed(seed)
    max_error, worst, checked = 0.0, None, 0

    with torch.no_grad():
        for (name, tensor), grad in zip(targets, grads):
            flat = tensor.view(-1)
            flat_grad = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            if not torch.isfinite(flat_grad).all():
                bad = int(torch.nonzero(~torch.isfinite(flat_grad))[0])
                raise NumericException(
                    "Non-finite analytic gradient at {}[{}]".format(name, bad),
                    location=(name, bad),
                )

            if flat.numel() > max_entries:
                indices = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            else:
                indices = torch.arange(flat.numel())

            for idx in indices.tolist():
                original = flat[idx].item()
                flat[idx] = original + step
                plus = objective((name, idx)).item()
                flat[idx] = original - step
                minus = objective((name, idx)).item()
                flat[idx] = original

                numeric = (plus - minus) / (2 * step)
                analytic = flat_grad[idx].item()
                error = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                if worst is None or error > max_error:
                    max_error, worst = error, (name, idx)
                checked += 1

    return GradientReport(max_error=max_error, worst=worst, checked=checked, tolerance=tolerance)
