"""Differentiable network stack hosting the feature expansion.

torch backs the tensor contract (shape / data / grad / requires_grad).  The
expansion layer runs through a custom autograd function whose backward
implements the same analytic formulas as `expansion.lefm_backward`, so the
gradients are exact and well defined at zero-valued pixels.  The optimizer
and scheduler are written out explicitly to pin their semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError
from .expansion import ExponentTable, enumerate_exponents

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ENCODER_WIDTHS = (16, 32, 64)
BOTTLENECK_WIDTH = 128

CHECKPOINT_FORMAT_VERSION = 1


def check_finite(tensor: torch.Tensor, context: str):
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in {context}")


class _ExpansionFn(torch.autograd.Function):
    """Monomial expansion with analytic gradients.

    forward: out[b, r] = a_r * prod_i x_i^{q_ri}  (pixelwise)
    backward: d/da_r sums over all pixels; d/dx_i uses q_i * x_i^{q_i - 1}
    with zero contribution from terms where q_i = 0.
    """

    @staticmethod
    def forward(ctx, x, coefficients, power_mask):
        # factors[b, r, i, h, w] = x_i^{q_ri}; torch.pow(0, 0) == 1 covers the
        # constant term at zero pixels
        factors = x.unsqueeze(1) ** power_mask.view(1, *power_mask.shape, 1, 1)
        psi = factors.prod(dim=2)
        ctx.save_for_backward(x, coefficients, power_mask, factors, psi)
        return psi * coefficients.view(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, grad_out):
        x, coefficients, power_mask, factors, psi = ctx.saved_tensors
        d = x.shape[1]
        grad_coeff = (grad_out * psi).sum(dim=(0, 2, 3)) if ctx.needs_input_grad[1] else None
        grad_x = None
        if ctx.needs_input_grad[0]:
            weighted = grad_out * coefficients.view(1, -1, 1, 1)
            grad_x = torch.empty_like(x)
            for i in range(d):
                q_i = power_mask[:, i].view(1, -1, 1, 1)
                # q * x^{q-1}; the clamp keeps x^0 = 1 at x = 0 and the q
                # factor zeroes terms that do not involve feature i
                dpow = q_i * x[:, i:i + 1] ** (q_i - 1).clamp(min=0)
                rest = factors.clone()
                rest[:, :, i] = 1.0
                grad_x[:, i] = (weighted * dpow * rest.prod(dim=2)).sum(dim=1)
        return grad_x, grad_coeff, None


class LefmExpansion(nn.Module):
    """Torch-side expansion layer: d input channels to D monomial channels."""

    def __init__(self, table: ExponentTable, use_batch_norm: bool = False):
        super().__init__()
        self.table = table
        self.register_buffer("power_mask", torch.tensor(table.power_mask, dtype=torch.get_default_dtype()))
        self.coefficients = nn.Parameter(torch.empty(table.D))
        bound = 1.0 / math.sqrt(table.D)
        nn.init.uniform_(self.coefficients, -bound, bound)
        self.norm = nn.BatchNorm2d(table.D) if use_batch_norm else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.table.d:
            raise ValueError(f"expected B x {self.table.d} x H x W input, got {tuple(x.shape)}")
        out = _ExpansionFn.apply(x, self.coefficients, self.power_mask.to(x.dtype))
        if self.norm is not None:
            out = self.norm(out)
        return out


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by ReLU."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class MiniUNet(nn.Module):
    """Compact U-shaped encoder-decoder with a sigmoid pixel head.

    Three 2x-pooling stages, so spatial sizes must be multiples of 8; output
    matches the input size with values in (0, 1).
    """

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        w1, w2, w3 = ENCODER_WIDTHS
        self.enc1 = ConvBlock(in_channels, w1)
        self.enc2 = ConvBlock(w1, w2)
        self.enc3 = ConvBlock(w2, w3)
        self.bottleneck = ConvBlock(w3, BOTTLENECK_WIDTH)
        self.dec3 = ConvBlock(BOTTLENECK_WIDTH + w3, w3)
        self.dec2 = ConvBlock(w3 + w2, w2)
        self.dec1 = ConvBlock(w2 + w1, w1)
        self.head = nn.Conv2d(w1, 1, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected B x {self.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} must be a multiple of 8")
        s1 = self.enc1(x)
        s2 = self.enc2(F.max_pool2d(s1, 2))
        s3 = self.enc3(F.max_pool2d(s2, 2))
        b = self.bottleneck(F.max_pool2d(s3, 2))
        u3 = self.dec3(torch.cat([F.interpolate(b, scale_factor=2, mode="nearest"), s3], dim=1))
        u2 = self.dec2(torch.cat([F.interpolate(u3, scale_factor=2, mode="nearest"), s2], dim=1))
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), s1], dim=1))
        out = torch.sigmoid(self.head(u1))
        check_finite(out, "network output")
        return out


class SegmentationModel(nn.Module):
    """Plain MiniUNet (order 0) or expansion + MiniUNet (order >= 1)."""

    def __init__(self, in_features: int = 3, order: int = 0, use_batch_norm: bool = False):
        super().__init__()
        if order < 0:
            raise ConfigurationError("order must be >= 0")
        self.in_features = in_features
        self.order = order
        if order == 0:
            self.expansion = None
            self.unet = MiniUNet(in_features)
        else:
            table = enumerate_exponents(in_features, order)
            self.expansion = LefmExpansion(table, use_batch_norm=use_batch_norm)
            self.unet = MiniUNet(table.D)

    def forward(self, x):
        if self.expansion is not None:
            x = self.expansion(x)
        return self.unet(x)


def build_model(in_features: int, order: int, seed: int, use_batch_norm: bool = False,
                dtype: torch.dtype = torch.float32) -> SegmentationModel:
    """Seeded construction; all parameter init draws come from the seed."""
    torch.manual_seed(seed)
    model = SegmentationModel(in_features=in_features, order=order, use_batch_norm=use_batch_norm)
    return model.to(dtype)


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice over the whole batch with smoothing 1; 0 iff pred == target."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    intersection = (pred * target).sum()
    return 1.0 - (2.0 * intersection + 1.0) / (pred.sum() + target.sum() + 1.0)


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    @classmethod
    def initialize(cls, params) -> "AdamState":
        params = list(params)
        return cls(
            step=0,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
        )


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update with L2 decay folded into the gradients."""
    if lr <= 0:
        raise ConfigurationError("lr must be positive")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("params, grads, and state must align")
    state.step += 1
    bias1 = 1.0 - ADAM_BETA1 ** state.step
    bias2 = 1.0 - ADAM_BETA2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient in adam_step")
        if weight_decay:
            g = g + weight_decay * p
        m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
        v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
        denom = (v / bias2).sqrt_().add_(ADAM_EPS)
        p.addcdiv_(m / bias1, denom, value=-lr)


def plateau_scheduler(history, current_lr: float, patience: int = 20, factor: float = 0.5,
                      min_lr: float = 1e-6) -> float:
    """Halve the learning rate after `patience` epochs without improvement.

    Improvement means a strict decrease of the best loss seen so far.  The
    reduction repeats each further `patience` epochs without improvement,
    never dropping below `min_lr`.
    """
    losses = list(history)
    if len(losses) < 2:
        return current_lr
    best = losses[0]
    last_improvement = 0
    for i, value in enumerate(losses[1:], start=1):
        if value < best:
            best = value
            last_improvement = i
    stale = len(losses) - 1 - last_improvement
    if stale > 0 and stale % patience == 0:
        return max(current_lr * factor, min_lr)
    return current_lr


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expansion_parameter_increase(d: int, m: int, use_batch_norm: bool = False) -> int:
    """Closed-form extra weights from inserting an order-m expansion.

    D coefficients plus the widened fan-in of the first conv block
    ((D - d) * 16 * 3 * 3), plus two normalization parameters per term when
    batch norm is enabled.
    """
    n_terms = math.comb(d + m, m)
    increase = n_terms + (n_terms - d) * ENCODER_WIDTHS[0] * 3 * 3
    if use_batch_norm:
        increase += 2 * n_terms
    return increase


def verify_parameter_increase(d: int, m: int, use_batch_norm: bool = False) -> int:
    """Assert the closed form against actual parameter enumeration."""
    baseline = count_parameters(SegmentationModel(in_features=d, order=0))
    expanded = count_parameters(SegmentationModel(in_features=d, order=m, use_batch_norm=use_batch_norm))
    measured = expanded - baseline
    expected = expansion_parameter_increase(d, m, use_batch_norm)
    if measured != expected:
        raise AssertionError(f"parameter increase {measured} != closed form {expected}")
    return measured


def save_checkpoint(path, payload: dict):
    """Write a versioned checkpoint container."""
    payload = dict(payload)
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format version {version!r}")
    return payload


def model_from_checkpoint(payload: dict, which: str = "best") -> SegmentationModel:
    """Rebuild the model from a checkpoint payload ('best' or 'last' weights)."""
    model = SegmentationModel(
        in_features=int(payload["in_features"]),
        order=int(payload["m"]),
        use_batch_norm=bool(payload.get("use_batch_norm", False)),
    )
    dtype = torch.float64 if payload.get("precision_mode") == "float64" else torch.float32
    model = model.to(dtype)
    key = "best_params" if which == "best" else "params"
    model.load_state_dict(payload[key])
    return model
