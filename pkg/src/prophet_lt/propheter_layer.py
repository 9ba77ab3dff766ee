"""Per-class learnable Gaussian residual added to features on the GN path.

For a sample of class ``i`` the residual is ``a[i] * e + b[i]`` with ``e`` drawn
from a standard normal, so it follows ``N(b[i], a[i] ** 2)``. The scale is kept
non-negative and the shift inside ``[0, 1]`` by projection after each step.
Gradients reach ``a`` and ``b`` through the reparameterized draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError

DTYPE = torch.float64


@dataclass
class PropheterParams:
    a: torch.Tensor  # (C,) or (C, D)
    b: torch.Tensor

    @property
    def num_classes(self) -> int:
        return self.a.shape[0]

    def is_feasible(self) -> bool:
        with torch.no_grad():
            return bool((self.a >= 0).all() and (self.b >= 0).all() and (self.b <= 1).all())


@dataclass(frozen=True)
class KernelMask:
    """For each class, the channel indices that receive the residual."""

    channels: tuple
    num_channels: int

    def __post_init__(self):
        chans = tuple(tuple(int(c) for c in row) for row in self.channels)
        object.__setattr__(self, "channels", chans)
        sizes = {len(row) for row in chans}
        if len(sizes) > 1:
            raise ValidationError(f"every class must select the same number of channels, got sizes {sorted(sizes)}")
        for i, row in enumerate(chans):
            if len(set(row)) != len(row):
                raise ValidationError(f"class {i} selects a channel twice")
            if any(c < 0 or c >= self.num_channels for c in row):
                raise ValidationError(f"class {i} selects a channel outside [0, {self.num_channels})")

    @property
    def num_classes(self) -> int:
        return len(self.channels)

    @property
    def k(self) -> int:
        return len(self.channels[0]) if self.channels else 0

    def as_matrix(self, device=None) -> torch.Tensor:
        m = torch.zeros(self.num_classes, self.num_channels, dtype=torch.bool, device=device)
        for i, row in enumerate(self.channels):
            m[i, list(row)] = True
        return m

    @classmethod
    def full(cls, num_classes: int, num_channels: int) -> "KernelMask":
        return cls(tuple(tuple(range(num_channels)) for _ in range(num_classes)), num_channels)


def init_params(num_classes: int, seed: int, dim: int | None = None) -> PropheterParams:
    """Uniform ``[0, 1)`` draws for both scale and shift; already feasible."""
    if num_classes < 1:
        raise ValidationError("num_classes must be >= 1")
    g = torch.Generator().manual_seed(seed)
    shape = (num_classes,) if dim is None else (num_classes, dim)
    a = torch.rand(shape, generator=g, dtype=DTYPE)
    b = torch.rand(shape, generator=g, dtype=DTYPE)
    return PropheterParams(a, b)


def project_params(params: PropheterParams) -> PropheterParams:
    with torch.no_grad():
        return PropheterParams(params.a.clamp(min=0.0), params.b.clamp(0.0, 1.0))


def sample_residual(params: PropheterParams, labels: torch.Tensor, shape, generator: torch.Generator) -> torch.Tensor:
    """Draw a residual of shape ``(B, *shape)`` for the given labels.

    ``shape`` is the per-sample feature shape: ``D`` for vectors, or e.g.
    ``(D, 1, 1)`` for one draw per channel broadcast over space. Per-dimension
    params (``(C, D)``) apply along the first feature axis.
    """
    if not params.is_feasible():
        raise ValidationError("infeasible propheter params; project them first")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if not shape or shape[0] < 1:
        raise ValidationError(f"feature shape must have a positive leading dim, got {shape}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= params.num_classes):
        raise ValidationError(f"labels must lie in [0, {params.num_classes})")
    B = labels.shape[0]
    eps = torch.randn((B, *shape), generator=generator, dtype=params.a.dtype)
    a, b = params.a[labels], params.b[labels]
    if params.a.dim() == 1:
        view = (B,) + (1,) * len(shape)
    else:
        if params.a.shape[1] != shape[0]:
            raise ValidationError(
                f"per-dimension params have D={params.a.shape[1]}, features have {shape[0]}"
            )
        view = (B, shape[0]) + (1,) * (len(shape) - 1)
    return a.reshape(view) * eps + b.reshape(view)


def apply_gn(values: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    bad = ValidationError(f"residual shape {tuple(residual.shape)} does not fit features {tuple(values.shape)}")
    if residual.dim() != values.dim() or residual.shape[0] != values.shape[0]:
        raise bad
    try:
        out_shape = torch.broadcast_shapes(values.shape, residual.shape)
    except RuntimeError:
        raise bad from None
    if out_shape != values.shape:
        raise bad
    return values + residual


def apply_gn_masked(values: torch.Tensor, residual: torch.Tensor, labels: torch.Tensor, mask: KernelMask) -> torch.Tensor:
    """Add the residual only on the channels (axis 1) that ``mask`` selects for each sample's class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and labels.max() >= mask.num_classes:
        raise ValidationError(
            f"mask covers {mask.num_classes} classes but labels reach {int(labels.max())}"
        )
    if values.shape[1] != mask.num_channels:
        raise ValidationError(f"mask has {mask.num_channels} channels, features have {values.shape[1]}")
    added = apply_gn(values, residual)
    keep = mask.as_matrix(values.device)[labels]
    keep = keep.reshape(keep.shape + (1,) * (values.dim() - 2))
    return torch.where(keep, added, values)


class PropheterLayer(nn.Module):
    """Trainable holder of one set of per-class residual params."""

    def __init__(self, num_classes: int, seed: int, dim: int | None = None, spatial_noise: str = "broadcast"):
        super().__init__()
        if spatial_noise not in ("broadcast", "per_position"):
            raise ValidationError(f"spatial_noise must be 'broadcast' or 'per_position', got {spatial_noise!r}")
        init = init_params(num_classes, seed, dim)
        self.a = nn.Parameter(init.a)
        self.b = nn.Parameter(init.b)
        self.spatial_noise = spatial_noise

    @property
    def params(self) -> PropheterParams:
        return PropheterParams(self.a, self.b)

    def set_params(self, params: PropheterParams):
        with torch.no_grad():
            self.a.copy_(params.a)
            self.b.copy_(params.b)

    def project_(self):
        with torch.no_grad():
            self.a.clamp_(min=0.0)
            self.b.clamp_(0.0, 1.0)

    def forward(self, values, labels, generator, mask: KernelMask | None = None):
        if values.dim() > 2 and self.spatial_noise == "broadcast":
            shape = (values.shape[1],) + (1,) * (values.dim() - 2)
        else:
            shape = tuple(values.shape[1:])
        residual = sample_residual(self.params, labels, shape, generator)
        if mask is None:
            return apply_gn(values, residual)
        return apply_gn_masked(values, residual, labels, mask)
