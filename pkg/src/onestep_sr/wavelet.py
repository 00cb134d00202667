"""Single-level orthonormal 2-D Haar transform on (B, C, H, W) tensors.

For each 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2
    LH = (a - b + c - d) / 2    horizontal detail (H)
    HL = (a + b - c - d) / 2    vertical detail (V)
    HH = (a - b - c + d) / 2    diagonal detail (D)

Channels are transformed independently. No padding: odd sizes are rejected.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ShapeError


class WaveletSubbands(NamedTuple):
    LL: torch.Tensor
    LH: torch.Tensor
    HL: torch.Tensor
    HH: torch.Tensor

    @property
    def details(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.LH, self.HL, self.HH


def dwt2(x: torch.Tensor) -> WaveletSubbands:
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"spatial size must be even, got {tuple(x.shape[-2:])}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletSubbands(
        LL=(a + b + c + d) / 2,
        LH=(a - b + c - d) / 2,
        HL=(a + b - c - d) / 2,
        HH=(a - b - c + d) / 2,
    )


def idwt2(sb: WaveletSubbands) -> torch.Tensor:
    LL, LH, HL, HH = sb
    if not (LL.shape == LH.shape == HL.shape == HH.shape):
        raise ShapeError("sub-bands must share a shape")
    B, C, h, w = LL.shape
    out = LL.new_empty(B, C, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = (LL + LH + HL + HH) / 2
    out[..., 0::2, 1::2] = (LL - LH + HL - HH) / 2
    out[..., 1::2, 0::2] = (LL + LH - HL - HH) / 2
    out[..., 1::2, 1::2] = (LL - LH - HL + HH) / 2
    return out
