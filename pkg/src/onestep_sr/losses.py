"""Student objective terms and the discriminator hinge loss.

``total = distill + l1 * hfp + l2 * sd + l3 * adv_gen``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .errors import ConfigError, NonFiniteError, ShapeError
from .wavelet import dwt2

COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    hfp: float = 0.1
    sd: float = 1.0
    adv: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {name} must be a finite non-negative number, got {v}")


@dataclass
class LossReport:
    """Per-step loss values. Fields hold tensors during training; see ``floats``."""

    distill: torch.Tensor | float
    hfp: torch.Tensor | float
    sd: torch.Tensor | float
    adv_gen: torch.Tensor | float
    total: torch.Tensor | float
    disc: torch.Tensor | float | None = None

    def floats(self) -> dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def _scalar(v):
    if v is None:
        return None
    return v.item() if isinstance(v, torch.Tensor) else float(v)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def distill_loss(z_tch: torch.Tensor, z_stu: torch.Tensor) -> torch.Tensor:
    _same_shape(z_tch, z_stu)
    return (z_tch - z_stu).pow(2).mean()


def hfp_loss(z_tch: torch.Tensor, z_stu: torch.Tensor) -> torch.Tensor:
    """Sum over the three Haar detail bands of the per-band MSE, averaged over the batch."""
    _same_shape(z_tch, z_stu)
    bt, bs = dwt2(z_tch), dwt2(z_stu)
    per_sample = 0
    for dt, ds in zip(bt.details, bs.details):
        per_sample = per_sample + (dt - ds).pow(2).flatten(1).mean(dim=1)
    return per_sample.mean()


def cosine(v_a: torch.Tensor, v_b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity with an epsilon-guarded denominator."""
    num = (v_a * v_b).sum(dim=1)
    return num / (v_a.norm(dim=1) * v_b.norm(dim=1) + COS_EPS)


def semantic_loss(x_gt: torch.Tensor, x_sr: torch.Tensor, e) -> torch.Tensor:
    _same_shape(x_gt, x_sr)
    return (1 - cosine(e(x_sr), e(x_gt))).mean()


def gen_adv_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    return -scores_fake.mean()


def disc_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    return torch.relu(1 - scores_real).mean() + torch.relu(1 + scores_fake).mean()


def total_student_loss(distill, hfp, sd, adv_gen, w: LossWeights) -> LossReport:
    parts = {"distill": distill, "hfp": hfp, "sd": sd, "adv_gen": adv_gen}
    for name, v in parts.items():
        if not math.isfinite(_scalar(v)):
            raise NonFiniteError(name)
    total = distill + w.hfp * hfp + w.sd * sd + w.adv * adv_gen
    return LossReport(total=total, **parts)
