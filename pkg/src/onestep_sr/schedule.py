"""Residual-shifting noise schedule and per-step coefficient algebra.

The forward process shifts the mean of ``x_t`` from the HR latent ``x0`` toward
the LR latent ``y`` as ``eta_t`` grows from ~0 to ~1, with variance
``kappa**2 * eta_t``. All coefficient math is done in float64 on Python floats
so that the identities hold to 1e-9 regardless of the model dtype.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeError

FORMS = ("geometric-sqrt", "linear")

# eta_0 stands in for zero; it keeps m_1 and j_1 finite.
ETA_ZERO = 1e-6


@dataclass(frozen=True)
class Schedule:
    etas: tuple[float, ...]
    kappa: float
    form: str = "custom"

    def __post_init__(self):
        etas = tuple(float(e) for e in self.etas)
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "kappa", float(self.kappa))
        if len(etas) < 2:
            raise ConfigError("schedule needs at least eta_0 and eta_1")
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if any(not math.isfinite(e) for e in etas):
            raise ConfigError("schedule contains non-finite eta")
        if any(b <= a for a, b in zip(etas, etas[1:])):
            raise ConfigError("etas must be strictly increasing")
        if not 0 < etas[0] <= 1e-4:
            raise ConfigError(f"eta_0 must lie in (0, 1e-4], got {etas[0]}")
        if not 0.999 <= etas[-1] <= 1.0:
            raise ConfigError(f"eta_T must lie in [0.999, 1], got {etas[-1]}")

    @property
    def T(self) -> int:
        return len(self.etas) - 1

    def eta(self, t: int) -> float:
        return self.etas[t]

    def to_dict(self) -> dict:
        # json floats use repr(), which round-trips float64 exactly
        return {"form": self.form, "kappa": self.kappa, "etas": list(self.etas)}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(etas=tuple(d["etas"]), kappa=d["kappa"], form=d.get("form", "custom"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s: str) -> "Schedule":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class StepCoeffs:
    """Coefficients of one reverse step ``t -> t-1``.

    ``w`` is the loss weight of the teacher objective; it is ``None`` when
    ``eta_{t-1}`` is (a stand-in for) zero.
    """

    k: float
    m: float
    j: float
    alpha: float
    w: float | None


def build_schedule(T: int = 15, eta_min: float = 0.04, eta_max: float = 0.999,
                   kappa: float = 2.0, form: str = "geometric-sqrt") -> Schedule:
    """Build a schedule with ``eta_1 = eta_min**2`` and ``eta_T = eta_max``.

    ``geometric-sqrt`` spaces sqrt(eta) geometrically over t = 1..T; ``linear``
    spaces eta linearly. ``eta_0`` is pinned to ``ETA_ZERO``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0 < eta_min < eta_max <= 1:
        raise ConfigError(f"need 0 < eta_min < eta_max <= 1, got eta_min={eta_min}, eta_max={eta_max}")
    if form not in FORMS:
        raise ConfigError(f"unknown schedule form {form!r}; expected one of {FORMS}")
    first = eta_min * eta_min
    if T == 1:
        body = [eta_max]
    elif form == "geometric-sqrt":
        sq = np.geomspace(eta_min, math.sqrt(eta_max), T)
        body = list(sq * sq)
        body[-1] = eta_max
    else:
        body = list(np.linspace(first, eta_max, T))
        body[-1] = eta_max
    etas = (ETA_ZERO, *[float(e) for e in body])
    return Schedule(etas=etas, kappa=kappa, form=form)


def step_coeffs(eta_prev: float, eta_t: float, kappa: float, w_defined: bool = True) -> StepCoeffs:
    m = math.sqrt(eta_prev / eta_t)
    j = eta_prev - math.sqrt(eta_prev * eta_t)
    k = 1.0 - m - j
    alpha = eta_t - eta_prev
    w = alpha / (2.0 * kappa**2 * eta_prev * eta_t) if (w_defined and eta_prev > 0) else None
    return StepCoeffs(k=k, m=m, j=j, alpha=alpha, w=w)


def coeffs(s: Schedule, t: int) -> StepCoeffs:
    if not 1 <= t <= s.T:
        raise IndexError(f"t={t} outside [1, {s.T}]")
    # eta_0 is a numerical stand-in for 0, so w_1 stays undefined
    return step_coeffs(s.etas[t - 1], s.etas[t], s.kappa, w_defined=t > 1)


def _check_shapes(*tensors: torch.Tensor):
    shape = tensors[0].shape
    for x in tensors[1:]:
        if x.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def forward_diffuse(x0: torch.Tensor, y: torch.Tensor, t: int | torch.Tensor,
                    noise: torch.Tensor, s: Schedule) -> torch.Tensor:
    """Sample ``x_t ~ q(x_t | x0, y)`` given the standard-normal ``noise``.

    ``t`` may be an int or a per-sample integer tensor of shape (B,).
    """
    _check_shapes(x0, y, noise)
    if isinstance(t, torch.Tensor):
        if t.min() < 1 or t.max() > s.T:
            raise IndexError(f"t outside [1, {s.T}]")
        etas = torch.tensor(s.etas, dtype=torch.float64)[t.cpu()].to(x0)
        eta = etas.view(-1, *([1] * (x0.dim() - 1)))
        return x0 + eta * (y - x0) + s.kappa * eta.sqrt() * noise
    if not 1 <= t <= s.T:
        raise IndexError(f"t={t} outside [1, {s.T}]")
    eta = s.etas[t]
    return x0 + eta * (y - x0) + s.kappa * math.sqrt(eta) * noise


def init_state(y: torch.Tensor, noise: torch.Tensor, s: Schedule) -> torch.Tensor:
    _check_shapes(y, noise)
    return y + s.kappa * math.sqrt(s.etas[-1]) * noise


def schedule_from_etas(etas: Sequence[float], kappa: float) -> Schedule:
    return Schedule(etas=tuple(etas), kappa=kappa)
