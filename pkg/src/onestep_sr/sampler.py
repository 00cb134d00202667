"""Reverse processes: the multi-step teacher sampler and one-step student inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NonFiniteError
from .schedule import Schedule, _check_shapes, coeffs, init_state


@dataclass
class StepTrace:
    """Per-step record of a teacher run, ordered t = T, ..., 1."""

    ts: list[int] = field(default_factory=list)
    x0_hat: list[torch.Tensor] = field(default_factory=list)
    x_prev: list[torch.Tensor] = field(default_factory=list)
    z0: torch.Tensor | None = None
    decoded: list[torch.Tensor] | None = None

    def __len__(self):
        return len(self.ts)


def reverse_step_det(x_t, x0_hat, y, t: int, s: Schedule):
    _check_shapes(x_t, x0_hat, y)
    c = coeffs(s, t)
    return c.k * x0_hat + c.m * x_t + c.j * y


def posterior_params(t: int, s: Schedule) -> tuple[float, float, float]:
    """(weight on x_t, weight on x0, variance) of q(x_{t-1} | x_t, x0, y)."""
    c = coeffs(s, t)
    eta_prev, eta_t = s.etas[t - 1], s.etas[t]
    return eta_prev / eta_t, c.alpha / eta_t, s.kappa**2 * (eta_prev / eta_t) * c.alpha


def reverse_step_stoch(x_t, x0_hat, y, t: int, noise, s: Schedule):
    _check_shapes(x_t, x0_hat, y, noise)
    a, b, var = posterior_params(t, s)
    if var == 0:
        return a * x_t + b * x0_hat
    return a * x_t + b * x0_hat + math.sqrt(var) * noise


@torch.no_grad()
def teacher_sample(d, z_T, y, s: Schedule, mode: str = "det", capture: bool = False,
                   generator: torch.Generator | None = None):
    """Run the T-step reverse chain from ``z_T``; returns ``(z0, trace or None)``."""
    if mode not in ("det", "stoch"):
        raise ConfigError(f"mode must be 'det' or 'stoch', got {mode!r}")
    trace = StepTrace() if capture else None
    x = z_T
    for t in range(s.T, 0, -1):
        x0_hat = d(x, y, t)
        if mode == "det":
            x = reverse_step_det(x, x0_hat, y, t, s)
        else:
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = reverse_step_stoch(x, x0_hat, y, t, noise, s)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"t={t}", f"sampler state became non-finite at t={t}")
        if capture:
            trace.ts.append(t)
            trace.x0_hat.append(x0_hat)
            trace.x_prev.append(x)
    if capture:
        trace.z0 = x
    return x, trace


def teacher_target(d, z_T, y, s: Schedule, single_call: bool = False):
    """The distillation target: full T-step sampling, or one call at t=T."""
    if single_call:
        with torch.no_grad():
            return d(z_T, y, s.T)
    return teacher_sample(d, z_T, y, s, mode="det")[0]


def student_infer(student, codec, lr_up, s: Schedule, noise):
    """One denoiser evaluation at t=T from ``z_T = E(lr_up) + kappa*sqrt(eta_T)*noise``."""
    z_y = codec.encode(lr_up)
    z_T = init_state(z_y, noise, s)
    return codec.decode(student(z_T, z_y, s.T))


def teacher_infer(teacher, codec, lr_up, s: Schedule, noise, capture: bool = False):
    z_y = codec.encode(lr_up)
    z0, trace = teacher_sample(teacher, init_state(z_y, noise, s), z_y, s, capture=capture)
    return codec.decode(z0), trace
