import hashlib
import math

import pytest
import torch

from conftest import CallCounter, OracleDenoiser
from onestep_sr.errors import ConfigError, NonFiniteError
from onestep_sr.models import IdentityCodec, UNetDenoiser
from onestep_sr.sampler import (posterior_params, reverse_step_det, reverse_step_stoch, student_infer,
                                teacher_infer, teacher_sample, teacher_target)
from onestep_sr.schedule import Schedule, build_schedule, coeffs, init_state

S_HAND = Schedule((1e-6, 0.25, 1.0), 2.0)


def const(v, shape=(1, 2, 4, 4)):
    return torch.full(shape, float(v), dtype=torch.float64)


def test_det_step_identity_when_etas_equal():
    # m=1, j=0, k=0 directly from the coefficient formulas
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    c = coeffs(Schedule((1e-6, 0.5, 0.5 + 1e-13, 0.999), 1.0), 2)
    out = c.k * torch.randn_like(x) + c.m * x + c.j * torch.randn_like(x)
    assert torch.allclose(out, x, atol=1e-6)


def test_det_step_fixed_point_and_hand_value():
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    assert torch.allclose(reverse_step_det(x, x, x, 2, S_HAND), x, atol=1e-14)
    out = reverse_step_det(const(1), const(0), const(1), 2, S_HAND)
    assert torch.allclose(out, const(0.25), atol=1e-12)


def test_stoch_step_hand_value_and_variance():
    out = reverse_step_stoch(const(1), const(0), const(1), 2, const(0), S_HAND)
    assert torch.allclose(out, const(0.25), atol=1e-12)
    a, b, var = posterior_params(2, S_HAND)
    assert var == pytest.approx(4.0 * 0.25 * 0.75, abs=1e-12)
    assert (a, b) == pytest.approx((0.25, 0.75), abs=1e-12)


def test_stoch_step_zero_alpha_returns_x_t():
    # alpha -> 0 limit with a near-degenerate step
    s = Schedule((1e-6, 0.5, 0.5 * (1 + 1e-15), 0.999), 1.0)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    out = reverse_step_stoch(x, torch.randn_like(x), x, 2, torch.randn_like(x), s)
    assert torch.allclose(out, x, atol=1e-6)


@pytest.mark.parametrize("T", [1, 5, 15])
def test_mean_trajectory_telescopes_to_x0(T):
    s = build_schedule(T)
    g = torch.Generator().manual_seed(T)
    x0 = torch.rand(2, 4, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 4, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    d = OracleDenoiser(x0)
    out, _ = teacher_sample(d, init_state(y, torch.zeros_like(y), s), y, s)
    assert (out - x0).abs().max() < 1e-5
    assert d.calls == T
    # what remains is the eta_0 offset plus the contracted (1 - eta_T) start bias
    e0, eT = s.etas[0], s.etas[-1]
    bias = (e0 + math.sqrt(e0 / eT) * (1 - eT)) * (y - x0)
    assert torch.allclose(out - x0, bias, atol=1e-12)


@pytest.mark.parametrize("T", [1, 5, 15])
def test_noise_contraction(T):
    s = build_schedule(T)
    g = torch.Generator().manual_seed(100 + T)
    x0, y, eps = (torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
    out, _ = teacher_sample(OracleDenoiser(x0), init_state(y, eps, s), y, s)
    mean, _ = teacher_sample(OracleDenoiser(x0), init_state(y, torch.zeros_like(y), s), y, s)
    expected = math.sqrt(s.etas[0] / s.etas[-1]) * s.kappa * math.sqrt(s.etas[-1]) * eps
    # the chain is affine in the initial noise, so the noise part is out - mean
    assert (out - mean - expected).abs().max() < 1e-6


def test_single_step_reduction():
    s = build_schedule(1)
    x0, y = torch.randn(1, 3, 4, 4, dtype=torch.float64), torch.randn(1, 3, 4, 4, dtype=torch.float64)
    z_T = init_state(y, torch.randn_like(y), s)
    d = OracleDenoiser(x0)
    out, _ = teacher_sample(d, z_T, y, s)
    c = coeffs(s, 1)
    assert d.calls == 1
    assert torch.allclose(out, c.k * x0 + c.m * z_T + c.j * y, atol=1e-12)
    assert (out - x0).abs().max() < 1e-2


def test_trace_contract():
    s = build_schedule(15)
    x0 = torch.randn(1, 2, 4, 4)
    _, trace = teacher_sample(OracleDenoiser(x0), torch.randn_like(x0), torch.randn_like(x0), s, capture=True)
    assert trace.ts == list(range(15, 0, -1))
    assert len(trace) == 15 and len(trace.x0_hat) == 15


def test_stochastic_mode_is_seeded():
    s = build_schedule(5)
    x0 = torch.randn(1, 2, 4, 4)
    y = torch.randn_like(x0)
    a, _ = teacher_sample(OracleDenoiser(x0), y, y, s, mode="stoch", generator=torch.Generator().manual_seed(3))
    b, _ = teacher_sample(OracleDenoiser(x0), y, y, s, mode="stoch", generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    with pytest.raises(ConfigError):
        teacher_sample(OracleDenoiser(x0), y, y, s, mode="ddim")


def test_non_finite_state_aborts_with_step():
    s = build_schedule(5)
    x0 = torch.full((1, 2, 4, 4), math.inf)
    with pytest.raises(NonFiniteError) as exc:
        teacher_sample(OracleDenoiser(x0), torch.zeros_like(x0), torch.zeros_like(x0), s)
    assert exc.value.term == "t=5"


def test_teacher_target_single_call_option():
    s = build_schedule(15)
    x0 = torch.randn(1, 2, 4, 4)
    d = OracleDenoiser(x0)
    teacher_target(d, torch.randn_like(x0), torch.randn_like(x0), s, single_call=True)
    assert d.calls == 1


class PassThrough(torch.nn.Module):
    def forward(self, x_t, y, t):
        return y


def test_student_pass_through_identity_codec():
    s = build_schedule(15)
    lr_up = torch.rand(2, 3, 16, 16) * 1.4 - 0.2
    out = student_infer(PassThrough(), IdentityCodec(), lr_up, s, torch.randn_like(lr_up))
    assert torch.equal(out, lr_up.clamp(0, 1))


def test_call_counts_with_real_network():
    s = build_schedule(15)
    torch.manual_seed(0)
    net = CallCounter(UNetDenoiser(3, 16, 15).eval())
    lr_up = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        student_infer(net, IdentityCodec(), lr_up, s, torch.randn_like(lr_up))
    assert net.calls == 1
    net.calls = 0
    with torch.no_grad():
        teacher_infer(net, IdentityCodec(), lr_up, s, torch.randn_like(lr_up))
    assert net.calls == 15


GOLDEN_STUDENT_HASH = "def2382c9abc78dc3624b18e6ddfacfc46af25f367a92e305f4b2df3ca5cb8fb"


def test_student_output_golden_hash():
    s = build_schedule(15)
    torch.manual_seed(1234)
    net = UNetDenoiser(3, 16, 15).eval()
    g = torch.Generator().manual_seed(7)
    lr_up = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    noise = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
    with torch.no_grad():
        out = student_infer(net.double(), IdentityCodec(), lr_up, s, noise)
        again = student_infer(net, IdentityCodec(), lr_up, s, noise)
    assert torch.equal(out, again)
    digest = hashlib.sha256(out.numpy().round(6).tobytes()).hexdigest()
    assert digest == GOLDEN_STUDENT_HASH
