import pytest
import torch
from hypothesis import given, settings, strategies as st

from onestep_sr.errors import ShapeError
from onestep_sr.wavelet import WaveletSubbands, dwt2, idwt2


def haar_reference(x):
    """Direct 2x2 block formulas, independent of the implementation."""
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return ((a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2)


def test_constant_image():
    sb = dwt2(torch.full((1, 3, 8, 8), 0.7, dtype=torch.float64))
    assert torch.allclose(sb.LL, torch.full_like(sb.LL, 1.4))
    for band in sb.details:
        assert torch.count_nonzero(band) == 0


def test_horizontal_detail_hand_value():
    x = torch.tensor([[[[1.0, -1.0], [1.0, -1.0]]]])
    sb = dwt2(x)
    assert sb.LL.item() == 0
    assert sb.LH.item() == pytest.approx(2.0)
    assert sb.HL.item() == 0
    assert sb.HH.item() == 0


def test_matches_block_reference():
    x = torch.randn(2, 3, 10, 6, dtype=torch.float64)
    for got, ref in zip(dwt2(x), haar_reference(x)):
        assert torch.allclose(got, ref, atol=1e-12)


def test_zero_subbands_give_zero_image():
    z = torch.zeros(1, 2, 4, 4)
    assert torch.count_nonzero(idwt2(WaveletSubbands(z, z, z, z))) == 0


def test_lowpass_projection_is_idempotent():
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    sb = dwt2(x)
    z = torch.zeros_like(sb.LL)
    low = idwt2(WaveletSubbands(sb.LL, z, z, z))
    sb2 = dwt2(low)
    assert torch.allclose(sb2.LL, sb.LL, atol=1e-6)
    assert max(b.abs().max().item() for b in sb2.details) < 1e-6


@pytest.mark.parametrize("shape", [(1, 1, 3, 4), (1, 1, 4, 5), (4, 4)])
def test_bad_shapes(shape):
    with pytest.raises(ShapeError):
        dwt2(torch.zeros(shape))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), c=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_reconstruction_parseval_linearity(h, w, c, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, c, 2 * h, 2 * w, generator=g, dtype=torch.float64)
    x2 = torch.randn(2, c, 2 * h, 2 * w, generator=g, dtype=torch.float64)
    sb = dwt2(x)
    assert (idwt2(sb) - x).abs().max() < 1e-6
    energy = sum(b.pow(2).sum() for b in sb)
    assert abs(energy / x.pow(2).sum() - 1) < 1e-6
    a, b = 0.3, -1.7
    lhs = dwt2(a * x + b * x2)
    rhs = [a * u + b * v for u, v in zip(dwt2(x), dwt2(x2))]
    assert max((p - q).abs().max().item() for p, q in zip(lhs, rhs)) < 1e-6
