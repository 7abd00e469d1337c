import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfdcd import autodiff as ad
from mfdcd.errors import ContractViolation
from mfdcd.wavelet import WaveletBands, dwt2, idwt2


def tensor(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64))


def test_constant_block_is_pure_ll():
    x = tensor(np.ones((1, 1, 2, 2)))
    b = dwt2(x)
    assert b.ll.data[0, 0, 0, 0] == pytest.approx(2.0)
    for band in (b.hl, b.lh, b.hh):
        assert band.data[0, 0, 0, 0] == 0.0


def test_horizontal_alternation_is_pure_hl():
    x = tensor(np.array([[[[1.0, -1.0], [1.0, -1.0]]]]))
    b = dwt2(x)
    assert b.hl.data[0, 0, 0, 0] == pytest.approx(2.0)
    for band in (b.ll, b.lh, b.hh):
        assert band.data[0, 0, 0, 0] == 0.0


def test_ll_inverse_of_constant():
    b = WaveletBands(*[tensor(np.full((1, 1, 1, 1), v)) for v in (2.0, 0.0, 0.0, 0.0)])
    np.testing.assert_allclose(idwt2(b).data, np.ones((1, 1, 2, 2)))


def test_zero_bands_give_zero_map():
    b = WaveletBands(*[tensor(np.zeros((1, 2, 3, 3))) for _ in range(4)])
    assert np.all(idwt2(b).data == 0)


@pytest.mark.parametrize("seed", range(5))
def test_round_trips(seed):
    rng = np.random.default_rng(seed)
    x = tensor(rng.standard_normal((1, 3, 8, 8)))
    assert np.abs(idwt2(dwt2(x)).data - x.data).max() < 1e-12
    bands = WaveletBands(*[tensor(rng.standard_normal((1, 3, 4, 4))) for _ in range(4)])
    back = dwt2(idwt2(bands))
    for a, b in zip((bands.ll, bands.hl, bands.lh, bands.hh),
                    (back.ll, back.hl, back.lh, back.hh)):
        assert np.abs(a.data - b.data).max() < 1e-12


def test_energy_preservation():
    rng = np.random.default_rng(42)
    x = tensor(rng.standard_normal((2, 4, 16, 16)))
    b = dwt2(x)
    total = sum(float((t.data ** 2).sum()) for t in (b.ll, b.hl, b.lh, b.hh))
    assert total == pytest.approx(float((x.data ** 2).sum()), rel=1e-6)


def test_float32_round_trip():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
    back = idwt2(dwt2(x))
    np.testing.assert_allclose(back.data, x.data, rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 4, 4))
    y = rng.standard_normal((1, 1, 4, 4))
    lhs = dwt2(tensor(alpha * x + beta * y))
    bx, by = dwt2(tensor(x)), dwt2(tensor(y))
    for get in (lambda b: b.ll, lambda b: b.hl, lambda b: b.lh, lambda b: b.hh):
        np.testing.assert_allclose(
            get(lhs).data, alpha * get(bx).data + beta * get(by).data,
            rtol=0, atol=1e-13)


def test_odd_extent_rejected():
    with pytest.raises(ContractViolation, match="even"):
        dwt2(tensor(np.zeros((1, 1, 3, 4))))


def test_band_shape_mismatch_rejected():
    b = WaveletBands(tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros((1, 1, 2, 2))),
                     tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ContractViolation):
        idwt2(b)


def test_gradients_through_both_directions():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)

    def fn(x):
        b = dwt2(x)
        y = idwt2(b)
        return ad.tensor_sum(ad.mul(y, y)) + ad.tensor_sum(ad.absolute(b.hh))

    assert ad.grad_check(fn, [x]) < 1e-6
