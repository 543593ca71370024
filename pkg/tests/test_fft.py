"""Spectral primitives against a direct-sum DFT oracle."""

import numpy as np
import pytest

from crackseg.numerics import (
    ShapeError, Spectrum, Tensor, grad_check, irfft2, mul, rfft2, tsum,
)


def direct_half_dft(img: np.ndarray):
    """O(N^4) textbook DFT restricted to the half plane; the oracle route."""
    H, W = img.shape
    half = W // 2 + 1
    out = np.zeros((H, half), dtype=np.complex128)
    for u in range(H):
        for v in range(half):
            acc = 0.0 + 0.0j
            for y in range(H):
                for x in range(W):
                    acc += img[y, x] * np.exp(-2j * np.pi * (u * y / H + v * x / W))
            out[u, v] = acc
    return out


class TestRfft2:
    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        for H, W in ((4, 4), (4, 6), (8, 8), (3, 5)):
            img = rng.standard_normal((H, W))
            sp = rfft2(Tensor(img[None, None]))
            ref = direct_half_dft(img)
            got = sp.real.data[0, 0] + 1j * sp.imag.data[0, 0]
            assert np.abs(got - ref).max() < 1e-9

    def test_dc_bin_is_spatial_sum(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8))
        sp = rfft2(Tensor(x))
        assert np.allclose(sp.real.data[..., 0, 0], x.sum(axis=(2, 3)))
        assert np.allclose(sp.imag.data[..., 0, 0], 0.0)

    def test_parseval(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 8))
        full = np.fft.fft2(x)
        assert (np.abs(full) ** 2).sum() / 64 == pytest.approx((x ** 2).sum())

    def test_needs_4d(self):
        with pytest.raises(ShapeError):
            rfft2(Tensor(np.zeros((4, 4))))

    def test_gradients(self):
        from crackseg.numerics import add
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 4, 6)))
        cr = Tensor(rng.standard_normal((1, 2, 4, 4)))
        ci = Tensor(rng.standard_normal((1, 2, 4, 4)))

        def fn():
            sp = rfft2(x)
            return add(tsum(mul(sp.real, cr)), tsum(mul(sp.imag, ci)))

        assert grad_check(fn, [x]) < 1e-4


class TestIrfft2:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(4)
        for H, W in ((4, 4), (8, 8), (4, 6), (16, 16)):
            x = rng.standard_normal((1, 1, H, W))
            back = irfft2(rfft2(Tensor(x)))
            assert np.abs(back.data - x).max() < 1e-12

    def test_agrees_with_numpy_on_real_spectra(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 8, 8))
        sp = rfft2(Tensor(x))
        ref = np.fft.irfft2(sp.real.data + 1j * sp.imag.data, s=(8, 8))
        assert np.abs(irfft2(sp).data - ref).max() < 1e-12

    def test_shape_contract(self):
        bad = Spectrum(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))), 9)
        with pytest.raises(ShapeError):
            irfft2(bad)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        re = Tensor(rng.standard_normal((1, 2, 4, 4)))
        im = Tensor(rng.standard_normal((1, 2, 4, 4)))
        c = Tensor(rng.standard_normal((1, 2, 4, 6)))
        fn = lambda: tsum(mul(irfft2(Spectrum(re, im, 6)), c))
        assert grad_check(fn, [re, im]) < 1e-4

    def test_gradients_odd_width(self):
        rng = np.random.default_rng(7)
        re = Tensor(rng.standard_normal((1, 1, 4, 3)))
        im = Tensor(rng.standard_normal((1, 1, 4, 3)))
        c = Tensor(rng.standard_normal((1, 1, 4, 5)))
        fn = lambda: tsum(mul(irfft2(Spectrum(re, im, 5)), c))
        assert grad_check(fn, [re, im]) < 1e-4

    def test_mask_then_invert_is_linear(self):
        # band masking in the spectrum then inverting must be additive
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 1, 8, 8)))
        sp = rfft2(x)
        m = rng.uniform(size=(8, 5))
        a = irfft2(Spectrum(mul(sp.real, Tensor(m)), mul(sp.imag, Tensor(m)), 8))
        b = irfft2(Spectrum(mul(sp.real, Tensor(1 - m)), mul(sp.imag, Tensor(1 - m)), 8))
        assert np.abs(a.data + b.data - x.data).max() < 1e-12
