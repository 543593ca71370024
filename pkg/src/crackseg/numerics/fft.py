"""Differentiable 2D real FFT.

rfft2 maps (B, C, H, W) real -> half spectrum (B, C, H, W//2 + 1) held as a
Spectrum of two real tensors. irfft2 is defined as Re(ifft2(HermitianExtend)),
which coincides with the usual inverse on spectra of real signals and has an
exact hand-derivable adjoint for everything else. numpy's "backward" norm is
used throughout, so the DC bin equals the spatial sum.

Adjoints (derived from the DFT definition, checked by central differences):
  rfft2 backward:  gx = Re(ifft2(pad_half_to_full(seed))) * H * W
  irfft2 backward: gF = fft2(gy)[..., :W//2+1] / (H*W), reflected columns doubled
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, astensor, make


@dataclass
class Spectrum:
    """Half-plane spectrum: real/imag parts plus the spatial width to invert to."""
    real: Tensor
    imag: Tensor
    width: int

    @property
    def shape(self):
        return self.real.data.shape


def _zero_pad_half(G: np.ndarray, W: int) -> np.ndarray:
    """Adjoint seeding: reading bin (u, v) writes only bin (u, v), so the half
    plane goes into a zero full plane with no reflection."""
    full = np.zeros(G.shape[:-1] + (W,), dtype=np.complex128)
    full[..., : W // 2 + 1] = G
    return full


def _hermitian_extend(F: np.ndarray, W: int) -> np.ndarray:
    """full[u, v] = conj(F[(H-u) % H, W-v]) for v past the half plane."""
    H = F.shape[-2]
    full = np.zeros(F.shape[:-1] + (W,), dtype=np.complex128)
    full[..., : W // 2 + 1] = F
    rows = (-np.arange(H)) % H
    for v in range(W // 2 + 1, W):
        full[..., v] = np.conj(F[..., rows, W - v])
    return full


def rfft2(x) -> Spectrum:
    x = astensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"rfft2: need (B,C,H,W), got {x.data.shape}")
    H, W = x.data.shape[2:]
    F = np.fft.rfft2(x.data, norm="backward")

    def backward_re(g):
        return (np.fft.ifft2(_zero_pad_half(g, W), norm="backward").real * (H * W),)

    def backward_im(g):
        return (np.fft.ifft2(_zero_pad_half(1j * g, W), norm="backward").real * (H * W),)

    re = make(F.real.copy(), (x,), backward_re, "rfft2_re")
    im = make(F.imag.copy(), (x,), backward_im, "rfft2_im")
    return Spectrum(re, im, W)


def irfft2(spec: Spectrum) -> Tensor:
    re, im, W = spec.real, spec.imag, spec.width
    if re.data.shape != im.data.shape:
        raise ShapeError(f"irfft2: real {re.data.shape} vs imag {im.data.shape}")
    H = re.data.shape[-2]
    half = W // 2 + 1
    if re.data.shape[-1] != half:
        raise ShapeError(f"irfft2: spectrum {re.data.shape} does not match width {W}")
    full = _hermitian_extend(re.data + 1j * im.data, W)
    out = np.fft.ifft2(full, norm="backward").real

    def backward(g):
        G = np.fft.fft2(g, norm="backward")[..., :half] / (H * W)
        if W % 2 == 0:
            G[..., 1: W // 2] *= 2.0
        else:
            G[..., 1:] *= 2.0
        return G.real, G.imag

    return make(out, (re, im), backward, "irfft2")
