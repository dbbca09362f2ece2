"""Discrete Fourier machinery for the prompt transforms.

`dft_naive` is the quadratic-time reference written straight from the
transform definition; `fft` is a radix-2 Cooley-Tukey evaluation used
whenever the length is a power of two (other lengths fall back to the
reference path, which is plenty at prompt-sized inputs). The forward
transform is unnormalized; the inverse carries the 1/N factor.

`fourier2d_real` / `fourier1d_real` are the differentiable prompt
transforms: FFT along the chosen axes of a real block, keeping only the
real component. Their backward pass applies the explicit adjoint of the
linear map, which the adjoint test suite certifies against the
dot-product identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

# running tally of complex multiply/add work done by fft, for the
# operation-count checks; cheap enough to leave always on
op_counter = {"mults": 0, "adds": 0}


def reset_op_counter():
    op_counter["mults"] = 0
    op_counter["adds"] = 0


@dataclass
class ComplexBuffer:
    """A complex vector stored as separate real and imaginary arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise ValueError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")

    @classmethod
    def from_real(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values.copy(), np.zeros_like(values))

    def __len__(self):
        return self.re.shape[0]


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


# cached per-length tables; read-only after first construction
_BITREV = {}
_STAGE_TWIDDLES = {}
_NAIVE_MATS = {}


def _bitrev_index(n):
    idx = _BITREV.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            x = i
            for _ in range(bits):
                r = (r << 1) | (x & 1)
                x >>= 1
            idx[i] = r
        _BITREV[n] = idx
    return idx


def _stage_twiddles(m, inverse):
    key = (m, inverse)
    tw = _STAGE_TWIDDLES.get(key)
    if tw is None:
        half = m // 2
        ang = 2.0 * np.pi * np.arange(half) / m
        sign = 1.0 if inverse else -1.0
        tw = (np.cos(ang), sign * np.sin(ang))
        _STAGE_TWIDDLES[key] = tw
    return tw


def _naive_mats(n):
    mats = _NAIVE_MATS.get(n)
    if mats is None:
        k = np.arange(n)
        ang = 2.0 * np.pi * np.outer(k, k) / n
        mats = (np.cos(ang), np.sin(ang))
        _NAIVE_MATS[n] = mats
    return mats


def dft_naive(x: ComplexBuffer) -> ComplexBuffer:
    """Quadratic-time reference transform, evaluated term by term."""
    n = len(x)
    out_re = np.zeros(n)
    out_im = np.zeros(n)
    grid = np.arange(n)
    for k in range(n):
        ang = 2.0 * np.pi * k * grid / n
        c = np.cos(ang)
        s = np.sin(ang)
        # x_n * exp(-i ang) summed over n
        out_re[k] = np.dot(x.re, c) + np.dot(x.im, s)
        out_im[k] = np.dot(x.im, c) - np.dot(x.re, s)
    return ComplexBuffer(out_re, out_im)


def _fft_last_pow2(re, im, inverse):
    """Radix-2 Cooley-Tukey along the last axis, vectorized over the rest."""
    n = re.shape[-1]
    idx = _bitrev_index(n)
    re = np.ascontiguousarray(re[..., idx])
    im = np.ascontiguousarray(im[..., idx])
    rows = int(np.prod(re.shape[:-1], dtype=np.int64)) if re.ndim > 1 else 1
    m = 2
    while m <= n:
        half = m // 2
        wr, wi = _stage_twiddles(m, inverse)
        rv = re.reshape(-1, n // m, m)
        iv = im.reshape(-1, n // m, m)
        er, odr = rv[..., :half], rv[..., half:]
        ei, odi = iv[..., :half], iv[..., half:]
        tr = odr * wr - odi * wi
        ti = odr * wi + odi * wr
        odr[...] = er - tr
        odi[...] = ei - ti
        er += tr
        ei += ti
        op_counter["mults"] += rows * half * (n // m)
        op_counter["adds"] += rows * m * (n // m)
        m *= 2
    if inverse:
        re /= n
        im /= n
    return re, im


def _fft_last_naive(re, im, inverse):
    n = re.shape[-1]
    c, s = _naive_mats(n)
    if inverse:
        out_re = (re @ c - im @ s) / n
        out_im = (im @ c + re @ s) / n
    else:
        out_re = re @ c + im @ s
        out_im = im @ c - re @ s
    return out_re, out_im


def _fft_along(re, im, axis, inverse=False):
    """Transform along one axis of a stacked array; dispatches on length."""
    n = re.shape[axis]
    if n == 1:
        return re.copy(), im.copy()
    moved = axis in (-1, re.ndim - 1)
    if not moved:
        re = np.moveaxis(re, axis, -1)
        im = np.moveaxis(im, axis, -1)
    if _is_pow2(n):
        out_re, out_im = _fft_last_pow2(re, im, inverse)
    else:
        out_re, out_im = _fft_last_naive(re, im, inverse)
    if not moved:
        out_re = np.moveaxis(out_re, -1, axis)
        out_im = np.moveaxis(out_im, -1, axis)
    return np.ascontiguousarray(out_re), np.ascontiguousarray(out_im)


def fft(x: ComplexBuffer) -> ComplexBuffer:
    """Forward transform; Cooley-Tukey on power-of-two lengths."""
    re, im = _fft_along(x.re, x.im, axis=-1, inverse=False)
    return ComplexBuffer(re, im)


def ifft(x: ComplexBuffer) -> ComplexBuffer:
    """Inverse transform, carrying the 1/N normalization."""
    re, im = _fft_along(x.re, x.im, axis=-1, inverse=True)
    return ComplexBuffer(re, im)


# ---------------------------------------------------------------------------
# real-part prompt transforms

SEQUENCE = "sequence"
HIDDEN = "hidden"

_AXIS_OF = {SEQUENCE: -2, HIDDEN: -1}


def real_dft2(block, hidden_first=True):
    """Real part of the 2D transform of a real [..., m, d] block."""
    block = np.asarray(block, dtype=np.float64)
    zeros = np.zeros_like(block)
    first, second = (-1, -2) if hidden_first else (-2, -1)
    re, im = _fft_along(block, zeros, axis=first)
    re, _ = _fft_along(re, im, axis=second)
    return re


def real_dft1(block, axis_name):
    """Real part of the 1D transform along the sequence or hidden axis."""
    block = np.asarray(block, dtype=np.float64)
    axis = _AXIS_OF[axis_name]
    re, _ = _fft_along(block, np.zeros_like(block), axis=axis)
    return re


def fourier2d_real(p: T.Tensor) -> T.Tensor:
    """Differentiable Re(F_seq(F_hidden(P))) on a real [m, d] prompt block.

    The map is linear in P; the backward pass applies its adjoint (for
    this kernel the adjoint coincides with the forward map).
    """
    if p.ndim < 2:
        raise ValueError(f"expected a [..., m, d] block, got shape {p.shape}")
    return T.linear_map_op(p, real_dft2, real_dft2)


def fourier1d_real(p: T.Tensor, axis: str) -> T.Tensor:
    """Differentiable real part of the 1D transform along one axis."""
    if axis not in _AXIS_OF:
        raise ValueError(f"axis must be '{SEQUENCE}' or '{HIDDEN}', got {axis!r}")
    if p.ndim < 2:
        raise ValueError(f"expected a [..., m, d] block, got shape {p.shape}")

    def apply(arr):
        return real_dft1(arr, axis)

    return T.linear_map_op(p, apply, apply)
