"""Complex tensors and the 2-D discrete Fourier transform over the
(channel, token) feature matrix.

The transform kernel is a recursive mixed-radix Cooley-Tukey
decimation-in-time: composite lengths split on their smallest prime
factor, small prime lengths fall through to a direct DFT matrix, and
large prime lengths use Bluestein's chirp-z reduction to a power-of-two
convolution.  All kernels vectorize over any number of leading batch
axes.  ``fft2``/``ifft2`` wrap the kernels as differentiable graph ops;
``dft2_naive`` is the quadratic-time double-loop oracle used by tests.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _add_grad, _from_op

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally present
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


class ComplexTensor:
    """Paired real/imaginary tensors of identical shape."""

    __slots__ = ("re", "im")

    def __init__(self, re, im):
        re = re if isinstance(re, Tensor) else Tensor(re)
        im = im if isinstance(im, Tensor) else Tensor(im)
        if re.shape != im.shape:
            raise ValueError(f"real/imaginary shapes differ: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    def __add__(self, other):
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def to_array(self):
        return self.re.data + 1j * self.im.data

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"


# ---------------------------------------------------------------------
# transform kernels (plain ndarray, no autodiff)
# ---------------------------------------------------------------------

_SPF_CACHE = {}
_DFT_CACHE = {}
_TWIDDLE_CACHE = {}
_BLUESTEIN_CACHE = {}
_BITREV_CACHE = {}
_STAGE_TW_CACHE = {}

# Prime lengths at or below this use the direct DFT matrix; larger
# primes go through Bluestein.
_DIRECT_PRIME_MAX = 13


def _smallest_prime_factor(n):
    f = _SPF_CACHE.get(n)
    if f is None:
        f = n
        i = 2
        while i * i <= n:
            if n % i == 0:
                f = i
                break
            i += 1
        _SPF_CACHE[n] = f
    return f


def _dft_matrix(n, sign):
    key = (n, sign)
    mat = _DFT_CACHE.get(key)
    if mat is None:
        k = np.arange(n)
        mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
        _DFT_CACHE[key] = mat
    return mat


def _twiddle(n, p, sign):
    key = (n, p, sign)
    tw = _TWIDDLE_CACHE.get(key)
    if tw is None:
        m = n // p
        tw = np.exp(sign * 2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)
        _TWIDDLE_CACHE[key] = tw
    return tw


def _bluestein_plan(n, sign):
    key = (n, sign)
    plan = _BLUESTEIN_CACHE.get(key)
    if plan is None:
        m = 1 << (2 * n - 1).bit_length()
        k = np.arange(n)
        # k^2 mod 2n keeps the chirp exponent exact for large k.
        chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
        filt = np.zeros(m, dtype=np.complex128)
        filt[:n] = np.conj(chirp)
        filt[m - n + 1 :] = np.conj(chirp[1:][::-1])
        plan = (m, chirp, _fft_last(filt, -1))
        _BLUESTEIN_CACHE[key] = plan
    return plan


def _bluestein(a, sign):
    n = a.shape[-1]
    m, chirp, filt_f = _bluestein_plan(n, sign)
    buf = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    buf[..., :n] = a * chirp
    conv = _fft_last(_fft_last(buf, -1) * filt_f, +1) / m
    return chirp * conv[..., :n]


def _bitrev(n):
    perm = _BITREV_CACHE.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n, dtype=np.uint64)
        rev = np.zeros_like(idx)
        for b in range(bits):
            rev |= ((idx >> np.uint64(b)) & np.uint64(1)) << np.uint64(bits - 1 - b)
        perm = rev.astype(np.intp)
        _BITREV_CACHE[n] = perm
    return perm


def _stage_twiddle(half, sign):
    key = (half, sign)
    tw = _STAGE_TW_CACHE.get(key)
    if tw is None:
        tw = np.exp(sign * 1j * np.pi * np.arange(half) / half)
        _STAGE_TW_CACHE[key] = tw
    return tw


@njit(cache=True)
def _butterflies_compiled(y, w):  # pragma: no cover - timed path
    """In-place radix-2 butterflies on bit-reversed rows; ``w`` is the
    half-circle twiddle table for the transform direction."""
    rows, n = y.shape
    half = 1
    while half < n:
        stride = n // (2 * half)
        step = 2 * half
        for r in range(rows):
            for b0 in range(0, n, step):
                for j in range(half):
                    t = y[r, b0 + half + j] * w[j * stride]
                    u = y[r, b0 + j]
                    y[r, b0 + j] = u + t
                    y[r, b0 + half + j] = u - t
        half = step
    return y


def _halfcircle(n, sign):
    key = (-n, sign)
    w = _STAGE_TW_CACHE.get(key)
    if w is None:
        w = np.exp(sign * 2j * np.pi * np.arange(max(n // 2, 1)) / n)
        _STAGE_TW_CACHE[key] = w
    return w


def _fft_pow2(a, sign):
    """Iterative radix-2 butterflies after a bit-reversal permutation."""
    n = a.shape[-1]
    y = np.asarray(a, dtype=np.complex128)[..., _bitrev(n)]
    batch = a.shape[:-1]
    if _HAVE_NUMBA and n > 1:
        flat = np.ascontiguousarray(y).reshape(-1, n)
        return _butterflies_compiled(flat, _halfcircle(n, sign)).reshape(batch + (n,))
    half = 1
    while half < n:
        y = y.reshape(batch + (n // (2 * half), 2, half))
        if half == 1:
            tv = y[..., 1, :].copy()
        else:
            tv = y[..., 1, :] * _stage_twiddle(half, sign)
        y[..., 1, :] = y[..., 0, :] - tv
        y[..., 0, :] += tv
        y = y.reshape(batch + (n,))
        half *= 2
    return y


def _fft_last(a, sign):
    """Unnormalized DFT along the last axis; sign -1 forward, +1 inverse."""
    n = a.shape[-1]
    if n == 1:
        return a.astype(np.complex128, copy=True)
    if n & (n - 1) == 0:
        return _fft_pow2(a, sign)
    p = _smallest_prime_factor(n)
    if p == n:
        if n <= _DIRECT_PRIME_MAX:
            return a @ _dft_matrix(n, sign)
        return _bluestein(a, sign)
    m = n // p
    # Decimate into p interleaved subsequences, transform each, then
    # recombine with twiddles and a small DFT across the residues.
    sub = np.swapaxes(a.reshape(a.shape[:-1] + (m, p)), -1, -2)
    f = _fft_last(sub, sign) * _twiddle(n, p, sign)
    out = np.einsum("...bc,bd->...dc", f, _dft_matrix(p, sign))
    return out.reshape(a.shape[:-1] + (n,))


def fft2_array(a):
    """Forward 2-D DFT over the last two axes of a real or complex array."""
    z = np.asarray(a, dtype=np.complex128)
    z = _fft_last(z, -1)
    z = np.swapaxes(_fft_last(np.swapaxes(z, -1, -2), -1), -1, -2)
    return z


def ifft2_array(a):
    """Inverse 2-D DFT over the last two axes, normalized by 1/(rows*cols)."""
    z = np.asarray(a, dtype=np.complex128)
    z = _fft_last(z, +1)
    z = np.swapaxes(_fft_last(np.swapaxes(z, -1, -2), +1), -1, -2)
    return z / (z.shape[-1] * z.shape[-2])


# ---------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------


def fft2(x):
    """Forward transform of a real tensor; returns a ComplexTensor.

    The DFT is linear, so each output part backpropagates through the
    forward kernel applied to its own upstream gradient.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 2:
        raise ValueError(f"fft2 expects at least a 2-d tensor, got shape {x.shape}")
    z = fft2_array(x.data)

    def back_re(g):
        if x.requires_grad:
            _add_grad(x, fft2_array(g).real)

    def back_im(g):
        if x.requires_grad:
            _add_grad(x, fft2_array(g).imag)

    re = _from_op(z.real.copy(), (x,), back_re)
    im = _from_op(z.imag.copy(), (x,), back_im)
    return ComplexTensor(re, im)


def ifft2(z):
    """Inverse transform of a ComplexTensor; returns a ComplexTensor."""
    zr, zi = z.re, z.im
    y = ifft2_array(zr.data + 1j * zi.data)

    def back_re(g):
        h = ifft2_array(g)
        if zr.requires_grad:
            _add_grad(zr, h.real)
        if zi.requires_grad:
            _add_grad(zi, -h.imag)

    def back_im(g):
        h = ifft2_array(g)
        if zr.requires_grad:
            _add_grad(zr, h.imag)
        if zi.requires_grad:
            _add_grad(zi, h.real)

    re = _from_op(y.real.copy(), (zr, zi), back_re)
    im = _from_op(y.imag.copy(), (zr, zi), back_im)
    return ComplexTensor(re, im)


def amplitude(z):
    """Elementwise magnitude sqrt(re^2 + im^2)."""
    zr, zi = z.re, z.im
    a = np.hypot(zr.data, zi.data)

    def back(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(a > 0, g / np.where(a > 0, a, 1.0), 0.0)
        if zr.requires_grad:
            _add_grad(zr, scale * zr.data)
        if zi.requires_grad:
            _add_grad(zi, scale * zi.data)

    return _from_op(a, (zr, zi), back)


def phase(z):
    """Four-quadrant phase atan2(im, re), with atan2(0, 0) := 0."""
    zr, zi = z.re, z.im
    p = np.arctan2(zi.data, zr.data)

    def back(g):
        a2 = zr.data * zr.data + zi.data * zi.data
        safe = np.where(a2 > 0, a2, 1.0)
        mask = a2 > 0
        if zr.requires_grad:
            _add_grad(zr, np.where(mask, -g * zi.data / safe, 0.0))
        if zi.requires_grad:
            _add_grad(zi, np.where(mask, g * zr.data / safe, 0.0))

    return _from_op(p, (zr, zi), back)


def complex_mul(a, b):
    """Elementwise complex product of two ComplexTensors."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"complex_mul shapes are incompatible: {a.shape} vs {b.shape}") from None
    re = a.re * b.re - a.im * b.im
    im = a.re * b.im + a.im * b.re
    return ComplexTensor(re, im)


def dft2_naive(x):
    """Literal double-sum DFT of a 2-d matrix: O((C*T)^2), test oracle only."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.ndim != 2:
        raise ValueError(f"dft2_naive expects a 2-d matrix, got shape {xd.shape}")
    c, t = xd.shape
    h = np.arange(c)[:, None]
    w = np.arange(t)[None, :]
    out = np.zeros((c, t), dtype=np.complex128)
    for u in range(c):
        for v in range(t):
            kernel = np.exp(-2j * np.pi * (h * u / c + w * v / t))
            out[u, v] = (xd * kernel).sum()
    return ComplexTensor(Tensor(out.real), Tensor(out.imag))
