"""Matrix-free linear degradation and analysis operators with exact adjoints.

Every operator declares an input and output array shape and provides
``apply``/``adjoint`` with shape checking. Adjoints are exact transposes of
``apply`` (inner-product identity to round-off), which the helper
``adjoint_check`` probes with seeded random vectors.

Shapes follow the image convention (channels, height, width). Convolutions
use the *valid* boundary rule, so blurred outputs shrink by the kernel
support. Filter banks use the correlation convention common to conv layers;
``BlurOperator`` flips its kernel internally to implement true convolution.
"""

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError
from .image import load_pfm, save_pfm

__all__ = [
    "LinearOperator",
    "IdentityOperator",
    "BlurOperator",
    "SrOperator",
    "CfaOperator",
    "FilterBank",
    "ChainedOperator",
    "adjoint_check",
    "spectral_norm_sq",
    "dense_matrix",
    "builtin_filter_bank",
    "load_kernel",
    "save_filter_bank",
    "load_filter_bank",
]

FILTER_BANK_MAGIC = b"LIRLSFB1"


def _corr_valid(x, kernel):
    """Valid correlation of (c, H, W) with a 2-D kernel, per channel."""
    patches = sliding_window_view(x, kernel.shape, axis=(1, 2))
    return np.einsum("chwab,ab->chw", patches, kernel, optimize=True)


def _pad_spatial(u, pad_h, pad_w):
    widths = [(0, 0)] * (u.ndim - 2) + [(pad_h, pad_h), (pad_w, pad_w)]
    return np.pad(u, widths)


class LinearOperator:
    """Base class fixing the apply/adjoint contract and shape checks."""

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def apply(self, x):
        x = self._checked(x, self.in_shape, "apply")
        return self._apply(x)

    def adjoint(self, u):
        u = self._checked(u, self.out_shape, "adjoint")
        return self._adjoint(u)

    def _checked(self, arr, shape, what):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise DimensionError(
                f"{type(self).__name__}.{what}: expected shape {shape}, got {arr.shape}"
            )
        return arr

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, u):
        raise NotImplementedError


class IdentityOperator(LinearOperator):
    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, u):
        return u.copy()


_FFT_PIXEL_THRESHOLD = 1024  # adjoints switch to the FFT path on larger grids


class BlurOperator(LinearOperator):
    """Valid convolution with one kernel, applied identically to each channel."""

    def __init__(self, kernel, in_shape):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2:
            raise DimensionError(f"blur kernel must be 2-D, got shape {kernel.shape}")
        if not np.all(np.isfinite(kernel)):
            raise ValueError("blur kernel contains NaN or Inf")
        c, h, w = in_shape
        kh, kw = kernel.shape
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kh}x{kw} larger than image {h}x{w}")
        super().__init__(in_shape, (c, h - kh + 1, w - kw + 1))
        self.kernel = kernel
        self._flipped = kernel[::-1, ::-1].copy()
        self._otf = None

    def _apply(self, x):
        return _corr_valid(x, self._flipped)

    def _adjoint(self, u):
        kh, kw = self.kernel.shape
        c, h, w = self.in_shape
        if h * w < _FFT_PIXEL_THRESHOLD:
            return _corr_valid(_pad_spatial(u, kh - 1, kw - 1), self.kernel)
        # circular convolution of the zero-embedded cotangent, cropped exactly
        if self._otf is None:
            embedded = np.zeros((h, w))
            embedded[: kh, : kw] = self._flipped
            self._otf = np.fft.rfft2(embedded)
        padded = np.zeros((u.shape[0], h, w))
        padded[:, : u.shape[1], : u.shape[2]] = u
        spec = np.fft.rfft2(padded, axes=(-2, -1)) * self._otf
        return np.fft.irfft2(spec, s=(h, w), axes=(-2, -1))


class SrOperator(LinearOperator):
    """Valid convolution followed by decimation at integer stride (phase 0)."""

    def __init__(self, kernel, scale, in_shape):
        if scale < 1 or int(scale) != scale:
            raise ValueError(f"scale must be a positive integer, got {scale}")
        self.blur = BlurOperator(kernel, in_shape)
        self.scale = int(scale)
        c, hv, wv = self.blur.out_shape
        oh, ow = hv // self.scale, wv // self.scale
        if oh < 1 or ow < 1:
            raise DimensionError("decimated output would be empty")
        super().__init__(in_shape, (c, oh, ow))

    def _apply(self, x):
        s = self.scale
        _, oh, ow = self.out_shape
        y = self.blur.apply(x)
        return y[:, : s * oh : s, : s * ow : s].copy()

    def _adjoint(self, u):
        s = self.scale
        _, oh, ow = self.out_shape
        up = np.zeros(self.blur.out_shape)
        up[:, : s * oh : s, : s * ow : s] = u
        return self.blur.adjoint(up)


_CFA_CHANNELS = {"R": 0, "G": 1, "B": 2}


class CfaOperator(LinearOperator):
    """Bayer color-filter-array sampling: one channel kept per pixel."""

    def __init__(self, in_shape, pattern="RGGB"):
        c, h, w = in_shape
        if c != 3:
            raise DimensionError(f"CFA needs a 3-channel input, got {c}")
        pattern = pattern.upper()
        if len(pattern) != 4 or any(ch not in _CFA_CHANNELS for ch in pattern):
            raise ValueError(f"bad CFA pattern {pattern!r}")
        super().__init__(in_shape, (1, h, w))
        self.pattern = pattern
        rows = np.arange(h)[:, None] % 2
        cols = np.arange(w)[None, :] % 2
        idx = 2 * rows + cols  # 0..3 tile position
        lut = np.array([_CFA_CHANNELS[ch] for ch in pattern])
        self.channel_map = lut[idx]  # (H, W) channel index sampled at each pixel

    def _apply(self, x):
        h, w = self.in_shape[1:]
        return x[self.channel_map, np.arange(h)[:, None], np.arange(w)[None, :]][None]

    def _adjoint(self, u):
        out = np.zeros(self.in_shape)
        h, w = self.in_shape[1:]
        out[self.channel_map, np.arange(h)[:, None], np.arange(w)[None, :]] = u[0]
        return out


class FilterBank(LinearOperator):
    """Analysis operator built from a bank of small correlation filters.

    mode "sparse": filters of shape (n_filters, c, kh, kw) mix the color
    channels; output (n_filters, Hv, Wv), one n_filters-vector per valid
    position.

    mode "low_rank": filters of shape (n_filters, 1, kh, kw) apply to every
    channel independently; output (c, n_filters, Hv, Wv), one c x n_filters
    matrix per valid position.
    """

    def __init__(self, filters, in_shape, mode="sparse"):
        filters = np.asarray(filters, dtype=np.float64)
        if filters.ndim != 4:
            raise DimensionError(f"filters must be (n, c_in, kh, kw), got {filters.shape}")
        if not np.all(np.isfinite(filters)):
            raise ValueError("filter coefficients contain NaN or Inf")
        if mode not in ("sparse", "low_rank"):
            raise ValueError(f"unknown filter bank mode {mode!r}")
        c, h, w = in_shape
        nf, c_in, kh, kw = filters.shape
        if kh > h or kw > w:
            raise DimensionError(f"filter {kh}x{kw} larger than image {h}x{w}")
        hv, wv = h - kh + 1, w - kw + 1
        if mode == "sparse":
            if c_in != c:
                raise DimensionError(f"sparse mode needs c_in == {c}, got {c_in}")
            out_shape = (nf, hv, wv)
        else:
            if c_in != 1:
                raise DimensionError(f"low_rank mode needs c_in == 1, got {c_in}")
            if nf < c:
                raise DimensionError(
                    f"low_rank mode needs at least {c} filters for full-rank groups, got {nf}"
                )
            out_shape = (c, nf, hv, wv)
        super().__init__(in_shape, out_shape)
        self.filters = filters
        self.mode = mode
        self.grid = (hv, wv)
        self._otf = None

    @property
    def num_filters(self):
        return self.filters.shape[0]

    def _apply(self, x):
        nf, _, kh, kw = self.filters.shape
        patches = sliding_window_view(x, (kh, kw), axis=(1, 2))
        if self.mode == "sparse":
            return np.einsum("chwab,fcab->fhw", patches, self.filters, optimize=True)
        return np.einsum("chwab,fab->cfhw", patches, self.filters[:, 0], optimize=True)

    def _adjoint(self, u):
        nf, _, kh, kw = self.filters.shape
        c, h, w = self.in_shape
        if h * w >= _FFT_PIXEL_THRESHOLD:
            return self._adjoint_fft(u)
        padded = _pad_spatial(u, kh - 1, kw - 1)
        patches = sliding_window_view(padded, (kh, kw), axis=(-2, -1))
        flipped = self.filters[:, :, ::-1, ::-1]
        if self.mode == "sparse":
            return np.einsum("fhwab,fcab->chw", patches, flipped, optimize=True)
        return np.einsum("cfhwab,fab->chw", patches, flipped[:, 0], optimize=True)

    def _adjoint_fft(self, u):
        # full convolution of the zero-embedded cotangent with each filter,
        # realized circularly on the input grid (the wrap touches only zeros)
        nf, _, kh, kw = self.filters.shape
        c, h, w = self.in_shape
        if self._otf is None:
            embedded = np.zeros((nf, self.filters.shape[1], h, w))
            embedded[:, :, :kh, :kw] = self.filters
            self._otf = np.fft.rfft2(embedded, axes=(-2, -1))
        hv, wv = self.grid
        if self.mode == "sparse":
            padded = np.zeros((nf, h, w))
            padded[:, :hv, :wv] = u
            spec = np.fft.rfft2(padded, axes=(-2, -1))
            combined = np.einsum("fhw,fchw->chw", spec, self._otf, optimize=True)
        else:
            padded = np.zeros((c, nf, h, w))
            padded[:, :, :hv, :wv] = u
            spec = np.fft.rfft2(padded, axes=(-2, -1))
            combined = np.einsum("cfhw,fhw->chw", spec, self._otf[:, 0], optimize=True)
        return np.fft.irfft2(combined, s=(h, w), axes=(-2, -1))

    def stencil_norm_sq(self, iterations=200, seed=0):
        """Squared spectral norm of any single-position group map.

        Every group extraction is the same local stencil matrix applied to a
        patch, so its norm is the top singular value of the flattened filter
        matrix, estimated by power iteration.
        """
        if self.mode == "sparse":
            mat = self.filters.reshape(self.num_filters, -1)
        else:
            mat = self.filters[:, 0].reshape(self.num_filters, -1)
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(mat.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            w = mat.T @ (mat @ v)
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                return 0.0
            v = w / nrm
            new_lam = float(v @ (mat.T @ (mat @ v)))
            if abs(new_lam - lam) <= 1e-14 * max(1.0, new_lam):
                return new_lam
            lam = new_lam
        return lam


class ChainedOperator(LinearOperator):
    """Composition outer(inner(x)); adjoint composes in reverse order."""

    def __init__(self, outer, inner):
        if outer.in_shape != inner.out_shape:
            raise DimensionError(
                f"cannot chain: inner output {inner.out_shape} vs outer input {outer.in_shape}"
            )
        super().__init__(inner.in_shape, outer.out_shape)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, u):
        return self.inner.adjoint(self.outer.adjoint(u))


def adjoint_check(op, trials=100, seed=0):
    """Max relative defect |<Ax,u> - <x,A'u>| / (|Ax| |u|) over seeded trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.in_shape)
        u = rng.standard_normal(op.out_shape)
        ax = op.apply(x)
        atu = op.adjoint(u)
        lhs = float(np.vdot(ax, u))
        rhs = float(np.vdot(x, atu))
        denom = np.linalg.norm(ax) * np.linalg.norm(u)
        if denom == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def spectral_norm_sq(op, iterations=500, seed=0, tol=1e-13):
    """Estimate |op|_2^2 by power iteration on op' op."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.in_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = op.adjoint(op.apply(v))
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new_lam = float(np.vdot(v, op.adjoint(op.apply(v))))
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            return new_lam
        lam = new_lam
    return lam


def dense_matrix(op):
    """Materialize an operator as a dense matrix (small shapes only)."""
    n = int(np.prod(op.in_shape))
    m = int(np.prod(op.out_shape))
    mat = np.zeros((m, n))
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        mat[:, j] = op.apply(basis.reshape(op.in_shape)).ravel()
        basis[j] = 0.0
    return mat


# ---------------------------------------------------------------------------
# Kernel and filter bank file formats.
# ---------------------------------------------------------------------------


def builtin_filter_bank(name, channels, mode="sparse", scale=1.0):
    """Hand-crafted analysis filters for prior baselines without training.

    "grad": horizontal and vertical first differences (per channel in sparse
    mode, shared in low_rank mode plus a diagonal contrast filter).
    "grad_color": per-channel differences plus chroma differences between
    neighboring channels (sparse mode only); the usual color-TV baseline.
    """
    dx = np.array([[1.0, -1.0], [0.0, 0.0]])
    dy = np.array([[1.0, 0.0], [-1.0, 0.0]])
    if name == "grad":
        if mode == "low_rank":
            filters = np.zeros((3, 1, 2, 2))
            filters[0, 0] = dx
            filters[1, 0] = dy
            filters[2, 0] = np.array([[1.0, -1.0], [-1.0, 1.0]])
            return filters * scale
        filters = np.zeros((2 * channels, channels, 2, 2))
        for ch in range(channels):
            filters[2 * ch, ch] = dx
            filters[2 * ch + 1, ch] = dy
        return filters * scale
    if name == "grad_color":
        if mode != "sparse":
            raise ValueError("grad_color is a channel-mixing bank; sparse mode only")
        taps = []
        for ch in range(channels):
            for t in (dx, dy):
                f = np.zeros((channels, 2, 2))
                f[ch] = t
                taps.append(f)
        for first in range(channels - 1):
            for t in (dx, dy):
                f = np.zeros((channels, 2, 2))
                f[first] = t
                f[first + 1] = -t
                taps.append(f)
        return np.stack(taps) * scale
    raise ValueError(f"unknown builtin filter bank {name!r}")


def load_kernel(path):
    """Read a 2-D kernel from a whitespace text matrix or a 1-channel PFM."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        arr = load_pfm(path)
        if arr.shape[0] != 1:
            raise FormatError(f"{path}: kernel PFM must have one channel")
        kernel = arr[0]
    else:
        try:
            kernel = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
        except ValueError as exc:
            raise FormatError(f"{path}: cannot parse kernel text") from exc
    if not np.all(np.isfinite(kernel)):
        raise FormatError(f"{path}: kernel contains NaN or Inf")
    return kernel


def save_kernel(path, kernel):
    kernel = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        save_pfm(path, kernel[None])
    else:
        np.savetxt(path, kernel, fmt="%.17g")


def save_filter_bank(path, filters):
    """Write filter coefficients in the LIRLSFB1 binary container."""
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 4:
        raise DimensionError(f"filters must be (n, c_in, kh, kw), got {filters.shape}")
    with open(path, "wb") as f:
        f.write(FILTER_BANK_MAGIC)
        f.write(struct.pack("<4I", *filters.shape))
        f.write(filters.astype("<f8").tobytes())


def load_filter_bank(path, in_shape=None, mode="sparse"):
    """Read a LIRLSFB1 container; returns FilterBank if in_shape given, else
    the raw (n, c_in, kh, kw) coefficient array."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FILTER_BANK_MAGIC:
            raise FormatError(f"{path}: bad filter bank magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated filter bank header")
        nf, c_in, kh, kw = struct.unpack("<4I", header)
        payload = f.read(nf * c_in * kh * kw * 8)
    coeffs = np.frombuffer(payload, dtype="<f8")
    if coeffs.size != nf * c_in * kh * kw:
        raise FormatError(f"{path}: filter bank payload shorter than header promises")
    coeffs = coeffs.reshape(nf, c_in, kh, kw).copy()
    if in_shape is None:
        return coeffs
    return FilterBank(coeffs, in_shape, mode=mode)
