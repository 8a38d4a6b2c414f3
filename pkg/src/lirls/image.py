"""Multichannel image container, quality metrics, and PNG/PFM file IO.

Images are (channels, height, width) float arrays, nominal display range
[0, 1]. Intermediate computations may leave that range; NaN/Inf never do.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError

__all__ = [
    "MultichannelImage",
    "MetricReport",
    "psnr",
    "ssim",
    "metric_report",
    "load_image",
    "save_image",
    "load_pfm",
    "save_pfm",
]


@dataclass(frozen=True)
class MultichannelImage:
    """Immutable c x H x W real image tensor.

    The data array is copied and marked read-only. All values must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DimensionError(f"image data must be (c, H, W), got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains NaN or Inf")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class MetricReport:
    """PSNR (dB, math.inf for bit-identical inputs), SSIM in [-1, 1], and the
    peak intensity both were computed against."""

    psnr: float
    ssim: float
    peak: float


def _as_array(img):
    if isinstance(img, MultichannelImage):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"expected (c, H, W) array, got shape {arr.shape}")
    return arr


def _check_pair(a, b):
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB over the full (c, H, W) tensor.

    MSE is taken jointly over all channels. Returns math.inf when the two
    images are bit-identical (MSE exactly zero).
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    x, y = _check_pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _ssim_window():
    r = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * _SSIM_SIGMA**2))
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(plane, window):
    # valid-mode correlation of one 2-D plane with a small window
    patches = sliding_window_view(plane, window.shape)
    return np.einsum("hwab,ab->hw", patches, window, optimize=True)


def ssim(a, b, peak=1.0):
    """Mean single-scale SSIM over all channels.

    11x11 Gaussian window (sigma 1.5), stability constants K1=0.01, K2=0.03.
    Both images must be at least 11 pixels in each spatial dimension.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    x, y = _check_pair(a, b)
    _, h, w = x.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise DimensionError(f"image {h}x{w} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    win = _ssim_window()
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    vals = []
    for xc, yc in zip(x, y):
        mu_x = _filter_valid(xc, win)
        mu_y = _filter_valid(yc, win)
        var_x = _filter_valid(xc * xc, win) - mu_x**2
        var_y = _filter_valid(yc * yc, win) - mu_y**2
        cov = _filter_valid(xc * yc, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def metric_report(a, b, peak=1.0):
    return MetricReport(psnr=psnr(a, b, peak), ssim=ssim(a, b, peak), peak=peak)


# ---------------------------------------------------------------------------
# File IO.  PNG: 8/16-bit, gray or RGB, scaled to [0, 1].  PFM: 32-bit float,
# little endian (scale field -1.0), values passed through verbatim.
# ---------------------------------------------------------------------------


def load_pfm(path):
    """Read a PFM file into a (c, H, W) float64 array (c is 1 or 3)."""
    with open(path, "rb") as f:
        raw = f.read()

    def next_token(pos):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PFM header")
        return raw[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
    try:
        wtok, pos = next_token(pos)
        htok, pos = next_token(pos)
        stok, pos = next_token(pos)
        width, height, scale = int(wtok), int(htok), float(stok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: corrupt PFM header") from exc
    if width <= 0 or height <= 0 or scale == 0:
        raise FormatError(f"{path}: corrupt PFM header")
    endian = "<" if scale < 0 else ">"
    pos += 1  # single whitespace byte after the scale line
    count = width * height * channels
    data = np.frombuffer(raw, dtype=endian + "f4", count=count, offset=pos)
    if data.size != count:
        raise FormatError(f"{path}: PFM payload shorter than header promises")
    rows = data.reshape(height, width, channels)[::-1]  # stored bottom-up
    return np.ascontiguousarray(np.moveaxis(rows, -1, 0)).astype(np.float64)


def save_pfm(path, data):
    """Write a (c, H, W) array as little-endian PFM (c is 1 or 3)."""
    arr = np.asarray(data)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"PFM needs 1 or 3 channels, got shape {arr.shape}")
    c, h, w = arr.shape
    planes = np.moveaxis(arr.astype("<f4"), 0, -1)[::-1]
    with open(path, "wb") as f:
        f.write(b"PF\n" if c == 3 else b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(planes.tobytes())


def _load_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: unreadable PNG")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        planes = raw[None, :, :]
    elif raw.ndim == 3 and raw.shape[2] == 3:
        planes = np.moveaxis(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB), -1, 0)
    else:
        nch = 1 if raw.ndim == 2 else raw.shape[2]
        raise FormatError(f"{path}: channel count {nch} not in {{1, 3}}")
    return planes.astype(np.float64) / scale


def load_image(path):
    """Load a PNG (scaled to [0, 1]) or PFM (verbatim) as MultichannelImage."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return MultichannelImage(_load_png(path))
    if suffix == ".pfm":
        arr = load_pfm(path)
        if arr.shape[0] not in (1, 3):
            raise FormatError(f"{path}: channel count {arr.shape[0]} not in {{1, 3}}")
        return MultichannelImage(arr)
    raise FormatError(f"{path}: unsupported format {suffix!r} (use .png or .pfm)")


def save_image(image, path, png_bits=8):
    """Save to PNG (clipped to [0, 1], 8 or 16 bit) or PFM (float verbatim)."""
    arr = _as_array(image)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        save_pfm(path, arr)
        return
    if suffix != ".png":
        raise FormatError(f"{path}: unsupported format {suffix!r} (use .png or .pfm)")
    if arr.shape[0] not in (1, 3):
        raise FormatError(f"PNG needs 1 or 3 channels, got shape {arr.shape}")
    if png_bits == 8:
        quant = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif png_bits == 16:
        quant = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise ValueError("png_bits must be 8 or 16")
    if quant.shape[0] == 1:
        ok = cv2.imwrite(str(path), quant[0])
    else:
        ok = cv2.imwrite(str(path), cv2.cvtColor(np.moveaxis(quant, 0, -1), cv2.COLOR_RGB2BGR))
    if not ok:
        raise FormatError(f"{path}: PNG write failed")
