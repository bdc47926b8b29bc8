"""Image I/O, Laplacian frequency machinery, high-frequency operators,
and the quality-metric suite (PSNR, SSIM, CIELAB color differences).

Images are H x W x 3 float arrays in [0, 1]; residuals are signed arrays of
the same shape.  All functions here are pure and operate on plain numpy —
border handling is reflection everywhere so constants have zero response.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Image", "MetricReport", "ImageFormatError",
    "load_image", "save_image", "gaussian5x5", "laplacian_residual",
    "hf_operator", "psnr", "ssim", "rgb_to_lab", "delta_e_ab", "delta_e_00",
]

# luminance weights (ITU 601), shared by the gray operator and SSIM
_LUMA = np.array([0.299, 0.587, 0.114])

HF_KINDS = ("color_laplacian", "gray_laplacian", "sobel")


class ImageFormatError(ValueError):
    """Unreadable, truncated, or unsupported image data."""


class Image:
    """RGB image with pixels clamped to [0, 1]."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageFormatError(f"expected H x W x 3 pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ImageFormatError("image must have positive dimensions")
        self.pixels = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __repr__(self):
        return f"Image({self.height}x{self.width})"


@dataclasses.dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    delta_e_ab: float
    delta_e_00: float

    @classmethod
    def compute(cls, a: "Image", b: "Image") -> "MetricReport":
        return cls(psnr(a, b), ssim(a, b), delta_e_ab(a, b), delta_e_00(a, b))

    def line(self, name: str) -> str:
        return (f"{name}\t{self.psnr_db:.4f}\t{self.ssim:.4f}"
                f"\t{self.delta_e_ab:.4f}\t{self.delta_e_00:.4f}")


# ---------------------------------------------------------------------------
# I/O: binary PPM (P6) mandatory, PNG optional behind Pillow
# ---------------------------------------------------------------------------

def _read_ppm(data: bytes, path) -> Image:
    if not data.startswith(b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {data[:2]!r} (want P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ImageFormatError(f"{path}: bad header field") from e
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if width <= 0 or height <= 0 or width * height > 2 ** 28:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    need = width * height * 3
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(raw)}/{need} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0)


def load_image(path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"cannot read {path}: {e}") from e
    if data.startswith(b"\x89PNG"):
        return _load_png(path)
    return _read_ppm(data, path)


def save_image(img: Image, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        _save_png(img, path)
        return
    q = _quantize(img.pixels)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    path.write_bytes(header + q.tobytes())


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _load_png(path) -> Image:
    try:
        from PIL import Image as PILImage
    except ImportError as e:
        raise ImageFormatError("PNG support requires Pillow (install extra 'png')") from e
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as e:
        raise ImageFormatError(f"cannot decode {path}: {e}") from e
    return Image(arr / 255.0)


def _save_png(img: Image, path) -> None:
    try:
        from PIL import Image as PILImage
    except ImportError as e:
        raise ImageFormatError("PNG support requires Pillow (install extra 'png')") from e
    PILImage.fromarray(_quantize(img.pixels), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Frequency machinery
# ---------------------------------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _sep_filter_reflect(arr: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation with reflect borders, per channel (H,W,C)."""
    r = len(k) // 2
    pad = np.pad(arr, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = np.einsum("hwcf,f->hwc", sliding_window_view(pad, len(k), axis=0), k)
    pad = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return np.einsum("hwcf,f->hwc", sliding_window_view(pad, len(k), axis=1), k)


def gaussian5x5(img: Image) -> Image:
    """5x5 binomial blur ([1,4,6,4,1]/16 per axis) with reflect padding."""
    return Image(_sep_filter_reflect(img.pixels, _BINOMIAL5))


def _block_down2(arr: np.ndarray) -> np.ndarray:
    H, W, C = arr.shape
    return arr.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))


def _bilinear_up2(arr: np.ndarray) -> np.ndarray:
    # align-corners-false sampling: centers at (o + 0.5)/2 - 0.5
    def axis_up(x, axis):
        n = x.shape[axis]
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        i0f = np.floor(src)
        frac = (src - i0f).reshape([-1 if d == axis else 1 for d in range(x.ndim)])
        lo = np.clip(i0f, 0, n - 1).astype(np.intp)
        hi = np.clip(i0f + 1, 0, n - 1).astype(np.intp)
        return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac

    return axis_up(axis_up(arr, 0), 1)


def _smooth_base(pixels: np.ndarray) -> np.ndarray:
    """Up(Down(G(x))) with reflect-pad-to-even handling for odd dims."""
    H, W, _ = pixels.shape
    ph, pw = H % 2, W % 2
    x = np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect") if ph or pw else pixels
    base = _bilinear_up2(_block_down2(_sep_filter_reflect(x, _BINOMIAL5)))
    return base[:H, :W]


def laplacian_residual(img: Image) -> np.ndarray:
    """Signed single-octave color residual: img - Up(Down(G(img)))."""
    return img.pixels - _smooth_base(img.pixels)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _correlate2d_reflect(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    pad = np.pad(plane, r, mode="reflect")
    win = sliding_window_view(pad, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def hf_operator(img: Image, kind: str) -> np.ndarray:
    """High-frequency structural prior; residual is H,W,3.

    color_laplacian keeps signed per-channel residuals; gray_laplacian runs
    the same pipeline on the replicated luminance channel; sobel returns
    per-channel non-negative gradient magnitudes (directional signs lost).
    """
    if kind == "color_laplacian":
        return laplacian_residual(img)
    if kind == "gray_laplacian":
        luma = img.pixels @ _LUMA
        gray = np.repeat(luma[:, :, None], 3, axis=2)
        return gray - _smooth_base(gray)
    if kind == "sobel":
        out = np.empty_like(img.pixels)
        for c in range(3):
            gx = _correlate2d_reflect(img.pixels[:, :, c], _SOBEL_X)
            gy = _correlate2d_reflect(img.pixels[:, :, c], _SOBEL_X.T)
            out[:, :, c] = np.sqrt(gx * gx + gy * gy)
        return out
    raise ValueError(f"unknown hf operator kind {kind!r} (choose from {HF_KINDS})")


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

def _check_same_size(a: Image, b: Image) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image sizes differ: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99.0 for identical inputs."""
    _check_same_size(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _sep_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    x = np.einsum("hwf,f->hw", sliding_window_view(x, len(k), axis=1), k)
    return np.einsum("whf,f->hw", sliding_window_view(x, len(k), axis=0).transpose(1, 0, 2), k)


def ssim(a: Image, b: Image) -> float:
    """Single-scale SSIM on luminance: 11x11 Gaussian window, sigma 1.5,
    K1=0.01, K2=0.03, averaged over valid window positions."""
    _check_same_size(a, b)
    if a.height < 11 or a.width < 11:
        raise ValueError(f"image {a.height}x{a.width} smaller than the 11x11 SSIM window")
    x = a.pixels @ _LUMA
    y = b.pixels @ _LUMA
    w = _gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx = _sep_valid(x, w)
    my = _sep_valid(y, w)
    sxx = _sep_valid(x * x, w) - mx * mx
    syy = _sep_valid(y * y, w) - my * my
    sxy = _sep_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# sRGB (D65) to XYZ, 2-degree observer
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: Image) -> np.ndarray:
    """sRGB in [0,1] -> CIELAB planes (H, W, 3) under D65."""
    srgb = img.pixels
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T / _WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta ** 3, np.cbrt(xyz), xyz / (3 * delta * delta) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e_ab(a: Image, b: Image) -> float:
    """Mean per-pixel Euclidean CIELAB distance (CIE76)."""
    _check_same_size(a, b)
    d = rgb_to_lab(a) - rgb_to_lab(b)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))


def ciede2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 color difference, elementwise over (..., 3) Lab arrays."""
    L1, a1, b1 = (lab1[..., i] for i in range(3))
    L2, a2, b2 = (lab2[..., i] for i in range(3))

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar = 0.5 * (c1 + c2)
    g = 0.5 * (1.0 - np.sqrt(cbar ** 7 / (cbar ** 7 + 25.0 ** 7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = c2p - c1p
    zero_chroma = (c1p * c2p) == 0.0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dHp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    Lbar = 0.5 * (L1 + L2)
    Cbar = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbar = np.where(habs <= 180.0, 0.5 * hsum,
                    np.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0)))
    hbar = np.where(zero_chroma, hsum, hbar)

    t = (1.0
         - 0.17 * np.cos(np.radians(hbar - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * hbar))
         + 0.32 * np.cos(np.radians(3.0 * hbar + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * hbar - 63.0)))
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    rc = 2.0 * np.sqrt(Cbar ** 7 / (Cbar ** 7 + 25.0 ** 7))
    sl = 1.0 + 0.015 * (Lbar - 50.0) ** 2 / np.sqrt(20.0 + (Lbar - 50.0) ** 2)
    sc = 1.0 + 0.045 * Cbar
    sh = 1.0 + 0.015 * Cbar * t
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    return np.sqrt((dLp / sl) ** 2 + (dCp / sc) ** 2 + (dHp / sh) ** 2
                   + rt * (dCp / sc) * (dHp / sh))


def delta_e_00(a: Image, b: Image) -> float:
    """Mean per-pixel CIEDE2000 distance."""
    _check_same_size(a, b)
    return float(np.mean(ciede2000(rgb_to_lab(a), rgb_to_lab(b))))
