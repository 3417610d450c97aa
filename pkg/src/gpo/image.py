"""Single-channel float images in [0,1]: I/O, blur, resize, bilinear sampling.

Conventions used throughout the package:
  * an image is a row-major ``float64`` array of shape ``(height, width)``,
  * pixel coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row,
  * the origin sits at the center of pixel ``(0, 0)``,
  * sampling outside ``[0, W-1] x [0, H-1]`` clamps to the border, with zero
    spatial derivative in the clamped direction.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PilImage
from PIL import UnidentifiedImageError
from scipy.ndimage import correlate1d

from .errors import ImageFormatError

# Video-luma weights for reducing color input to one channel.
_LUMA = (0.299, 0.587, 0.114)


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless ``img`` is a finite 2-D raster in [0,1]."""
    if not isinstance(img, np.ndarray) or img.ndim != 2:
        raise ValueError("image must be a 2-D array")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have width >= 1 and height >= 1")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


def load_image(path) -> np.ndarray:
    """Load an 8/16-bit grayscale or 8-bit color raster as floats in [0,1].

    Color input is reduced to luma (0.299 R + 0.587 G + 0.114 B); values are
    scaled by the bit-depth maximum.
    """
    try:
        with PilImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "1":
                im = im.convert("L")
                mode = "L"
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("L", "LA"):
                arr = np.asarray(im if mode == "L" else im.getchannel("L"), dtype=np.float64)
                out = arr / 255.0
            elif mode in ("I;16", "I;16L", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                out = arr / 65535.0
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im, dtype=np.float64)
                r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
                out = (_LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b) / 255.0
            else:
                raise ImageFormatError(f"unsupported raster mode '{mode}' in '{path}'")
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"not a recognized raster format: '{path}'") from exc
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        raise OSError(f"cannot read image '{path}': {exc}") from exc
    out = np.clip(out, 0.0, 1.0)
    validate_image(out)
    return out


def save_image_u8(path, img: np.ndarray) -> None:
    """Write an image as an 8-bit grayscale PNG (values round(v * 255))."""
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PilImage.fromarray(data, mode="L").save(path)


def save_overlay_u8(path, red: np.ndarray, green: np.ndarray) -> None:
    """Write two images into the R and G channels of a color PNG."""
    if red.shape != green.shape:
        raise ValueError("overlay inputs must have equal dimensions")
    h, w = red.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    rgb[..., 0] = np.round(np.clip(red, 0.0, 1.0) * 255.0)
    rgb[..., 1] = np.round(np.clip(green, 0.0, 1.0) * 255.0)
    PilImage.fromarray(rgb, mode="RGB").save(path)


def write_image_f32(path, img: np.ndarray) -> None:
    """Exact float dump: magic GPOI, version byte, LE u32 w/h, f32 rows."""
    import struct
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"GPOI")
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image_f32(path) -> np.ndarray:
    import struct
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"GPOI":
        raise ValueError(f"'{path}' is not a float image dump (bad magic)")
    w, h = struct.unpack("<II", blob[5:13])
    data = np.frombuffer(blob[13:], dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"float image dump '{path}' is truncated")
    return data.astype(np.float64).reshape(h, w)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication.

    Kernel radius is ceil(3*sigma) and the kernel is renormalized to sum 1,
    so constant images are preserved exactly. ``sigma == 0`` is the identity.
    """
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = correlate1d(img, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def _cell_parts(size: int, coords: np.ndarray):
    """Clamped cell index, in-cell fraction, and in-domain flag for one axis."""
    inside = (coords >= 0.0) & (coords <= size - 1.0)
    c = np.clip(coords, 0.0, float(size - 1))
    i0 = np.floor(c).astype(np.intp)
    if size >= 2:
        i0 = np.minimum(i0, size - 2)
    else:
        i0 = np.zeros_like(i0)
    frac = c - i0
    return i0, frac, inside


def sample_bilinear_many(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear sample of ``img`` at many points.

    Returns ``(values, gx, gy)`` where gx/gy are the bilinear-surface partials
    inside the containing cell (cell chosen by floor, clamped at the top edge)
    and zero in any clamped direction.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("sample coordinates must be finite")
    h, w = img.shape
    x0, fx, in_x = _cell_parts(w, xs)
    y0, fy, in_y = _cell_parts(h, ys)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]

    # Lerp form keeps lattice points and constant images bit-exact.
    dx_top = v01 - v00
    dx_bot = v11 - v10
    top = v00 + fx * dx_top
    bot = v10 + fx * dx_bot
    value = top + fy * (bot - top)
    gx = (dx_top + fy * (dx_bot - dx_top)) * in_x
    gy = ((v10 - v00) + fx * ((v11 - v01) - (v10 - v00))) * in_y
    return value, gx, gy


def sample_bilinear(img: np.ndarray, x: float, y: float):
    """Scalar convenience wrapper around :func:`sample_bilinear_many`."""
    v, gx, gy = sample_bilinear_many(img, np.array([x]), np.array([y]))
    return float(v[0]), float(gx[0]), float(gy[0])


def resize_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resample with the half-pixel-aligned coordinate mapping.

    Destination pixel centers map to source coordinates
    ``src = (dst + 0.5) * (src_size / dst_size) - 0.5``.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"resize target must be >= 1x1, got {new_w}x{new_h}")
    h, w = img.shape
    xs = (np.arange(new_w, dtype=np.float64) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h, dtype=np.float64) + 0.5) * (h / new_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    values, _, _ = sample_bilinear_many(img, gx.ravel(), gy.ravel())
    return np.clip(values.reshape(new_h, new_w), 0.0, 1.0)
