"""Image representation, range conventions and PNG IO.

Two representations are used throughout the package:

* an *image buffer* is a float64 numpy array of shape ``(H, W, C)`` with
  ``C`` in ``{1, 3}`` and intensities in ``[0, 1]``;
* a *model tensor* is a torch tensor of shape ``(C, H, W)`` (or batched
  ``(N, C, H, W)``) with intensities in ``[-1, 1]``, which is what the
  networks consume and produce.
"""

from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np
import torch

_RANGE_TOL = 1e-12


class RangeError(ValueError):
    """Raised when intensities fall outside the expected interval."""


class ImageIOError(OSError):
    """Raised when a PNG cannot be read or written."""


def check_image(img, *, name="image", allow_out_of_range=False):
    """Validate an image buffer and return it as a float64 ``(H, W, C)`` array.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ValueError(f"{name} must be non-empty, got {arr.shape}")
    if c not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(arr)):
        raise RangeError(f"{name} contains non-finite values")
    if not allow_out_of_range:
        lo, hi = arr.min(), arr.max()
        if lo < -_RANGE_TOL or hi > 1 + _RANGE_TOL:
            raise RangeError(f"{name} intensities must lie in [0, 1], got [{lo}, {hi}]")
    return arr


def to_model_range(img, dtype=torch.float32):
    """Map an ``(H, W, C)`` image in [0, 1] to a ``(C, H, W)`` tensor in [-1, 1]."""
    arr = check_image(img)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return (2.0 * t - 1.0).to(dtype)


def from_model_range(t):
    """Inverse of :func:`to_model_range`, clamping to [0, 1].

    Accepts ``(C, H, W)`` or a batch of one ``(1, C, H, W)``.
    """
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().to(torch.float64).numpy()
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("from_model_range expects a single image, got a batch")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {arr.shape}")
    return np.clip((arr.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


def quantize(img):
    """Round intensities to the 8-bit grid (round half up), returning uint8."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def dequantize(arr):
    """Map integer pixels to [0, 1] according to their bit depth."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    raise ValueError(f"unsupported pixel dtype {arr.dtype}")


def _decode(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ImageIOError(f"{path}: no such file") from None
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    # cv2 happily decodes files that lost their trailing chunk
    if not raw.startswith(b"\x89PNG\r\n\x1a\n") or b"IEND" not in raw[-16:]:
        raise ImageIOError(f"{path}: corrupt or truncated PNG")
    arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageIOError(f"{path}: corrupt or truncated PNG")
    return arr


def read_png(path):
    """Read an 8- or 16-bit PNG as an ``(H, W, C)`` float64 image in [0, 1].

    16-bit files are downconverted to the 8-bit grid (round half up), so the
    result always lies on multiples of 1/255.
    """
    arr = _decode(path)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    c = arr.shape[2]
    if c == 4:
        raise ImageIOError(f"{path}: unsupported channel count 4 (alpha)")
    if c not in (1, 3):
        raise ImageIOError(f"{path}: unsupported channel count {c}")
    if c == 3:
        arr = arr[:, :, ::-1]
    if arr.dtype == np.uint16:
        arr = ((arr.astype(np.uint32) * 255 + 32767) // 65535).astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise ImageIOError(f"{path}: unsupported bit depth {arr.dtype}")
    return dequantize(np.ascontiguousarray(arr))


def read_png16(path):
    """Read a single-channel 16-bit PNG as float64 in [0, 1] without downconversion."""
    arr = _decode(path)
    if arr.ndim != 2 or arr.dtype != np.uint16:
        raise ImageIOError(f"{path}: expected a single-channel 16-bit PNG")
    return dequantize(arr)


def _encode(arr, path):
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(f"{path}: parent directory does not exist")
    ok, buf = cv2.imencode(".png", arr)
    if not ok:
        raise ImageIOError(f"{path}: PNG encoding failed")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.tobytes())
    os.replace(tmp, path)


def write_png(img, path):
    """Write an image in [0, 1] as an 8-bit PNG (round half up)."""
    arr = quantize(check_image(img))
    if arr.shape[2] == 3:
        arr = arr[:, :, ::-1]
    _encode(np.ascontiguousarray(arr), path)


def write_png16(field, path):
    """Write a 2-D field in [0, 1] as a single-channel 16-bit PNG."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D field, got {arr.shape}")
    _encode(quantize16(arr), path)


def quantize16(field):
    return np.floor(np.clip(field, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)


def to_rgb(img):
    """Broadcast a single-channel image to three channels."""
    img = check_image(img, allow_out_of_range=True)
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img
