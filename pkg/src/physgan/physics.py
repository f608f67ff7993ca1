"""Forward degradation operators.

Every operator accepts either an image buffer (numpy ``(H, W, C)`` in [0, 1])
or a model tensor (torch ``(C, H, W)`` / ``(N, C, H, W)`` in [-1, 1]) and
returns the same kind. The torch path is differentiable and is what the
physics-consistency branch of training uses; the numpy path is used for data
synthesis and is evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .imagecore import check_image

MAX_NOISE = 0.10
SR_SCALES = (2, 3, 4)
BICUBIC_A = -0.5


class InvalidKernelError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Nonnegative odd-sized square kernel normalized to unit mass."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidKernelError(f"kernel must be square, got {w.shape}")
        if w.shape[0] % 2 == 0:
            raise InvalidKernelError(f"kernel size must be odd, got {w.shape[0]}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidKernelError("kernel weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InvalidKernelError(f"kernel must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size=1):
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)


@dataclass(frozen=True, eq=False)
class HazeParams:
    """Transmission map ``t`` in (0, 1] and per-channel airlight ``A``."""

    transmission: np.ndarray
    airlight: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.transmission, dtype=np.float64)
        if t.ndim != 2:
            raise ShapeError(f"transmission must be 2-D, got {t.shape}")
        if np.any(t <= 0) or np.any(t > 1):
            raise ValueError("transmission must lie in (0, 1]")
        a = np.atleast_1d(np.asarray(self.airlight, dtype=np.float64))
        if a.ndim != 1 or np.any(a < 0) or np.any(a > 1):
            raise ValueError("airlight must be per-channel values in [0, 1]")
        object.__setattr__(self, "transmission", t)
        object.__setattr__(self, "airlight", a)


@dataclass(frozen=True, eq=False)
class RainLayer:
    streaks: np.ndarray

    def __post_init__(self):
        s = check_image(self.streaks, name="rain layer")
        object.__setattr__(self, "streaks", s)


@dataclass(frozen=True, eq=False)
class Blur:
    kernel: BlurKernel
    noise_level: float = 0.0

    def __post_init__(self):
        _check_noise_level(self.noise_level)


@dataclass(frozen=True, eq=False)
class Haze:
    params: HazeParams


@dataclass(frozen=True)
class Downsample:
    scale: int

    def __post_init__(self):
        if self.scale not in SR_SCALES:
            raise ValueError(f"scale must be one of {SR_SCALES}, got {self.scale}")


@dataclass(frozen=True, eq=False)
class Rain:
    layer: RainLayer


PhysicsModel = Blur | Haze | Downsample | Rain


def _check_noise_level(level):
    if not 0.0 <= level <= MAX_NOISE:
        raise ValueError(f"noise level must lie in [0, {MAX_NOISE}], got {level}")


# batch plumbing -------------------------------------------------------------


def _to_batch(x):
    """Return ``(tensor NCHW, is_image_buffer, had_batch_dim)``."""
    if isinstance(x, torch.Tensor):
        if x.ndim == 3:
            return x.unsqueeze(0), False, False
        if x.ndim == 4:
            return x, False, True
        raise ShapeError(f"model tensor must be (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    arr = check_image(x, allow_out_of_range=True)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None], True, False


def _from_batch(t, is_buffer, batched):
    if is_buffer:
        return np.clip(t[0].numpy().transpose(1, 2, 0), 0.0, 1.0)
    return t if batched else t[0]


# blur -----------------------------------------------------------------------


def _blur_nchw(t, weights):
    k = weights.shape[0]
    h, w = t.shape[-2:]
    if h < k or w < k:
        raise ShapeError(f"image {h}x{w} smaller than {k}x{k} kernel")
    c = t.shape[1]
    # conv2d is correlation; flip to get convolution
    kt = torch.tensor(weights[::-1, ::-1].copy(), dtype=t.dtype, device=t.device)
    kt = kt.expand(c, 1, k, k)
    r = k // 2
    padded = F.pad(t, (r, r, r, r), mode="replicate") if r else t
    return F.conv2d(padded, kt, groups=c)


def apply_blur(x, kernel):
    """Convolve every channel with ``kernel`` using replicate padding."""
    if not isinstance(kernel, BlurKernel):
        kernel = BlurKernel(kernel)
    t, is_buffer, batched = _to_batch(x)
    return _from_batch(_blur_nchw(t, kernel.weights), is_buffer, batched)


# haze -----------------------------------------------------------------------


def apply_haze(x, params):
    """Composite with airlight: ``x * t + A * (1 - t)`` in [0, 1] intensities."""
    t, is_buffer, batched = _to_batch(x)
    tr = params.transmission
    if tr.shape != tuple(t.shape[-2:]):
        raise ShapeError(f"transmission {tr.shape} does not match image {tuple(t.shape[-2:])}")
    a = params.airlight
    c = t.shape[1]
    if a.size == 1:
        a = np.repeat(a, c)
    if a.size != c:
        raise ShapeError(f"airlight has {a.size} channels, image has {c}")
    trt = torch.as_tensor(tr, dtype=t.dtype, device=t.device)
    at = torch.as_tensor(a, dtype=t.dtype, device=t.device).view(1, c, 1, 1)
    if is_buffer:
        out = t * trt + at * (1 - trt)
    else:
        # same composite after the affine change of range
        out = t * trt + (2 * at - 1) * (1 - trt)
    return _from_batch(out, is_buffer, batched)


# bicubic resampling ---------------------------------------------------------


def cubic_weight(d, a=BICUBIC_A):
    """Keys cubic convolution kernel evaluated at offset ``d``."""
    d = np.abs(np.asarray(d, dtype=np.float64))
    d2, d3 = d * d, d * d * d
    inner = (a + 2) * d3 - (a + 3) * d2 + 1
    outer = a * d3 - 5 * a * d2 + 8 * a * d - 4 * a
    return np.where(d <= 1, inner, np.where(d < 2, outer, 0.0))


@lru_cache(maxsize=64)
def _resample_matrix(n_in, n_out, scale, down):
    """Dense 1-D resampling matrix of shape (n_out, n_in).

    Downsampling stretches the cubic kernel by ``scale`` (antialiasing);
    border taps are folded onto the edge pixel.
    """
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        if down:
            centre = (i + 0.5) * scale - 0.5
            reach = 2 * scale
        else:
            centre = (i + 0.5) / scale - 0.5
            reach = 2
        lo = int(np.floor(centre - reach))
        hi = int(np.ceil(centre + reach))
        taps = np.arange(lo, hi + 1)
        offs = (centre - taps) / scale if down else centre - taps
        w = cubic_weight(offs)
        w = w / w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    m.setflags(write=False)
    return m


def _resample(t, scale, down):
    h, w = t.shape[-2:]
    if down:
        oh, ow = h // scale, w // scale
    else:
        oh, ow = h * scale, w * scale
    mh = torch.tensor(_resample_matrix(h, oh, scale, down), dtype=t.dtype, device=t.device)
    mw = torch.tensor(_resample_matrix(w, ow, scale, down), dtype=t.dtype, device=t.device)
    return torch.einsum("oh,nchw,pw->ncop", mh, t, mw)


def apply_downsample(x, scale):
    """Bicubic (a = -0.5) antialiased downsampling by an integer factor."""
    if isinstance(scale, Downsample):
        scale = scale.scale
    Downsample(scale)
    t, is_buffer, batched = _to_batch(x)
    h, w = t.shape[-2:]
    if h % scale or w % scale:
        raise ShapeError(f"image {h}x{w} not divisible by scale {scale}")
    return _from_batch(_resample(t, scale, down=True), is_buffer, batched)


def upsample_bicubic(x, scale):
    """Bicubic (a = -0.5) interpolation up by an integer factor.

    Used to lift low-resolution observations to the generator's working size.
    """
    t, is_buffer, batched = _to_batch(x)
    return _from_batch(_resample(t, scale, down=False), is_buffer, batched)


# rain -----------------------------------------------------------------------


def apply_rain(x, layer):
    """Additive streak layer clamped to the valid range."""
    t, is_buffer, batched = _to_batch(x)
    s = layer.streaks
    if s.shape[:2] != tuple(t.shape[-2:]):
        raise ShapeError(f"rain layer {s.shape[:2]} does not match image {tuple(t.shape[-2:])}")
    c = t.shape[1]
    if s.shape[2] != c:
        if s.shape[2] != 1:
            raise ShapeError(f"rain layer has {s.shape[2]} channels, image has {c}")
        s = np.repeat(s, c, axis=2)
    st = torch.as_tensor(np.ascontiguousarray(s.transpose(2, 0, 1)), dtype=t.dtype, device=t.device)[None]
    if is_buffer:
        out = torch.clamp(t + st, 0.0, 1.0)
    else:
        out = torch.clamp(t + 2 * st, -1.0, 1.0)
    return _from_batch(out, is_buffer, batched)


# noise ----------------------------------------------------------------------


def add_noise(y, level, seed):
    """Add i.i.d. Gaussian noise with standard deviation ``level`` and clamp.

    Only defined on image buffers; ``level`` is a fraction of the [0, 1] range.
    """
    _check_noise_level(level)
    y = check_image(y, allow_out_of_range=True)
    if level == 0:
        return y.copy()
    rng = np.random.default_rng(seed)
    return np.clip(y + rng.normal(0.0, level, size=y.shape), 0.0, 1.0)


# dispatch -------------------------------------------------------------------


def apply_physics_core(x, model):
    """Noise-free forward operator for ``model``."""
    if isinstance(model, Blur):
        return apply_blur(x, model.kernel)
    if isinstance(model, Haze):
        return apply_haze(x, model.params)
    if isinstance(model, Downsample):
        return apply_downsample(x, model.scale)
    if isinstance(model, Rain):
        return apply_rain(x, model.layer)
    raise TypeError(f"unknown physics model {type(model).__name__}")


def apply_physics(x, model, noise_seed=None):
    """Full forward model, including sensor noise for blur models."""
    out = apply_physics_core(x, model)
    if isinstance(model, Blur) and model.noise_level > 0:
        if isinstance(out, torch.Tensor):
            raise TypeError("noise is only synthesized on image buffers")
        if noise_seed is None:
            raise ValueError("a noise seed is required for a noisy blur model")
        out = add_noise(out, model.noise_level, noise_seed)
    return out


def with_noise(model, level):
    """Copy of a blur model with a different noise level."""
    if not isinstance(model, Blur):
        raise TypeError("only blur models carry noise")
    return Blur(model.kernel, level)


# symmetries -----------------------------------------------------------------


def dihedral(a, g):
    """Apply element ``g`` (0..7) of the square's symmetry group to the first two axes.

    Bit 0 flips columns, bit 1 flips rows, bit 2 transposes (applied last).
    """
    a = np.asarray(a)
    if g & 1:
        a = a[:, ::-1]
    if g & 2:
        a = a[::-1]
    if g & 4:
        a = np.swapaxes(a, 0, 1)
    return np.ascontiguousarray(a)


def dihedral_model(model, g):
    """Forward model acting on transformed images: ``A_g(T_g x) = T_g(A x)``."""
    if isinstance(model, Blur):
        return Blur(BlurKernel(dihedral(model.kernel.weights, g)), model.noise_level)
    if isinstance(model, Haze):
        p = model.params
        return Haze(HazeParams(dihedral(p.transmission, g), p.airlight))
    if isinstance(model, Rain):
        return Rain(RainLayer(dihedral(model.layer.streaks, g)))
    if isinstance(model, Downsample):
        # separable and mirror-symmetric, so it commutes with every element
        return model
    raise TypeError(f"unknown physics model {type(model).__name__}")
