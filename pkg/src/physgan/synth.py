"""Procedural degradation parameters and paired dataset generation.

A dataset directory looks like::

    <root>/clean/<id>.png
    <root>/degraded/<id>.png
    <root>/models/<id>.txt        (plus <id>_t.png for haze, <id>.png for rain)
    <root>/manifest.tsv
    <root>/synth_config.json

Everything is a pure function of :class:`SynthConfig`, so rebuilding with the
same configuration produces a byte-identical tree.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .imagecore import (
    ImageIOError,
    check_image,
    dequantize,
    quantize,
    quantize16,
    read_png,
    read_png16,
    write_png,
    write_png16,
)
from .physics import (
    Blur,
    BlurKernel,
    Downsample,
    Haze,
    HazeParams,
    Rain,
    RainLayer,
    apply_physics,
)

logger = logging.getLogger(__name__)

TASKS = ("deblur", "dehaze", "sr", "derain")
STYLES = ("glyphs", "gradients", "shapes")
HEADING_SIGMA = 0.3
GLYPH_PAPER = 0.9
GLYPH_INK = 0.1
MANIFEST_COLUMNS = ("id", "task", "seed", "model_file", "noise_seed")


class DatasetError(RuntimeError):
    pass


def derive_seed(*keys):
    """Deterministic 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# kernels --------------------------------------------------------------------


def motion_trajectory(seed, size, steps):
    """Random-walk trajectory used by :func:`gen_motion_kernel`.

    Returns an array of ``steps + 1`` points in kernel pixel coordinates
    (row, col). Walks longer than the grid are shrunk uniformly to fit.
    """
    rng = np.random.default_rng(seed)
    heading = rng.uniform(0.0, 2 * np.pi)
    pts = np.zeros((steps + 1, 2))
    for i in range(1, steps + 1):
        heading += rng.normal(0.0, HEADING_SIGMA)
        pts[i] = pts[i - 1] + (np.sin(heading), np.cos(heading))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = (hi - lo).max()
    room = size - 1.5
    if extent > room:
        pts = pts * (room / extent)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = (size - 1) / 2.0
    return pts - (lo + hi) / 2.0 + centre


def densify(pts, spacing=0.25):
    """Resample a polyline so consecutive points are at most ``spacing`` apart."""
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        s = np.arange(1, n + 1)[:, None] / n
        out.append(a + s * (b - a))
    return np.concatenate(out)


def _splat(grid, pts, weight=1.0):
    h, w = grid.shape
    for r, c in pts:
        r0, c0 = int(np.floor(r)), int(np.floor(c))
        fr, fc = r - r0, c - c0
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dc, wc in ((0, 1 - fc), (1, fc)):
                rr, cc = r0 + dr, c0 + dc
                if 0 <= rr < h and 0 <= cc < w:
                    grid[rr, cc] += weight * wr * wc


def gen_motion_kernel(seed, size, steps):
    """Motion blur kernel from a bilinearly splatted random walk."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return BlurKernel.delta(size)
    grid = np.zeros((size, size))
    _splat(grid, densify(motion_trajectory(seed, size, steps)))
    return BlurKernel(grid / grid.sum())


def gen_defocus_kernel(radius, size, supersample=8):
    """Anti-aliased disc kernel; each weight is the supersampled pixel/disc overlap."""
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not 0 < radius <= (size - 1) / 2:
        raise ValueError(f"radius {radius} does not fit a {size}x{size} grid")
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    coords = np.arange(size) - size // 2
    fine = (coords[:, None] + offs[None, :]).ravel()
    inside = (fine[:, None] ** 2 + fine[None, :] ** 2) <= radius * radius
    weights = inside.reshape(size, supersample, size, supersample).sum(axis=(1, 3)).astype(np.float64)
    if weights.sum() == 0:
        return BlurKernel.delta(size)
    return BlurKernel(weights / weights.sum())


# haze -----------------------------------------------------------------------


def depth_to_transmission(depth, beta):
    """Transmission ``exp(-beta * depth)``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise ValueError("depth must be nonnegative")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.exp(-beta * depth)


def gen_depth(seed, size, max_depth=3.0):
    """Smooth synthetic depth: a receding ground plane plus low-frequency bumps."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    tilt = rng.uniform(-0.3, 0.3)
    depth = (1.0 - yy) + tilt * (xx - 0.5)
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.1, 0.3)
        depth += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    depth -= depth.min()
    return max_depth * depth / max(depth.max(), 1e-12)


# rain -----------------------------------------------------------------------


def _segment_coverage(shape, p0, p1, width):
    """Anti-aliased coverage of a segment from its pixel-centre distance."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    s = np.clip(((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / denom, 0.0, 1.0)
    dist = np.hypot(rr - (p0[0] + s * d[0]), cc - (p0[1] + s * d[1]))
    return np.clip(0.5 + width / 2 - dist, 0.0, 1.0)


def gen_rain_streaks(seed, size, density, angle_range=(-15.0, 15.0), length_range=(4.0, 10.0), width=0.6):
    """Sparse layer of bright line segments.

    ``angle_range`` is in degrees from vertical. The number of streaks is
    ``density * size**2 / mean_length`` so the covered fraction tracks
    ``density``.
    """
    if not 0 < density <= 0.2:
        raise ValueError(f"streak density must lie in (0, 0.2], got {density}")
    rng = np.random.default_rng(seed)
    mean_len = 0.5 * (length_range[0] + length_range[1])
    n = int(round(density * size * size / mean_len))
    layer = np.zeros((size, size))
    for _ in range(n):
        centre = rng.uniform(0, size, 2)
        theta = np.deg2rad(rng.uniform(*angle_range))
        length = rng.uniform(*length_range)
        intensity = rng.uniform(0.2, 0.8)
        half = 0.5 * length * np.array([np.cos(theta), np.sin(theta)])
        cov = _segment_coverage(layer.shape, centre - half, centre + half, width)
        layer = np.maximum(layer, intensity * cov)
    return RainLayer(layer[:, :, None])


# clean images ---------------------------------------------------------------


def _glyphs(rng, size):
    # fixed paper/ink levels keep targets off the tanh asymptotes
    bg, ink = GLYPH_PAPER, GLYPH_INK
    cell = 10
    coverage = np.zeros((size, size))
    margin = 1.5
    offset = (size % cell) // 2
    for top in range(offset, size - cell + 1, cell):
        for left in range(offset, size - cell + 1, cell):
            if rng.uniform() < 0.1:
                continue
            for _ in range(rng.integers(2, 4)):
                n = rng.integers(2, 4)
                pts = rng.uniform(margin, cell - 1 - margin, (n, 2)) + (top, left)
                width = rng.uniform(1.8, 3.0)
                for a, b in zip(pts[:-1], pts[1:]):
                    coverage = np.maximum(coverage, _segment_coverage(coverage.shape, a, b, width))
    img = bg + (ink - bg) * coverage
    return np.repeat(img[:, :, None], 3, axis=2)


def _gradients(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b = rng.uniform(-1, 1, 2)
        cy, cx = rng.uniform(0, 1, 2)
        f = rng.uniform(1.0, 4.0)
        ch = a * xx + b * yy + 0.5 * np.hypot(yy - cy, xx - cx) + 0.2 * np.sin(2 * np.pi * f * (xx + yy))
        ch -= ch.min()
        img[:, :, c] = ch / max(ch.max(), 1e-12)
    return img


def _shapes(rng, size, ss=4):
    fine = size * ss
    yy, xx = (np.mgrid[0:fine, 0:fine] + 0.5) / ss
    img = np.empty((fine, fine, 3))
    img[:] = rng.uniform(0, 1, 3)
    for _ in range(rng.integers(4, 9)):
        colour = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, size, 2)
        if rng.uniform() < 0.5:
            r = rng.uniform(size / 12, size / 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh, hw = rng.uniform(size / 12, size / 4, 2)
            phi = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
            v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
            mask = (np.abs(u) <= hw) & (np.abs(v) <= hh)
        img[mask] = colour
    return img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))


def gen_clean_image(seed, size, style="glyphs"):
    """Procedural RGB test image with sharp structure."""
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    if style == "glyphs":
        img = _glyphs(rng, size)
    elif style == "gradients":
        img = _gradients(rng, size)
    elif style == "shapes":
        img = _shapes(rng, size)
    else:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    return np.clip(img, 0.0, 1.0)


# configuration --------------------------------------------------------------


@dataclass
class SynthConfig:
    task: str = "deblur"
    count: int = 10
    image_size: int = 32
    seed: int = 0
    style: str = "glyphs"
    kernel_size_range: tuple = (5, 11)
    walk_steps_range: tuple = (3, 10)
    disc_radius_range: tuple = (1.0, 2.5)
    defocus_fraction: float = 0.5
    beta_range: tuple = (0.4, 1.2)
    airlight_range: tuple = (0.7, 1.0)
    noise_max: float = 0.10
    streak_density: float = 0.05
    sr_scale: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        for name in ("kernel_size_range", "walk_steps_range", "disc_radius_range", "beta_range", "airlight_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy min <= max, got {(lo, hi)}")
        if not 0 <= self.noise_max <= 0.10:
            raise ValueError("noise_max must lie in [0, 0.10]")
        if self.task == "sr" and self.image_size % self.sr_scale:
            raise ValueError("image_size must be divisible by sr_scale")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass(eq=False)
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray
    model: object
    id: str
    seed: int = 0
    noise_seed: int = 0


# model serialization --------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def serialize_model(model):
    """Return ``{suffix: bytes}`` for the model's on-disk files under models/."""
    if isinstance(model, Blur):
        rows = [" ".join(_fmt(v) for v in row) for row in model.kernel.weights]
        text = f"# noise_level {_fmt(model.noise_level)}\n" + "\n".join(rows) + "\n"
        return {".txt": text.encode()}
    if isinstance(model, Haze):
        a = model.params.airlight
        beta = getattr(model.params, "beta", float("nan"))
        line = " ".join(_fmt(v) for v in a) + " " + _fmt(beta) + "\n"
        return {".txt": line.encode(), "_t.png": quantize16(model.params.transmission)}
    if isinstance(model, Downsample):
        return {".txt": f"scale {model.scale}\n".encode()}
    if isinstance(model, Rain):
        return {".png": quantize(model.layer.streaks)}
    raise TypeError(f"unknown physics model {type(model).__name__}")


def _parse_kernel(text):
    level = 0.0
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# noise_level"):
            level = float(line.split()[2])
        elif line and not line.startswith("#"):
            rows.append([float(v) for v in line.split()])
    return Blur(BlurKernel(np.array(rows)), level)


def _storage_roundtrip(model):
    """The model exactly as it will be recovered from disk."""
    if isinstance(model, Haze):
        t = dequantize(quantize16(model.params.transmission))
        return Haze(_HazeParams(np.maximum(t, 1 / 65535), model.params.airlight, beta=model.params.beta))
    if isinstance(model, Rain):
        return Rain(RainLayer(dequantize(quantize(model.layer.streaks))))
    if isinstance(model, Blur):
        return _parse_kernel(serialize_model(model)[".txt"].decode())
    return model


@dataclass(frozen=True, eq=False)
class _HazeParams(HazeParams):
    beta: float = float("nan")


def write_model(model, models_dir, sid):
    files = serialize_model(model)
    for suffix, payload in files.items():
        path = Path(models_dir) / f"{sid}{suffix}"
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        elif payload.dtype == np.uint16:
            write_png16(dequantize(payload), path)
        else:
            write_png(dequantize(payload), path)
    return f"{sid}{next(iter(files))}"


def read_model(task, models_dir, model_file):
    path = Path(models_dir) / model_file
    sid = path.name.split(".")[0]
    try:
        if task == "deblur":
            return _parse_kernel(path.read_text())
        if task == "dehaze":
            vals = [float(v) for v in path.read_text().split()]
            t = read_png16(path.with_name(f"{sid}_t.png"))
            return Haze(_HazeParams(np.maximum(t, 1 / 65535), np.array(vals[:-1]), beta=vals[-1]))
        if task == "sr":
            key, value = path.read_text().split()
            if key != "scale":
                raise DatasetError(f"{path}: expected 'scale N'")
            return Downsample(int(value))
        if task == "derain":
            return Rain(RainLayer(read_png(path)))
    except FileNotFoundError:
        raise DatasetError(f"{path}: model file missing") from None
    raise DatasetError(f"unknown task {task!r}")


# sample generation ----------------------------------------------------------


def _odd_in(rng, lo, hi):
    choices = [k for k in range(int(lo), int(hi) + 1) if k % 2 == 1 and k >= 3]
    if not choices:
        raise ValueError(f"no odd kernel size >= 3 in {(lo, hi)}")
    return int(rng.choice(choices))


def sample_model(cfg, rng, seed):
    size = cfg.image_size
    if cfg.task == "deblur":
        ksize = _odd_in(rng, *cfg.kernel_size_range)
        level = float(rng.uniform(0.0, cfg.noise_max))
        if rng.uniform() < cfg.defocus_fraction:
            radius = float(rng.uniform(*cfg.disc_radius_range))
            kernel = gen_defocus_kernel(min(radius, (ksize - 1) / 2), ksize)
        else:
            steps = int(rng.integers(cfg.walk_steps_range[0], cfg.walk_steps_range[1] + 1))
            kernel = gen_motion_kernel(derive_seed(seed, 1), ksize, steps)
        return Blur(kernel, level)
    if cfg.task == "dehaze":
        beta = float(rng.uniform(*cfg.beta_range))
        airlight = np.full(3, rng.uniform(*cfg.airlight_range))
        t = depth_to_transmission(gen_depth(derive_seed(seed, 2), size), beta)
        return Haze(_HazeParams(t, airlight, beta=beta))
    if cfg.task == "sr":
        return Downsample(cfg.sr_scale)
    return Rain(gen_rain_streaks(derive_seed(seed, 3), size, cfg.streak_density))


def make_sample(cfg, index):
    """Generate sample ``index`` of a dataset; the model is storage-exact."""
    seed = derive_seed(cfg.seed, index, 0)
    noise_seed = derive_seed(cfg.seed, index, 1)
    rng = np.random.default_rng(seed)
    clean = dequantize(quantize(gen_clean_image(derive_seed(seed, 0), cfg.image_size, cfg.style)))
    model = _storage_roundtrip(sample_model(cfg, rng, seed))
    degraded = apply_physics(clean, model, noise_seed)
    return PairedSample(clean, degraded, model, f"{index:05d}", seed, noise_seed)


def replay(sample):
    """Re-apply the stored model to the clean image (8-bit quantized)."""
    return quantize(apply_physics(sample.clean, sample.model, sample.noise_seed))


def verify_sample(sample):
    return np.array_equal(replay(sample), quantize(sample.degraded))


def _reparse(cfg, sample):
    """Round-trip the sample's model through its serialized form in memory."""
    files = serialize_model(sample.model)
    if cfg.task == "deblur":
        return _parse_kernel(files[".txt"].decode())
    if cfg.task == "dehaze":
        vals = [float(v) for v in files[".txt"].decode().split()]
        t = dequantize(files["_t.png"])
        return Haze(_HazeParams(np.maximum(t, 1 / 65535), np.array(vals[:-1]), beta=vals[-1]))
    if cfg.task == "derain":
        return Rain(RainLayer(dequantize(files[".png"])))
    return Downsample(int(files[".txt"].decode().split()[1]))


def build_dataset(cfg, out_dir):
    """Generate and write ``cfg.count`` verified samples; return manifest rows."""
    root = Path(out_dir)
    try:
        for sub in ("clean", "degraded", "models"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"{root}: cannot create dataset directory ({exc})") from exc
    rows = []
    for i in range(cfg.count):
        sample = make_sample(cfg, i)
        reloaded = PairedSample(sample.clean, sample.degraded, _reparse(cfg, sample), sample.id, sample.seed, sample.noise_seed)
        if not verify_sample(reloaded):
            raise DatasetError(f"sample {sample.id}: replay of stored model does not reproduce degraded image")
        write_png(sample.clean, root / "clean" / f"{sample.id}.png")
        write_png(sample.degraded, root / "degraded" / f"{sample.id}.png")
        model_file = write_model(sample.model, root / "models", sample.id)
        rows.append(dict(id=sample.id, task=cfg.task, seed=sample.seed, model_file=model_file, noise_seed=sample.noise_seed))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, MANIFEST_COLUMNS, delimiter="\t", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (root / "manifest.tsv").write_text(buf.getvalue())
    (root / "synth_config.json").write_text(cfg.to_json())
    logger.info("wrote %d %s samples to %s", len(rows), cfg.task, root)
    return rows


def read_manifest(root):
    path = Path(root) / "manifest.tsv"
    if not path.is_file():
        raise DatasetError(f"{root}: dataset not found (no manifest.tsv)")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if rows and set(MANIFEST_COLUMNS) - set(rows[0]):
        raise DatasetError(f"{path}: missing columns {set(MANIFEST_COLUMNS) - set(rows[0])}")
    return rows


def load_dataset(root):
    """Read every sample listed in a dataset's manifest."""
    root = Path(root)
    samples = []
    for row in read_manifest(root):
        sid = row["id"]
        try:
            clean = read_png(root / "clean" / f"{sid}.png")
            degraded = read_png(root / "degraded" / f"{sid}.png")
        except ImageIOError as exc:
            raise DatasetError(str(exc)) from exc
        model = read_model(row["task"], root / "models", row["model_file"])
        samples.append(PairedSample(clean, degraded, model, sid, int(row["seed"]), int(row["noise_seed"])))
    return samples


def dataset_task(root):
    rows = read_manifest(root)
    tasks = {r["task"] for r in rows}
    if len(tasks) != 1:
        raise DatasetError(f"{root}: expected a single task, found {sorted(tasks)}")
    return tasks.pop()


def load_synth_config(root):
    path = Path(root) / "synth_config.json"
    if not path.is_file():
        raise DatasetError(f"{root}: missing synth_config.json")
    return SynthConfig.from_json(path.read_text())

