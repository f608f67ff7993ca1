"""Scoring of trained generators and the study harnesses built on it.

Reports are tab-separated; curves are additionally drawn as SVG line plots.
Harnesses that train (ablation, lambda and ResBlock sweeps) retrain from
scratch for every point with the same seed and step budget.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imagecore import dequantize, quantize, to_rgb, write_png
from .metrics import format_db, psnr, ssim
from .physics import MAX_NOISE, Blur, Downsample, apply_physics, apply_physics_core, with_noise
from .synth import dataset_task, load_dataset
from .trainer import BASEGAN, TrainConfig, load_generator, read_tsv, restore_image, train

logger = logging.getLogger(__name__)

NOISE_LEVELS = (0.0, 0.025, 0.05, 0.075, 0.10)
LAMBDA_GRID = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
RESBLOCK_GRID = (3, 6, 9, 20, 25, 30, 35, 40, 45, 50)
ABLATION_VARIANTS = (
    ("full", frozenset()),
    ("BaseGAN", BASEGAN),
    ("no_lp", frozenset({"no_lp"})),
    ("no_lg", frozenset({"no_lg"})),
    ("no_lg_tilde", frozenset({"no_lg_tilde"})),
)
SSIM_MODE = "per-channel mean"


class CheckpointMismatch(ValueError):
    pass


@dataclass
class EvalReport:
    """Per-image scores plus their means."""

    rows: list
    meta: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean([r["psnr"] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r["ssim"] for r in self.rows]))

    def to_tsv(self):
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(("id", "psnr", "ssim"))
        for r in self.rows:
            w.writerow((r["id"], format_db(r["psnr"]), repr(float(r["ssim"]))))
        w.writerow(("mean", format_db(self.mean_psnr), repr(self.mean_ssim)))
        return buf.getvalue()

    def write(self, out_dir, name="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.tsv").write_text(self.to_tsv())
        meta = {**self.meta, "mean_psnr": format_db(self.mean_psnr), "mean_ssim": self.mean_ssim, "count": len(self.rows)}
        (out / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _sr_scale(model):
    return model.scale if isinstance(model, Downsample) else None


def evaluate_samples(G, samples, restored_dir=None, meta=None):
    """Restore and score every sample; optionally save the restorations."""
    rows = []
    for s in samples:
        out = restore_image(G, s.degraded, _sr_scale(s.model))
        clean = to_rgb(s.clean)
        rows.append({"id": s.id, "psnr": psnr(out, clean), "ssim": ssim(out, clean)})
        if restored_dir is not None:
            Path(restored_dir).mkdir(parents=True, exist_ok=True)
            write_png(out, Path(restored_dir) / f"{s.id}.png")
    return EvalReport(rows, {"ssim": SSIM_MODE, **(meta or {})})


def physics_residual(G, samples):
    """Mean absolute gap between the re-degraded restoration and the observation."""
    gaps = []
    for s in samples:
        out = restore_image(G, s.degraded, _sr_scale(s.model))
        gaps.append(np.mean(np.abs(apply_physics_core(out, s.model) - to_rgb(s.degraded))))
    return float(np.mean(gaps))


def _load_checked(checkpoint, dataset_dir):
    G, cfg = load_generator(checkpoint)
    task = dataset_task(dataset_dir)
    if cfg.get("task") != task:
        raise CheckpointMismatch(f"checkpoint was trained for {cfg.get('task')!r}, dataset is {task!r}")
    return G, cfg


def evaluate_checkpoint(checkpoint, dataset_dir, out_dir=None, save_images=False):
    G, _ = _load_checked(checkpoint, dataset_dir)
    samples = load_dataset(dataset_dir)
    restored = Path(out_dir) / "restored" if out_dir is not None and save_images else None
    report = evaluate_samples(
        G, samples, restored, {"checkpoint": str(checkpoint), "dataset": str(dataset_dir), "noise_level": "as stored"}
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


# noise robustness -------------------------------------------------------------


def renoise(samples, level):
    """Blur samples re-synthesized at ``level`` with their stored noise seeds."""
    if not 0.0 <= level <= MAX_NOISE:
        raise ValueError(f"noise level must lie in [0, {MAX_NOISE}], got {level}")
    out = []
    for s in samples:
        if not isinstance(s.model, Blur):
            raise ValueError("noise sweeps need a deblurring dataset")
        model = with_noise(s.model, level)
        degraded = dequantize(quantize(apply_physics(s.clean, model, s.noise_seed)))
        out.append(replace(s, degraded=degraded, model=model))
    return out


def noise_sweep_samples(G, samples, levels=NOISE_LEVELS):
    """``[(level, mean psnr, mean ssim), ...]``."""
    for lv in levels:
        if not 0.0 <= lv <= MAX_NOISE:
            raise ValueError(f"noise level must lie in [0, {MAX_NOISE}], got {lv}")
    curve = []
    for lv in levels:
        rep = evaluate_samples(G, renoise(samples, lv))
        curve.append((float(lv), rep.mean_psnr, rep.mean_ssim))
    return curve


def noise_sweep(checkpoint, dataset_dir, levels=NOISE_LEVELS, out_dir=None):
    G, _ = _load_checked(checkpoint, dataset_dir)
    curve = noise_sweep_samples(G, load_dataset(dataset_dir), levels)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "noise_sweep.tsv").write_text(_tsv(("noise_level", "psnr", "ssim"), curve))
        plot_curve([(lv * 100, p) for lv, p, _ in curve], out / "noise_sweep.svg", "noise level (%)", "PSNR (dB)")
    return curve


# convergence ------------------------------------------------------------------


def convergence_curve(run_dir):
    """``[(epoch, psnr), ...]`` from a training run's evaluation log."""
    return [(r["epoch"], r["psnr"]) for r in read_tsv(Path(run_dir) / "eval.tsv")]


def moving_average(values, window):
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(int(window), len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def final_drift(curve, fraction=0.1):
    """Change of the moving average across the last ``fraction`` of the run.

    The window spans that final stretch, so the value compares the mean over
    the closing segment with the mean one segment earlier.
    """
    epochs = np.array([e for e, _ in curve], dtype=np.float64)
    ps = np.array([p for _, p in curve])
    span = fraction * epochs[-1]
    tail = ps[epochs >= epochs[-1] - span]
    before = ps[(epochs >= epochs[-1] - 2 * span) & (epochs < epochs[-1] - span)]
    if len(tail) == 0 or len(before) == 0:
        raise ValueError("curve too short to measure its final drift")
    return float(abs(tail.mean() - before.mean()))


def write_convergence(run_dir, out_dir=None):
    curve = convergence_curve(run_dir)
    out = Path(out_dir or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    plot_curve(curve, out / "convergence.svg", "epoch", "held-out PSNR (dB)")
    return curve


# training harnesses -----------------------------------------------------------


def train_and_score(cfg, out_dir, samples, eval_samples):
    trainer = train(cfg, out_dir, samples, eval_samples)
    G = trainer.G
    rep = evaluate_samples(G, eval_samples)
    return {"psnr": rep.mean_psnr, "ssim": rep.mean_ssim, "residual": physics_residual(G, eval_samples)}


def ablation_suite(base_cfg, samples, eval_samples, out_dir, variants=ABLATION_VARIANTS):
    """Train every variant from one seed at a matched budget, one row per variant."""
    out = Path(out_dir)
    rows = []
    for name, ablation in variants:
        cfg = TrainConfig.from_dict({**base_cfg.to_dict(), "ablation": sorted(ablation)})
        scores = train_and_score(cfg, out / name, samples, eval_samples)
        rows.append({"variant": name, **scores})
        logger.info("ablation %s: %.2f dB", name, scores["psnr"])
    (out / "ablation.tsv").write_text(_tsv(("variant", "psnr", "ssim"), [(r["variant"], r["psnr"], r["ssim"]) for r in rows]))
    (out / "ablation_residual.tsv").write_text(_tsv(("variant", "residual"), [(r["variant"], r["residual"]) for r in rows]))
    return rows


def _sweep(base_cfg, key, grid, samples, eval_samples, out_dir, label):
    out = Path(out_dir)
    rows = []
    for v in grid:
        cfg = TrainConfig.from_dict({**base_cfg.to_dict(), key: v})
        scores = train_and_score(cfg, out / f"{key}_{v}", samples, eval_samples)
        rows.append({key: v, **scores})
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow((label, *[r[key] for r in rows]))
    w.writerow(("PSNR", *[format_db(r["psnr"]) for r in rows]))
    w.writerow(("SSIM", *[repr(r["ssim"]) for r in rows]))
    (out / f"sweep_{key}.tsv").write_text(buf.getvalue())
    return rows


def lambda_sweep(base_cfg, samples, eval_samples, out_dir, grid=LAMBDA_GRID):
    return _sweep(base_cfg, "lam", grid, samples, eval_samples, out_dir, "lambda")


def resblock_sweep(base_cfg, samples, eval_samples, out_dir, grid=RESBLOCK_GRID):
    return _sweep(base_cfg, "n_resblocks", grid, samples, eval_samples, out_dir, "ResBlock (#)")


# output helpers ---------------------------------------------------------------


def _cell(v):
    if isinstance(v, float):
        return format_db(v) if math.isinf(v) else repr(v)
    return str(v)


def _tsv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def plot_curve(points, path, xlabel, ylabel):
    """Simple line plot written as a reproducible SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    with matplotlib.rc_context({"svg.hashsalt": "physgan", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(xs, ys, marker="o", markersize=3)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)
