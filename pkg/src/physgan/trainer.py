"""Joint optimization of the generator and the two discriminators.

One training step restores the observation, pushes the estimate back through
the known forward model, and updates the generator against both critics and
the three L1 terms before updating each critic once.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import nets
from .imagecore import from_model_range, to_model_range, to_rgb
from .losses import (
    DEFAULT_LAMBDA,
    LossReport,
    as_float,
    loss_pixel_consistency,
    loss_pixel_ground_truth,
    loss_regenerated_ground_truth,
    lsgan_d_loss,
    lsgan_g_loss,
    total_generator_objective,
)
from .metrics import format_db, psnr, ssim
from .physics import Downsample, apply_physics_core, dihedral, dihedral_model, upsample_bicubic
from .synth import DatasetError, dataset_task, derive_seed, load_dataset

logger = logging.getLogger(__name__)

ABLATIONS = ("no_dh", "no_lp", "no_lg", "no_lg_tilde")
BASEGAN = frozenset({"no_dh", "no_lp", "no_lg_tilde"})
STEP_COLUMNS = ("step", "epoch", "lr", "l_p", "l_g", "l_g_tilde", "adv_g", "adv_dg", "adv_dh", "total_g")
EVAL_COLUMNS = ("step", "epoch", "psnr", "ssim")


class TrainingDiverged(RuntimeError):
    pass


def substream_seed(seed, name, *extra):
    """Named sub-stream of a master seed (data, init, training, noise, ...)."""
    return derive_seed(seed, zlib.crc32(name.encode()), *extra)


@dataclass
class TrainConfig:
    task: str = "deblur"
    dataset_dir: str | None = None
    eval_dataset_dir: str | None = None
    epochs: int = 200
    lr_initial: float = 2e-4
    decay_start_epoch: int = 100
    batch_size: int = 1
    lam: float = DEFAULT_LAMBDA
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    history_capacity: int = 50
    update_ratio: int = 1
    seed: int = 0
    width_scale: float = 1.0
    n_resblocks: int = 9
    ablation: frozenset = field(default_factory=frozenset)
    checkpoint_every: int = 10
    eval_every: int = 1
    sr_scale: int = 2
    augment: bool = False

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}; expected a subset of {ABLATIONS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.history_capacity < 1:
            raise ValueError("history_capacity must be >= 1")
        if self.batch_size < 1 or self.update_ratio < 1:
            raise ValueError("batch_size and update_ratio must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")

    def to_dict(self):
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def physics_branch(self):
        return not {"no_dh", "no_lp", "no_lg_tilde"} <= self.ablation


def lr_schedule(epoch, cfg):
    """Constant, then linear decay reaching zero at twice the decay start."""
    d = cfg.decay_start_epoch
    if epoch < d:
        return cfg.lr_initial
    if d <= 0:
        return 0.0
    return cfg.lr_initial * max(0.0, 1.0 - (epoch - d) / d)


class HistoryBuffer:
    """Pool of past generator outputs shown to a discriminator."""

    def __init__(self, capacity, rng):
        self.capacity = capacity
        self.rng = rng
        self.stored = []

    def query(self, fresh):
        fresh = fresh.detach()
        if len(self.stored) < self.capacity:
            self.stored.append(fresh.clone())
            return fresh
        if self.rng.uniform() < 0.5:
            return fresh
        idx = int(self.rng.integers(len(self.stored)))
        old = self.stored[idx]
        self.stored[idx] = fresh.clone()
        return old


def history_sample(buf, fresh_image, rng=None):
    if rng is not None:
        buf.rng = rng
    return buf.query(fresh_image)


# tensors <-> samples ---------------------------------------------------------


def _as_tensor(img):
    return to_model_range(to_rgb(img))


def generator_input(y, model):
    """Lift low-resolution observations to the generator's working size."""
    if isinstance(model, Downsample):
        return upsample_bicubic(y, model.scale)
    return y


def restore_image(G, degraded, sr_scale=None):
    """Run the generator on one image buffer and return an image buffer."""
    y = _as_tensor(degraded)
    if sr_scale:
        y = upsample_bicubic(y, sr_scale)
    with torch.no_grad():
        out = G(y.unsqueeze(0))
    return from_model_range(out)


def _stack(samples):
    x = torch.stack([_as_tensor(s.clean) for s in samples])
    y = torch.stack([_as_tensor(s.degraded) for s in samples])
    return x, y


def _set_requires_grad(net, flag):
    for p in net.parameters():
        p.requires_grad_(flag)


# trainer --------------------------------------------------------------------


class Trainer:
    """Holds the networks, optimizers and sampling state of one run."""

    def __init__(self, cfg, samples, eval_samples=None):
        if not samples:
            raise DatasetError("no training samples")
        self.cfg = cfg
        self.samples = list(samples)
        self.eval_samples = list(eval_samples or [])
        init = lambda k: substream_seed(cfg.seed, "init", k)  # noqa: E731
        self.G = nets.make_generator(cfg.width_scale, cfg.n_resblocks, init(0))
        self.D_g = nets.make_discriminator(cfg.width_scale, init(1))
        self.D_h = nets.make_discriminator(cfg.width_scale, init(2))
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_G = torch.optim.Adam(self.G.parameters(), cfg.lr_initial, betas=betas, eps=cfg.adam_eps)
        self.opt_Dg = torch.optim.Adam(self.D_g.parameters(), cfg.lr_initial, betas=betas, eps=cfg.adam_eps)
        self.opt_Dh = torch.optim.Adam(self.D_h.parameters(), cfg.lr_initial, betas=betas, eps=cfg.adam_eps)
        self.rng = np.random.default_rng(substream_seed(cfg.seed, "training"))
        self.hist_g = HistoryBuffer(cfg.history_capacity, self.rng)
        self.hist_h = HistoryBuffer(cfg.history_capacity, self.rng)
        self.epoch = 0
        self.step = 0

    # -- one step -----------------------------------------------------------

    def _physics(self, x_hat, batch):
        return torch.stack([apply_physics_core(x_hat[i], s.model) for i, s in enumerate(batch)])

    def _regen_input(self, y_regen, batch):
        return torch.stack([generator_input(y_regen[i], s.model) for i, s in enumerate(batch)])

    def augment(self, batch):
        """Random flips / transposes applied jointly to image pair and forward model."""
        rng = np.random.default_rng(substream_seed(self.cfg.seed, "augment", self.step))
        out = []
        for s, g in zip(batch, rng.integers(8, size=len(batch))):
            g = int(g)
            out.append(replace(s, clean=dihedral(s.clean, g), degraded=dihedral(s.degraded, g), model=None if s.model is None else dihedral_model(s.model, g)))
        return out

    def train_step(self, batch):
        """Update G once, then D_g and D_h once each; return the step's losses."""
        cfg, ab = self.cfg, self.cfg.ablation
        if cfg.augment:
            batch = self.augment(batch)
        x, y = _stack(batch)
        g_in = torch.stack([generator_input(y[i], s.model) for i, s in enumerate(batch)])

        _set_requires_grad(self.D_g, False)
        _set_requires_grad(self.D_h, False)
        x_hat = self.G(g_in)
        zero = x_hat.new_zeros(())
        y_regen = self._physics(x_hat, batch) if cfg.physics_branch else None
        l_p = loss_pixel_consistency(y_regen, y) if "no_lp" not in ab else zero
        l_g = loss_pixel_ground_truth(x_hat, x) if "no_lg" not in ab else zero
        if "no_lg_tilde" not in ab:
            l_g_tilde = loss_regenerated_ground_truth(self.G(self._regen_input(y_regen, batch)), x)
        else:
            l_g_tilde = zero
        adv_gg = lsgan_g_loss(self.D_g(x_hat))
        adv_gh = lsgan_g_loss(self.D_h(y_regen)) if "no_dh" not in ab else zero
        total = total_generator_objective(adv_gg, adv_gh, l_p, l_g, l_g_tilde, cfg.lam)
        self._check_finite(total, batch, "generator objective")
        self.opt_G.zero_grad(set_to_none=True)
        total.backward()
        self.opt_G.step()
        _set_requires_grad(self.D_g, True)
        _set_requires_grad(self.D_h, True)

        fake_x = torch.cat([self.hist_g.query(x_hat[i : i + 1]) for i in range(len(batch))])
        fake_y = None
        if "no_dh" not in ab:
            fake_y = torch.cat([self.hist_h.query(y_regen[i : i + 1]) for i in range(len(batch))])
        for _ in range(cfg.update_ratio):
            d_g = lsgan_d_loss(self.D_g(x), self.D_g(fake_x))
            self._check_finite(d_g, batch, "D_g loss")
            self.opt_Dg.zero_grad(set_to_none=True)
            d_g.backward()
            self.opt_Dg.step()
            d_h = zero
            if fake_y is not None:
                d_h = lsgan_d_loss(self.D_h(y), self.D_h(fake_y))
                self._check_finite(d_h, batch, "D_h loss")
                self.opt_Dh.zero_grad(set_to_none=True)
                d_h.backward()
                self.opt_Dh.step()

        self.step += 1
        return LossReport(
            l_p=as_float(l_p),
            l_g=as_float(l_g),
            l_g_tilde=as_float(l_g_tilde),
            adv_g=as_float(adv_gg) + as_float(adv_gh),
            adv_dg=as_float(d_g),
            adv_dh=as_float(d_h),
            total_g=as_float(total),
        )

    def _check_finite(self, value, batch, what):
        if not torch.isfinite(value).all():
            ids = [s.id for s in batch]
            self.divergence = {"step": self.step, "epoch": self.epoch, "what": what, "samples": ids, "value": repr(as_float(value))}
            raise TrainingDiverged(f"non-finite {what} at step {self.step} (samples {ids})")

    # -- epochs -------------------------------------------------------------

    def set_lr(self, epoch):
        lr = lr_schedule(epoch, self.cfg)
        for opt in (self.opt_G, self.opt_Dg, self.opt_Dh):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def epoch_order(self, epoch):
        rng = np.random.default_rng(substream_seed(self.cfg.seed, "shuffle", epoch))
        return rng.permutation(len(self.samples))

    def run_epoch(self):
        """Train one epoch; yields ``(step, lr, LossReport)`` per step."""
        lr = self.set_lr(self.epoch)
        order = self.epoch_order(self.epoch)
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            batch = [self.samples[i] for i in order[start : start + bs]]
            report = self.train_step(batch)
            yield self.step, lr, report
        self.epoch += 1

    def evaluate(self, samples=None):
        """Mean PSNR / SSIM of the current generator on held-out samples."""
        samples = self.eval_samples if samples is None else samples
        ps, ss = [], []
        for s in samples:
            scale = s.model.scale if isinstance(s.model, Downsample) else None
            out = restore_image(self.G, s.degraded, scale)
            clean = to_rgb(s.clean)
            ps.append(psnr(out, clean))
            ss.append(ssim(out, clean))
        return float(np.mean(ps)), float(np.mean(ss))

    # -- persistence --------------------------------------------------------

    def save(self, ckpt_dir):
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("G", "D_g", "D_h"):
            nets.save_net(getattr(self, name), d / name)
        opt_meta = {}
        for name in ("opt_G", "opt_Dg", "opt_Dh"):
            state = getattr(self, name).state_dict()["state"]
            blobs, steps = {}, {}
            for idx in sorted(state):
                st = state[idx]
                blobs[f"{idx}.exp_avg"] = st["exp_avg"]
                blobs[f"{idx}.exp_avg_sq"] = st["exp_avg_sq"]
                steps[str(idx)] = float(st["step"])
            nets.write_blobs(d / name, blobs)
            opt_meta[name] = steps
        nets.write_blobs(d / "history_g", {str(i): t for i, t in enumerate(self.hist_g.stored)})
        nets.write_blobs(d / "history_h", {str(i): t for i, t in enumerate(self.hist_h.stored)})
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "optimizer_steps": opt_meta,
            "config": self.cfg.to_dict(),
        }
        (d / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, ckpt_dir, samples, eval_samples=None, cfg=None):
        d = Path(ckpt_dir)
        meta = json.loads((d / "state.json").read_text())
        cfg = cfg or TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, samples, eval_samples)
        for name in ("G", "D_g", "D_h"):
            getattr(tr, name).load_state_dict(nets.read_blobs(d / name))
        for name in ("opt_G", "opt_Dg", "opt_Dh"):
            opt = getattr(tr, name)
            blobs = nets.read_blobs(d / name)
            sd = opt.state_dict()
            sd["state"] = {
                int(idx): {
                    "step": torch.tensor(step),
                    "exp_avg": blobs[f"{idx}.exp_avg"],
                    "exp_avg_sq": blobs[f"{idx}.exp_avg_sq"],
                }
                for idx, step in meta["optimizer_steps"][name].items()
            }
            opt.load_state_dict(sd)
        for hist, name in ((tr.hist_g, "history_g"), (tr.hist_h, "history_h")):
            blobs = nets.read_blobs(d / name)
            hist.stored = [blobs[str(i)] for i in range(len(blobs))]
        tr.rng.bit_generator.state = meta["rng"]
        tr.epoch = meta["epoch"]
        tr.step = meta["step"]
        return tr


def resolve_checkpoint(path):
    """Accept a checkpoint directory or a run directory (latest checkpoint wins)."""
    d = Path(path)
    if (d / "G.json").is_file():
        return d
    found = sorted(p for p in (d / "checkpoints").glob("epoch_*") if (p / "G.json").is_file())
    if not found:
        raise FileNotFoundError(f"{d}: no checkpoint found")
    return found[-1]


def load_generator(ckpt_dir):
    """Return ``(G, config_dict)`` from a checkpoint (or run) directory."""
    d = resolve_checkpoint(ckpt_dir)
    G = nets.load_net(d / "G", nets.Generator)
    G.eval()
    meta = json.loads((d / "state.json").read_text())
    return G, meta["config"]


# logs -----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return format_db(v) if math.isinf(v) else repr(v)
    return str(v)


def _tsv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_tsv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        for k, v in r.items():
            r[k] = int(v) if k in ("step", "epoch") else float(v)
    return rows


def _truncate_log(path, columns, step):
    if not path.is_file():
        return []
    rows = [r for r in read_tsv(path) if r["step"] <= step]
    return rows


def checkpoint_name(epoch):
    return f"epoch_{epoch:04d}"


def train(cfg, out_dir, samples=None, eval_samples=None, resume=None, stop_after_epoch=None):
    """Run a full training job, writing checkpoints and metrics under ``out_dir``.

    ``resume`` names a checkpoint directory to continue from; rows logged after
    that checkpoint are discarded so the log matches an uninterrupted run.
    ``stop_after_epoch`` interrupts the job early (used to test resumption).
    Returns the trainer.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        if not cfg.dataset_dir or not Path(cfg.dataset_dir).is_dir():
            raise DatasetError(f"dataset not found: {cfg.dataset_dir}")
        task = dataset_task(cfg.dataset_dir)
        if task != cfg.task:
            raise DatasetError(f"dataset task {task!r} does not match configured task {cfg.task!r}")
        samples = load_dataset(cfg.dataset_dir)
    if eval_samples is None and cfg.eval_dataset_dir:
        eval_samples = load_dataset(cfg.eval_dataset_dir)
    if cfg.task == "sr" and isinstance(samples[0].model, Downsample):
        cfg.sr_scale = samples[0].model.scale

    if resume:
        trainer = Trainer.load(resume, samples, eval_samples, cfg)
        step_rows = _truncate_log(out / "metrics.tsv", STEP_COLUMNS, trainer.step)
        eval_rows = _truncate_log(out / "eval.tsv", EVAL_COLUMNS, trainer.step)
    else:
        trainer = Trainer(cfg, samples, eval_samples)
        step_rows, eval_rows = [], []
        if trainer.eval_samples:
            p, s = trainer.evaluate()
            eval_rows.append(dict(step=0, epoch=0, psnr=p, ssim=s))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    def flush():
        (out / "metrics.tsv").write_text(_tsv(step_rows, STEP_COLUMNS))
        (out / "eval.tsv").write_text(_tsv(eval_rows, EVAL_COLUMNS))

    while trainer.epoch < cfg.epochs:
        try:
            for step, lr, rep in trainer.run_epoch():
                step_rows.append(dict(step=step, epoch=trainer.epoch, lr=lr, **rep.as_dict()))
        except TrainingDiverged:
            (out / "divergence.json").write_text(json.dumps(trainer.divergence, indent=1) + "\n")
            flush()
            raise
        epoch = trainer.epoch
        if trainer.eval_samples and epoch % cfg.eval_every == 0:
            p, s = trainer.evaluate()
            eval_rows.append(dict(step=trainer.step, epoch=epoch, psnr=p, ssim=s))
            logger.info("epoch %d step %d psnr %.2f ssim %.4f", epoch, trainer.step, p, s)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            flush()
            trainer.save(out / "checkpoints" / checkpoint_name(epoch))
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    flush()
    return trainer
