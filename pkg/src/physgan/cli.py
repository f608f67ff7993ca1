"""Command-line entry point.

    physgan <subcommand> [--config FILE] [--key value ...]

Settings resolve as built-in defaults < config file (JSON or YAML) < flags.
Every run writes ``run_manifest.json`` under ``--out`` before starting work.
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
THREADS_ENV = "PHYSGAN_THREADS"
MANIFEST_NAME = "run_manifest.json"

logger = logging.getLogger("physgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")


# option tables ----------------------------------------------------------------
# (flag, dest, type, help); defaults come from the config dataclasses so the
# help text can never disagree with what a run actually uses.


def _csv_of(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(kind(v) for v in text)
        return tuple(kind(v) for v in str(text).split(",") if v.strip())

    parse.__name__ = f"list of {kind.__name__}"
    return parse


def _pair_of(kind):
    def parse(text):
        vals = _csv_of(kind)(text)
        if len(vals) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return vals

    parse.__name__ = f"pair of {kind.__name__}"
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PRESET = ("--preset", "preset", str, "settings bundle: 'full' (full-size protocol) or 'toy' (desk-scale)")
OUT = ("--out", "out", str, "output directory (all files are written below it)")

SYNTH_OPTS = [
    PRESET,
    ("--task", "task", str, "degradation: deblur, dehaze, sr or derain"),
    ("--count", "count", int, "number of samples"),
    ("--size", "image_size", int, "image side length in pixels"),
    ("--seed", "seed", int, "master seed"),
    ("--style", "style", str, "clean image style: glyphs, gradients or shapes"),
    ("--kernel-size-range", "kernel_size_range", _pair_of(int), "blur kernel side range MIN,MAX (odd sizes)"),
    ("--walk-steps-range", "walk_steps_range", _pair_of(int), "motion random-walk step range MIN,MAX"),
    ("--disc-radius-range", "disc_radius_range", _pair_of(float), "defocus disc radius range MIN,MAX"),
    ("--defocus-fraction", "defocus_fraction", float, "share of defocus (vs motion) kernels"),
    ("--beta-range", "beta_range", _pair_of(float), "haze scattering coefficient range MIN,MAX"),
    ("--airlight-range", "airlight_range", _pair_of(float), "haze airlight range MIN,MAX"),
    ("--noise-max", "noise_max", float, "upper bound of the per-sample noise level (0-0.10)"),
    ("--streak-density", "streak_density", float, "rain streak density"),
    ("--sr-scale", "sr_scale", int, "super-resolution factor (2, 3 or 4)"),
    OUT,
]

TRAIN_OPTS = [
    PRESET,
    ("--task", "task", str, "degradation the generator inverts"),
    ("--dataset", "dataset_dir", str, "training dataset directory"),
    ("--eval-dataset", "eval_dataset_dir", str, "held-out dataset directory"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--lr", "lr_initial", float, "initial learning rate"),
    ("--decay-start", "decay_start_epoch", int, "epoch at which linear decay begins"),
    ("--batch-size", "batch_size", int, "images per step"),
    ("--lam", "lam", float, "weight of the pixel losses"),
    ("--adam-beta1", "adam_beta1", float, "Adam beta1"),
    ("--adam-beta2", "adam_beta2", float, "Adam beta2"),
    ("--adam-eps", "adam_eps", float, "Adam epsilon"),
    ("--history-capacity", "history_capacity", int, "size of each discriminator's history buffer"),
    ("--update-ratio", "update_ratio", int, "discriminator updates per generator update"),
    ("--seed", "seed", int, "master seed"),
    ("--width-scale", "width_scale", float, "channel multiplier: 1, 0.5 or 0.25"),
    ("--n-resblocks", "n_resblocks", int, "residual blocks in the generator"),
    ("--ablation", "ablation", _csv_of(str), "comma list from no_dh, no_lp, no_lg, no_lg_tilde"),
    ("--checkpoint-every", "checkpoint_every", int, "epochs between checkpoints"),
    ("--eval-every", "eval_every", int, "epochs between held-out evaluations"),
    ("--augment", "augment", _bool, "random flips/transposes of image pairs and forward models"),
]

SUBCOMMANDS = {
    "synth": ("build a paired dataset", SYNTH_OPTS),
    "train": (
        "train a generator",
        TRAIN_OPTS + [("--resume", "resume", str, "checkpoint directory to continue from"), OUT],
    ),
    "eval": (
        "score a checkpoint on a dataset",
        [
            ("--checkpoint", "checkpoint", str, "checkpoint or run directory"),
            ("--dataset", "dataset_dir", str, "dataset directory"),
            ("--save-images", "save_images", _bool, "also write restored PNGs"),
            OUT,
        ],
    ),
    "restore": (
        "restore one PNG",
        [
            ("--checkpoint", "checkpoint", str, "checkpoint or run directory"),
            ("--in", "input", str, "degraded PNG"),
            ("--out", "out", str, "restored PNG path"),
        ],
    ),
    "sweep-noise": (
        "PSNR versus noise level on a deblurring dataset",
        [
            ("--checkpoint", "checkpoint", str, "checkpoint or run directory"),
            ("--dataset", "dataset_dir", str, "deblurring dataset directory"),
            ("--levels", "levels", _csv_of(float), "noise levels (fractions of the intensity range)"),
            OUT,
        ],
    ),
    "sweep-lambda": (
        "retrain over a grid of pixel-loss weights",
        TRAIN_OPTS + [("--grid", "grid", _csv_of(float), "lambda values"), OUT],
    ),
    "sweep-resblocks": (
        "retrain over a grid of ResBlock counts",
        TRAIN_OPTS + [("--grid", "grid", _csv_of(int), "ResBlock counts"), OUT],
    ),
    "ablate": ("train the five loss ablations at a matched budget", TRAIN_OPTS + [OUT]),
}

REQUIRED = {
    "synth": ("out",),
    "train": ("dataset_dir", "out"),
    "eval": ("checkpoint", "dataset_dir", "out"),
    "restore": ("checkpoint", "input", "out"),
    "sweep-noise": ("checkpoint", "dataset_dir", "out"),
    "sweep-lambda": ("dataset_dir", "out"),
    "sweep-resblocks": ("dataset_dir", "out"),
    "ablate": ("dataset_dir", "out"),
}


def _defaults(command, preset):
    from .evaluate import LAMBDA_GRID, NOISE_LEVELS, RESBLOCK_GRID
    from .presets import TOY_SYNTH, TOY_TRAIN
    from .synth import SynthConfig
    from .trainer import TrainConfig

    if preset not in ("full", "toy"):
        raise UsageError(f"unknown preset {preset!r}; expected 'full' or 'toy'")
    if command == "synth":
        d = asdict(SynthConfig(**(TOY_SYNTH if preset == "toy" else {})))
    elif command in ("train", "sweep-lambda", "sweep-resblocks", "ablate"):
        d = TrainConfig(**(TOY_TRAIN if preset == "toy" else {})).to_dict()
        d["ablation"] = tuple(d["ablation"])
        d["resume"] = None
        d["grid"] = {"sweep-lambda": LAMBDA_GRID, "sweep-resblocks": RESBLOCK_GRID}.get(command)
    else:
        d = {"checkpoint": None, "dataset_dir": None, "input": None, "save_images": False, "levels": NOISE_LEVELS}
    d["out"] = None
    d["preset"] = preset
    opts = {dest for _, dest, _, _ in SUBCOMMANDS[command][1]}
    return {k: v for k, v in d.items() if k in opts or k in _dataclass_keys(command)}


def _dataclass_keys(command):
    from .synth import SynthConfig
    from .trainer import TrainConfig

    if command == "synth":
        return {f.name for f in fields(SynthConfig)}
    if command in ("train", "sweep-lambda", "sweep-resblocks", "ablate"):
        return {f.name for f in fields(TrainConfig)}
    return set()


def _fmt_default(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v) if v else "none"
    return "none" if v is None else str(v)


def build_parser():
    parser = _Parser(prog="physgan", description="Physics-constrained GAN image restoration.")
    parser.add_argument("--version", action="version", version=f"physgan {__version__}")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (summary, opts) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary[0].upper() + summary[1:] + ".")
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON or YAML file of settings (flags override it)")
        defaults = _defaults(name, "full")
        for flag, dest, kind, text in opts:
            shown = _fmt_default(defaults.get(dest))
            req = " [required]" if dest in REQUIRED[name] else ""
            p.add_argument(
                flag,
                dest=dest,
                type=str,
                default=argparse.SUPPRESS,
                metavar=flag.lstrip("-").upper().replace("-", "_") if kind is not _bool else "BOOL",
                help=f"{text} (default: {shown}){req}",
            )
    return parser


# resolution -------------------------------------------------------------------


def load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping of settings")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(command, flags, config):
    """Merge defaults, config file and flags; return ``(values, sources)``."""
    opts = {dest: kind for _, dest, kind, _ in SUBCOMMANDS[command][1]}
    aliases = {flag.lstrip("-").replace("-", "_"): dest for flag, dest, _, _ in SUBCOMMANDS[command][1]}
    config = {aliases.get(k, k): v for k, v in config.items()}
    preset = flags.get("preset", config.get("preset", "full"))
    values = _defaults(command, preset)
    sources = {k: "default" for k in values}
    for layer, given in (("config", config), ("flag", flags)):
        for key, raw in given.items():
            if key not in values:
                raise UsageError(f"unknown setting {key!r} for {command}")
            kind = opts.get(key)
            try:
                values[key] = _convert(kind, raw, values[key])
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from exc
            sources[key] = layer
    missing = [k for k in REQUIRED[command] if values.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join('--' + _flag_of(command, k) for k in missing)}")
    return values, sources


def _flag_of(command, dest):
    for flag, d, _, _ in SUBCOMMANDS[command][1]:
        if d == dest:
            return flag.lstrip("-")
    return dest


def _convert(kind, raw, current):
    if raw is None:
        return None
    if kind is None:
        # config-only dataclass field: keep the type of the default
        if isinstance(current, tuple):
            return tuple(raw)
        if isinstance(current, bool):
            return _bool(raw)
        if isinstance(current, (int, float)) and not isinstance(raw, (int, float)):
            return type(current)(raw)
        return raw
    if kind is str:
        return str(raw)
    return kind(raw)


# manifest ---------------------------------------------------------------------


def git_blob_hash(data):
    """SHA-1 of ``data`` framed as a git blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_paths(values):
    for key in ("dataset_dir", "eval_dataset_dir", "checkpoint", "input", "resume"):
        p = values.get(key)
        if not p:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    yield key, f.relative_to(p).as_posix(), f
        elif p.is_file():
            yield key, p.name, p


def content_hash(command, values):
    """Git-style hash over the resolved settings and every input file."""
    lines = [f"{git_blob_hash(_canonical(command, values).encode())} settings"]
    for key, rel, path in _input_paths(values):
        lines.append(f"{git_blob_hash(path.read_bytes())} {key}/{rel}")
    return git_blob_hash(("\n".join(lines) + "\n").encode())


def _jsonable(v):
    if isinstance(v, (tuple, frozenset, set)):
        return [_jsonable(x) for x in (sorted(v) if isinstance(v, (set, frozenset)) else v)]
    return v


def _canonical(command, values):
    return json.dumps({"command": command, **{k: _jsonable(v) for k, v in values.items() if k != "out"}}, sort_keys=True)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path(command, values):
    out = Path(values["out"])
    if command == "restore":
        return out.with_name(out.name + ".manifest.json")
    return out / MANIFEST_NAME


def write_manifest(command, values, sources, **extra):
    path = manifest_path(command, values)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "subcommand": command,
        "config": {k: _jsonable(v) for k, v in sorted(values.items())},
        "sources": dict(sorted(sources.items())),
        "precedence": ["default", "config", "flag"],
        "input_hash": content_hash(command, values),
        "version": __version__,
        **extra,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# subcommands --------------------------------------------------------------------


def _train_config(values):
    from .trainer import TrainConfig

    keys = _dataclass_keys("train")
    return TrainConfig(**{k: v for k, v in values.items() if k in keys})


def _samples(values):
    from .synth import DatasetError, dataset_task, load_dataset

    ds = values["dataset_dir"]
    if not Path(ds).is_dir():
        raise DatasetError(f"dataset not found: {ds}")
    task = dataset_task(ds)
    if task != values["task"]:
        raise DatasetError(f"dataset task {task!r} does not match configured task {values['task']!r}")
    train_s = load_dataset(ds)
    eval_s = load_dataset(values["eval_dataset_dir"]) if values.get("eval_dataset_dir") else train_s
    return train_s, eval_s


def run_synth(values):
    from .synth import SynthConfig, build_dataset

    keys = _dataclass_keys("synth")
    cfg = SynthConfig(**{k: v for k, v in values.items() if k in keys})
    rows = build_dataset(cfg, values["out"])
    print(f"wrote {len(rows)} {cfg.task} samples to {values['out']}")


def run_train(values):
    from .evaluate import write_convergence
    from .trainer import train

    cfg = _train_config(values)
    trainer = train(cfg, values["out"], resume=values.get("resume"))
    if trainer.eval_samples:
        write_convergence(values["out"])
    print(f"trained {trainer.step} steps; checkpoints in {Path(values['out']) / 'checkpoints'}")


def run_eval(values):
    from .evaluate import evaluate_checkpoint
    from .metrics import format_db

    rep = evaluate_checkpoint(values["checkpoint"], values["dataset_dir"], values["out"], values["save_images"])
    print(f"mean PSNR {format_db(rep.mean_psnr)} dB, mean SSIM {rep.mean_ssim:.4f} over {len(rep.rows)} images")


def run_restore(values):
    from .imagecore import read_png, write_png
    from .trainer import load_generator, restore_image

    G, cfg = load_generator(values["checkpoint"])
    img = read_png(values["input"])
    scale = cfg.get("sr_scale") if cfg.get("task") == "sr" else None
    write_png(restore_image(G, img, scale), values["out"])
    print(f"wrote {values['out']}")


def run_sweep_noise(values):
    from .evaluate import noise_sweep

    curve = noise_sweep(values["checkpoint"], values["dataset_dir"], values["levels"], values["out"])
    for lv, p, s in curve:
        print(f"noise {lv:.3f}: PSNR {p:.2f} dB, SSIM {s:.4f}")


def _run_grid(values, fn):
    base = _train_config(values)
    tr, ev = _samples(values)
    grid = values["grid"]
    rows = fn(base, tr, ev, values["out"], grid)
    for r in rows:
        print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def run_sweep_lambda(values):
    from .evaluate import lambda_sweep

    _run_grid(values, lambda_sweep)


def run_sweep_resblocks(values):
    from .evaluate import resblock_sweep

    _run_grid(values, resblock_sweep)


def run_ablate(values):
    from .evaluate import ablation_suite

    base = _train_config(values)
    tr, ev = _samples(values)
    for r in ablation_suite(base, tr, ev, values["out"]):
        print(f"{r['variant']}\tPSNR {r['psnr']:.2f}\tSSIM {r['ssim']:.4f}\tresidual {r['residual']:.4f}")


RUNNERS = {
    "synth": run_synth,
    "train": run_train,
    "eval": run_eval,
    "restore": run_restore,
    "sweep-noise": run_sweep_noise,
    "sweep-lambda": run_sweep_lambda,
    "sweep-resblocks": run_sweep_resblocks,
    "ablate": run_ablate,
}


def _apply_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    import torch

    torch.set_num_threads(n)
    return n


def _runtime_errors():
    from .imagecore import ImageIOError
    from .physics import ShapeError
    from .synth import DatasetError
    from .trainer import TrainingDiverged

    return (DatasetError, ImageIOError, ShapeError, TrainingDiverged, OSError, ValueError, RuntimeError)


def dispatch(argv=None):
    """Parse ``argv``, run the subcommand and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nphysgan: error: a subcommand is required")
        logging.basicConfig(level=ns.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        threads = _apply_threads()
        given = {k: v for k, v in vars(ns).items() if k not in ("command", "log_level", "config")}
        config = load_config_file(ns.config) if getattr(ns, "config", None) else {}
        values, sources = resolve(ns.command, given, config)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE

    import torch

    torch.use_deterministic_algorithms(True)
    started = _now()
    try:
        write_manifest(ns.command, values, sources, started_at=started, threads=threads, status="running")
        RUNNERS[ns.command](values)
    except _runtime_errors() as exc:
        print(f"physgan {ns.command}: error: {exc}", file=sys.stderr)
        _finish(ns.command, values, sources, started, threads, "failed")
        return EXIT_RUNTIME
    _finish(ns.command, values, sources, started, threads, "ok")
    return EXIT_OK


def _finish(command, values, sources, started, threads, status):
    try:
        write_manifest(command, values, sources, started_at=started, finished_at=_now(), threads=threads, status=status)
    except (OSError, ValueError):
        pass


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
