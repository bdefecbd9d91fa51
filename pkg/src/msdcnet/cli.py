"""``msdc`` command-line driver.

Exit status: 0 success, 1 usage error, 2 verification failure.
Precedence of settings: command-line flags > ``--config`` file > defaults.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as dataio
from .metrics import write_reports_csv
from .model import VARIANT_ALIASES, ModelConfig, count_params, layer_plan
from .render import render_colormap
from .runtime import configure_threads
from .train import (CheckpointError, TrainRunConfig, evaluate_model, format_log,
                    load_checkpoint, predict, run_training, save_checkpoint)

PUBLISHED_PARAMS = 4.6e6
VARIANT_CHOICES = ("full",) + tuple(VARIANT_ALIASES)

DEFAULTS = {
    "seed": 0,
    "height": 64,
    "width": 128,
    "max_disparity": 192,
    "base_channels": 32,
    "levels_3d": 4,
    "variant": "full",
    "dtype": "float32",
    "count": 8,
    "batch": 2,
    "steps": 2000,
    "checkpoint_every": 0,
    "lr": 1e-3,
    "tolerance": 1e-4,
    "e2e_tolerance": 1e-3,
    "colormap": False,
}

REQUIRED = {
    "synth": ("out",),
    "train": ("out",),
    "predict": ("checkpoint", "data", "out"),
    "eval": ("checkpoint", "data"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


# dest -> converter, shared by flags and the config file
TYPES = {
    "seed": int, "height": int, "width": int, "max_disparity": int, "base_channels": int,
    "levels_3d": int, "count": int, "batch": int, "steps": int, "checkpoint_every": int,
    "lr": float, "tolerance": float, "e2e_tolerance": float, "colormap": _flag,
    "variant": str, "dtype": str, "out": str, "data": str, "checkpoint": str,
}


def _model_flags(p):
    p.add_argument("--max-disparity", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--levels-3d", type=int)
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser():
    parser = _Parser(prog="msdc", description="Multi-scale dense stereo matching network.",
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="file of `key = value` lines")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("synth", "write a synthetic random-dot dataset")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--max-disparity", type=int)
    p.add_argument("--seed", type=int)

    p = command("train", "train on a dataset directory or fresh synthetic pairs")
    p.add_argument("--out", help="run directory for train_log.csv and checkpoints")
    p.add_argument("--data", help="dataset directory; synthetic pairs when omitted")
    p.add_argument("--count", type=int, help="synthetic pairs when --data is omitted")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    _model_flags(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--checkpoint-every", type=int)

    p = command("predict", "write 16-bit disparity PNGs for a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--colormap", nargs="?", const=True, type=_flag,
                   help="also write color renders")

    p = command("eval", "per-sample and mean error metrics as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", help="CSV path; stdout when omitted")

    p = command("gradcheck", "finite-difference check of every backward rule")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--e2e-tolerance", type=float)
    p.add_argument("--seed", type=int)

    p = command("info", "parameter count and layer plan")
    _model_flags(p)
    return parser


def read_config(path):
    """Parse `key = value` lines; `#` starts a comment.  Keys accept - or _."""
    settings = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        if key not in TYPES:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            settings[key] = TYPES[key](value.strip())
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return settings


def resolve(argv):
    """Parse argv into (command, settings) with flags > config > defaults."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", False)
    file_settings = read_config(ns.pop("config")) if "config" in ns else {}
    settings = dict(DEFAULTS)
    settings.update(file_settings)
    settings.update(ns)
    settings["verbose"] = verbose
    missing = [k for k in REQUIRED.get(command, ()) if settings.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"msdc {command}: missing required {flags}")
    if settings["variant"] not in VARIANT_CHOICES:
        raise UsageError(f"unknown variant {settings['variant']!r}")
    return command, settings


def model_config(s):
    return ModelConfig(base_channels=s["base_channels"], max_disparity=s["max_disparity"],
                       levels_3d=s["levels_3d"], variant=s["variant"], dtype=s["dtype"])


def _read_checkpoint(path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_synth(s):
    if s["max_disparity"] < 2:
        raise UsageError("--max-disparity must be at least 2")
    samples = dataio.synthetic_dataset(s["count"], s["height"], s["width"], s["max_disparity"],
                                       seed=s["seed"])
    dataio.save_dataset(s["out"], samples)
    print(f"wrote {len(samples)} samples to {s['out']}")
    return 0


def cmd_train(s):
    out = Path(s["out"])
    resume = _read_checkpoint(s["checkpoint"]) if s.get("checkpoint") else None
    model = resume.config if resume is not None else model_config(s)
    cfg = TrainRunConfig(model=model, data_dir=s.get("data"), synth_count=s["count"],
                         height=s["height"], width=s["width"], batch_size=s["batch"],
                         max_steps=s["steps"], seed=s["seed"],
                         checkpoint_every=s["checkpoint_every"], lr=s["lr"])
    out.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(ckpt):
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "checkpoints" / f"step_{ckpt.step:06d}.msdc").write_bytes(save_checkpoint(ckpt))

    records, final = run_training(cfg, resume=resume, on_checkpoint=on_checkpoint)
    (out / "train_log.csv").write_text(format_log(records))
    (out / "checkpoint.msdc").write_bytes(save_checkpoint(final))
    if records:
        last = records[-1]
        print(f"step {last.step}: loss {last.loss:.4f}, epe {last.epe:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.msdc'}")
    return 0


def cmd_predict(s):
    ckpt = _read_checkpoint(s["checkpoint"])
    net = ckpt.restore_params()
    out = Path(s["out"])
    (out / "disp").mkdir(parents=True, exist_ok=True)
    if s["colormap"]:
        (out / "color").mkdir(exist_ok=True)
    indices = dataio.dataset_indices(s["data"])
    if not indices:
        raise UsageError(f"no samples under {s['data']}")
    for i in indices:
        sample = dataio.load_sample(s["data"], i)
        pred = predict(net, sample.left, sample.right)
        dataio.write_png16(out / "disp" / f"{i:04d}.png", dataio.encode_kitti_disparity(pred))
        if s["colormap"]:
            dataio.write_rgb8(out / "color" / f"{i:04d}.png",
                              render_colormap(pred, ckpt.config.max_disparity))
    print(f"wrote {len(indices)} disparity maps to {out / 'disp'}")
    return 0


def cmd_eval(s):
    ckpt = _read_checkpoint(s["checkpoint"])
    indices = dataio.dataset_indices(s["data"])
    if not indices:
        raise UsageError(f"no samples under {s['data']}")
    samples = [dataio.load_sample(s["data"], i) for i in indices]
    result = evaluate_model(ckpt, samples)
    good = [(f"{i:04d}", r) for i, r in zip(indices, result.reports) if not isinstance(r, str)]
    text = write_reports_csv(good, result.aggregate)
    for r in result.reports:
        if isinstance(r, str):
            print(f"error: {r}", file=sys.stderr)
    if s.get("out"):
        Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(s["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 2 if result.status else 0


def cmd_gradcheck(s):
    from .verify import gradient_suite

    ok = True
    for name, rep, seconds, tol in gradient_suite(s["tolerance"], s["e2e_tolerance"], seed=s["seed"]):
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name:<24} max rel err {rep.worst:.2e} (tol {tol:g}, {seconds:.1f}s)")
        if not rep.passed:
            for line in str(rep).splitlines():
                print("     " + line)
    return 0 if ok else 2


def cmd_info(s):
    cfg = model_config(s)
    n = count_params(cfg)
    print(f"variant {cfg.variant}, F={cfg.base_channels}, D={cfg.max_disparity}, "
          f"3D levels {cfg.levels_3d}")
    print(f"parameters: {n:,} ({n / 1e6:.2f}M; published reference {PUBLISHED_PARAMS / 1e6:.1f}M)")
    print(f"input extents must be divisible by {cfg.spatial_divisor()}, "
          f"max disparity by {cfg.disparity_divisor()}")
    plan = layer_plan(cfg)
    print(f"layer plan ({len(plan)} layers):")
    for spec in plan:
        print("  " + spec.describe())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "info": cmd_info}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, settings = resolve(argv)
        logging.basicConfig(level=logging.INFO if settings["verbose"] else logging.WARNING,
                            format="%(message)s")
        configure_threads()
        return COMMANDS[command](settings)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, CheckpointError, FileNotFoundError) as exc:
        print(f"msdc: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
