"""``panforge`` command line: gendata, train, infer, eval.

Exit status: 0 success, 2 configuration or input error, 3 numerical abort.

A training run directory holds ``config.txt`` (the effective config),
``checkpoints/``, ``logs.tsv`` and ``reports/``.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from panforge.checkpoint import load_checkpoint, save_checkpoint
from panforge.config import RunConfig, apply_lambda_overrides, coerce, load_config
from panforge.datakit.imageio import load_image, save_image
from panforge.datakit.manifest import build_manifest, load_manifest
from panforge.datakit.synth import to_unit
from panforge.errors import NumericalError, PanError
from panforge.metrics import evaluate_pair, write_report
from panforge.networks import build_discrim_net, build_transform_net
from panforge.trainer import LOG_COLUMNS, Trainer

log = logging.getLogger("panforge")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
THREADS_ENV = "PANFORGE_THREADS"

# flag name -> config key, for the flags that map one-to-one
_FLAG_KEYS = {
    "seed": "seed", "task": "task", "size": "size", "width_mult": "width_mult", "loss": "loss",
    "margin": "margin", "iters": "iters", "batch": "batch", "out": "out_dir", "data": "data",
    "lr": "lr", "n_train": "n_train", "n_test": "n_test", "checkpoint_every": "checkpoint_every",
    "density": "density", "hole_fraction": "hole_fraction", "n_shapes": "n_shapes",
}


class UsageError(PanError):
    """Bad command-line input; ``field`` names the offending option."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    changes = {}
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = coerce(key, val)
    cfg = cfg.replace(**changes)
    if getattr(args, "lambda_", None):
        cfg = cfg.replace(lambdas=apply_lambda_overrides(cfg.lambdas, args.lambda_))
    return cfg.validate()


def _require(value, field, what):
    if not value:
        raise UsageError(f"missing {what}: set {field}", field=field)
    return value


# -- commands -----------------------------------------------------------


def cmd_gendata(args):
    cfg = resolve_config(args)
    out = _require(cfg.out_dir, "out_dir", "output directory (--out or out_dir in the config)")
    man = build_manifest(cfg.task, cfg.n_train, cfg.n_test, cfg.seed, out, (cfg.size, cfg.size),
                         **cfg.task_params())
    print(man.path)
    return EXIT_OK


def _new_trainer(cfg: RunConfig):
    size = (cfg.size, cfg.size)
    T = build_transform_net(size, cfg.multiplier, seed=cfg.seed * 2 + 1)
    D = build_discrim_net(size, cfg.multiplier, seed=cfg.seed * 2 + 2)
    return Trainer(T, D, cfg.loss_config(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                   t_steps=cfg.t_steps, batch_size=cfg.batch, seed=cfg.seed)


def run_paths(run_dir):
    return {"config": os.path.join(run_dir, "config.txt"), "checkpoints": os.path.join(run_dir, "checkpoints"),
            "logs": os.path.join(run_dir, "logs.tsv"), "reports": os.path.join(run_dir, "reports")}


def _checkpoint_name(iteration):
    return f"iter-{iteration:06d}.ckpt"


def _prepare_log(path, resume_iteration):
    """Keep the header and any lines logged before ``resume_iteration``."""
    keep = ["\t".join(LOG_COLUMNS)]
    if resume_iteration and os.path.exists(path):
        with open(path) as fh:
            for line in fh.read().splitlines()[1:]:
                if line and int(line.split("\t", 1)[0]) < resume_iteration:
                    keep.append(line)
    with open(path, "w") as fh:
        fh.write("\n".join(keep) + "\n")


def cmd_train(args):
    cfg = resolve_config(args)
    run_dir = _require(cfg.out_dir, "out_dir", "run directory (--out or out_dir in the config)")
    data = _require(cfg.data, "data", "dataset (--data or data in the config)")
    man = load_manifest(data)
    inputs, targets, _ = man.load_split("train")
    if inputs.shape[2:] != (cfg.size, cfg.size):
        raise UsageError(f"dataset images are {inputs.shape[2]}x{inputs.shape[3]} but size = {cfg.size}",
                         field="size")
    paths = run_paths(run_dir)
    os.makedirs(paths["checkpoints"], exist_ok=True)
    os.makedirs(paths["reports"], exist_ok=True)
    with open(paths["config"], "w") as fh:
        fh.write(cfg.to_text())
    trainer = _new_trainer(cfg)
    if args.resume:
        load_checkpoint(args.resume, trainer)
        log.info("resumed from %s at iteration %d", args.resume, trainer.iteration)
    _prepare_log(paths["logs"], trainer.iteration)

    with open(paths["logs"], "a") as logfh:
        def on_report(rep):
            logfh.write(rep.log_line() + "\n")
            logfh.flush()
            if rep.iteration % max(1, args.log_every) == 0:
                log.info("%s", rep.log_line())
            done = rep.iteration + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(paths["checkpoints"], _checkpoint_name(done)), trainer)

        try:
            trainer.fit(inputs, targets, cfg.iters, on_report=on_report)
        except NumericalError as exc:
            save_checkpoint(os.path.join(paths["checkpoints"], "aborted.ckpt"), trainer)
            raise exc
    final = os.path.join(paths["checkpoints"], "final.ckpt")
    save_checkpoint(final, trainer)
    print(final)
    return EXIT_OK


def _collect_inputs(items):
    files = []
    for item in items:
        if os.path.isdir(item):
            files += sorted(os.path.join(item, f) for f in os.listdir(item)
                            if f.lower().endswith((".png", ".pgm")))
        elif os.path.isfile(item):
            files.append(item)
        else:
            raise UsageError(f"input {item} does not exist", field="input")
    if not files:
        raise UsageError("no input images given", field="input")
    return files


def cmd_infer(args):
    out = _require(args.out, "out_dir", "output directory (--out)")
    trainer = load_checkpoint(_require(args.checkpoint, "checkpoint", "--checkpoint"))
    files = _collect_inputs(args.input)
    images = []
    for path in files:
        img = load_image(path)
        h, w = img.shape[1:]
        if h % 64 or w % 64:
            raise UsageError(f"{path} is {h}x{w}: input height and width must be multiples of 64", field="size")
        images.append(img)
    os.makedirs(out, exist_ok=True)
    for path, img in zip(files, images):
        y = trainer.transform(img[None], batch_size=1)[0]
        name = os.path.splitext(os.path.basename(path))[0] + ".png"
        save_image(y, os.path.join(out, name))
    print(f"wrote {len(files)} images to {out}")
    return EXIT_OK


def cmd_eval(args):
    data = _require(args.data, "data", "--data (test manifest)")
    man = load_manifest(data)
    inputs, targets, ids = man.load_split("test")
    if args.baseline == "input":
        outputs = inputs
    elif args.baseline == "target":
        outputs = targets
    else:
        trainer = load_checkpoint(_require(args.checkpoint, "checkpoint", "--checkpoint or --baseline"))
        outputs = trainer.transform(inputs)
    reports = [evaluate_pair(to_unit(o), to_unit(t), id=i) for o, t, i in zip(outputs, targets, ids)]
    report = args.report
    if not report:
        base = os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint))) if args.checkpoint else "."
        report = os.path.join(base, "reports", "eval.tsv")
    os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
    mean = write_report(report, reports)
    print(mean.row())
    return EXIT_OK


# -- parser -------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=["streak", "inpaint", "labels"])
    p.add_argument("--size", type=int)
    p.add_argument("--width-mult", dest="width_mult")
    p.add_argument("--out", help="output or run directory (config key out_dir)")


def build_parser():
    parser = argparse.ArgumentParser(prog="panforge", description="Perceptual adversarial image transformation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate a synthetic paired dataset")
    _common(p)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--hole-fraction", dest="hole_fraction", type=float)
    p.add_argument("--n-shapes", dest="n_shapes", type=int)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train T and D on a dataset")
    _common(p)
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--loss", choices=["pan", "l2", "l2_gan"])
    p.add_argument("--lambda", dest="lambda_", action="append", metavar="I=V",
                   help="override one perceptual weight, e.g. --lambda 2=0 (repeatable)")
    p.add_argument("--margin", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained T over images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("input", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--report", help="report path (default: <run>/reports/eval.tsv)")
    p.add_argument("--baseline", choices=["input", "target"],
                   help="score the raw inputs or the targets themselves instead of a model")
    p.set_defaults(func=cmd_eval)
    return parser


@contextlib.contextmanager
def thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", field=THREADS_ENV)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        with thread_limit(), np.errstate(all="ignore"):
            return args.func(args)
    except NumericalError as exc:
        print(f"panforge: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PanError, OSError) as exc:
        field = getattr(exc, "field", None)
        prefix = f"{field}: " if field else ""
        print(f"panforge: error: {prefix}{exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
