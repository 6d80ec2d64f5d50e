"""Command-line interface: ``tdac {synth,train,segment,eval,sweep,gradcheck}``.

Settings come from an optional ``key=value`` config file (``#`` starts a
comment) and are overridden by the matching command-line flags.  Every file
a command writes goes under its ``--out`` directory.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import __version__
from .adjoint import AdjointError, finite_diff_check, gradcheck_fixture, linear_probe_loss
from .data import DataError, DatasetManifest, STYLES, generate_synthetic, load_image, save_field, save_mask
from .evolution import EvolutionError, evolve
from .fields import EvolutionConfig, FieldError
from .predictor import PredictorError, load_checkpoint, save_checkpoint
from .sweep import SWEEP_VARIABLES, SweepSpec, run_sweep
from .train import TrainConfig, TrainingError, evaluate, predict, segment, train, write_evaluation_csv, write_history_csv

log = logging.getLogger("tdac")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-3

# (key, type, help) for every configurable setting; keys double as flag names
EVOLUTION_KEYS = [
    ("mu", float, "curvature (length) weight"),
    ("epsilon", float, "Heaviside smoothing width in pixels"),
    ("dt", float, "explicit Euler time step"),
    ("L", int, "number of evolution steps"),
    ("f", int, "local window half-width; window is (2f+1)^2"),
    ("eta", float, "numerical floor, at most 1e-6"),
    ("nu", float, "distance-regularization weight"),
    ("double_dirac", bool, "weight the force by delta^2 instead of delta"),
    ("kappa_max", float, "bound on |curvature| in the step (inf disables)"),
]
TRAIN_KEYS = [
    ("alpha0", float, "initial learning rate"),
    ("epochs", int, "number of training epochs"),
    ("batch_size", int, "minibatch size"),
    ("seed", int, "random seed for initialization, shuffling and flips"),
    ("scale", int, "backbone width divisor"),
    ("const_lambda", bool, "learn two scalar lambdas instead of lambda maps"),
    ("batch_norm", bool, "use batch normalization"),
    ("flip", bool, "random horizontal/vertical flips"),
    ("eval_every", int, "epochs between validation passes"),
    ("patience", int, "early-stop patience in epochs (none disables)"),
    ("adjoint_clip", float, "per-pixel bound on contour adjoints, in units of the loss gradient (none disables)"),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_value(key, typ, text):
    text = text.strip()
    if text.lower() == "none":
        return None
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise UsageError(f"{key}: expected {typ.__name__}, got {text!r}") from None


def read_config(path):
    """Parse a ``key=value`` file into a dict of typed values."""
    types = {k: t for k, t, _ in EVOLUTION_KEYS + TRAIN_KEYS}
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _parse_value(key, types[key], value)
    return out


def _add_config_flags(p, keys):
    g = p.add_argument_group("settings (override the config file)")
    for key, typ, help_ in keys:
        g.add_argument(f"--{key}", dest=f"cfg_{key}", default=None, metavar=typ.__name__.upper(), help=help_,
                       type=lambda s, k=key, t=typ: _parse_value(k, t, s))


def _settings(args, keys):
    merged = read_config(args.config) if getattr(args, "config", None) else {}
    for key, _, _ in keys:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            merged[key] = v
    return merged


def evolution_config(settings):
    names = {k for k, _, _ in EVOLUTION_KEYS}
    return EvolutionConfig(**{k: v for k, v in settings.items() if k in names and v is not None})


def train_config(settings):
    nullable = {"patience", "adjoint_clip"}
    names = {k for k, _, _ in TRAIN_KEYS}
    kw = {k: v for k, v in settings.items() if k in names and (v is not None or k in nullable)}
    return TrainConfig(evolution=evolution_config(settings), **kw)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args):
    out = _out_dir(args.out)
    path = generate_synthetic(out, args.count, args.size, args.seed, args.style, args.test_count, args.noise)
    print(f"wrote {args.count} samples; manifest {path}")


def cmd_train(args):
    settings = _settings(args, EVOLUTION_KEYS + TRAIN_KEYS)
    cfg = train_config(settings)
    manifest = DatasetManifest.read(args.manifest)
    train_set = manifest.load("train")
    test_set = manifest.load("test")
    out = _out_dir(args.out)
    params, history = train(train_set, cfg, val_samples=test_set or None)
    digest = save_checkpoint(os.path.join(out, "checkpoint.tdac"), params)
    write_history_csv(os.path.join(out, "history.csv"), history)
    print(f"checkpoint sha256 {digest}")
    if test_set:
        agg, reports = evaluate(test_set, params, cfg.evolution)
        write_evaluation_csv(os.path.join(out, "metrics.csv"), test_set, reports)
        print(f"test dice {agg.dice:.4f} miou {agg.miou:.4f} wcov {agg.wcov:.4f} boundf {agg.boundf:.4f}")


def cmd_segment(args):
    evo = evolution_config(_settings(args, EVOLUTION_KEYS))
    params = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    out = _out_dir(args.out)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    phi0, l1, l2, _ = predict(image, params)
    mask, _ = segment(image, params, evo, predict_fn=lambda _img: (phi0, l1, l2))
    save_mask(os.path.join(out, f"{stem}_mask.png"), mask)
    if not args.no_aux:
        save_field(os.path.join(out, f"{stem}_phi0.png"), phi0)
        save_field(os.path.join(out, f"{stem}_lambda1.png"), l1)
        save_field(os.path.join(out, f"{stem}_lambda2.png"), l2)
    print(f"wrote {stem}_mask.png ({int(mask.sum())} foreground pixels)")


def cmd_eval(args):
    evo = evolution_config(_settings(args, EVOLUTION_KEYS))
    params = load_checkpoint(args.checkpoint)
    samples = DatasetManifest.read(args.manifest).load(args.split)
    if not samples:
        raise DataError(f"manifest has no {args.split!r} samples")
    out = _out_dir(args.out)
    agg, reports = evaluate(samples, params, evo)
    write_evaluation_csv(os.path.join(out, "metrics.csv"), samples, reports)
    print(f"dice {agg.dice:.4f} miou {agg.miou:.4f} wcov {agg.wcov:.4f} boundf {agg.boundf:.4f}")


def cmd_sweep(args):
    cfg = train_config(_settings(args, EVOLUTION_KEYS + TRAIN_KEYS))
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    spec = SweepSpec(args.variable, tuple(values), cfg)
    manifest = DatasetManifest.read(args.manifest)
    out = _out_dir(args.out)
    rows = run_sweep(spec, manifest.load("train"), manifest.load("test"),
                     os.path.join(out, f"sweep_{args.variable}.csv"))
    for r in rows:
        print(f"{args.variable}={r.value} miou {r.miou:.4f} boundf {r.boundf:.4f}")


def cmd_gradcheck(args):
    settings = {"L": 5, "f": 2, "mu": 0.2, "nu": 0.1}
    settings.update(_settings(args, EVOLUTION_KEYS))
    cfg = evolution_config(settings)
    image, phi0, maps, _ = gradcheck_fixture(args.size, args.seed)
    base = evolve(phi0, image, maps, cfg, keep_cache=False).phi_final
    report = finite_diff_check(image, phi0, maps, cfg, linear_probe_loss(base, args.seed),
                               probes=args.probes, step=args.step, seed=args.seed)
    print(f"max_rel_error {report.max_rel_error:.3e}")
    print(f"phi0 {report.rel_error_phi0:.3e} lambda1 {report.rel_error_lambda1:.3e} "
          f"lambda2 {report.rel_error_lambda2:.3e}")
    if args.out:
        with open(os.path.join(_out_dir(args.out), "gradcheck.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input", "row", "col", "analytic", "numeric", "rel_error"])
            w.writerows(report.records)
    return EXIT_OK if report.max_rel_error < GRADCHECK_TOLERANCE else EXIT_RUNTIME


def build_parser():
    p = _Parser(prog="tdac", description="Trainable deep active contours on the CPU.")
    p.add_argument("--version", action="version", version=f"tdac {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=200, help="number of images")
    s.add_argument("--size", type=int, default=64, help="image side length, divisible by 8")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--style", choices=STYLES, default="rects", help="shape and contrast style")
    s.add_argument("--test-count", type=int, default=None, help="images tagged test (default: a quarter)")
    s.add_argument("--noise", type=float, default=None, help="Gaussian noise sigma (default 0.05)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the backbone end to end")
    s.add_argument("--manifest", required=True, help="dataset manifest CSV")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="key=value settings file")
    _add_config_flags(s, EVOLUTION_KEYS + TRAIN_KEYS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment one PNG image")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--image", required=True, help="8-bit grayscale or RGB PNG")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-aux", action="store_true", help="skip the phi0/lambda visualizations")
    s.add_argument("--config", help="key=value settings file")
    _add_config_flags(s, EVOLUTION_KEYS)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--manifest", required=True, help="dataset manifest CSV")
    s.add_argument("--split", choices=("train", "test"), default="test", help="split to evaluate")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="key=value settings file")
    _add_config_flags(s, EVOLUTION_KEYS)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="retrain over a list of f or L values")
    s.add_argument("--manifest", required=True, help="dataset manifest CSV")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--variable", choices=sorted(SWEEP_VARIABLES), required=True, help="setting to vary")
    s.add_argument("--values", required=True, help="comma-separated integer values")
    s.add_argument("--config", help="key=value settings file")
    _add_config_flags(s, EVOLUTION_KEYS + TRAIN_KEYS)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="audit the evolution adjoints against finite differences")
    s.add_argument("--size", type=int, default=16, help="fixture side length")
    s.add_argument("--seed", type=int, default=0, help="fixture and probe seed")
    s.add_argument("--probes", type=int, default=50, help="probes per input field")
    s.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    s.add_argument("--out", help="optional output directory for gradcheck.csv")
    s.add_argument("--config", help="key=value settings file")
    _add_config_flags(s, EVOLUTION_KEYS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args)
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FieldError, EvolutionError, AdjointError, PredictorError, TrainingError,
            ValueError, OSError) as exc:
        print(f"tdac: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
