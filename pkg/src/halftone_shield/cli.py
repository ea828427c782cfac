"""Command line entry point: ``halftone-shield <subcommand> ...``.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import experiment as xp
from .attacks import PRESET_ATTACKS, AttackConfig, AttackConfigError, constraint_ok, run_attack
from .halftone import floyd_steinberg
from .image import ImageFormatError, load_ppm, save_ppm
from .model import CheckpointError, load_checkpoint, predict, save_checkpoint
from .training import BallViolationError, Mode, TrainingDivergedError, feature_csv_text, report_csv
from .transforms import DEFAULT_PARAMS, Kind, Transform, TransformConfigError, apply

DEFAULTS = xp.ExperimentConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.HelpFormatter):
    # append real defaults only; None/False mean "unset" and flags that already
    # describe their default are left alone
    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, False, argparse.SUPPRESS) or "default" in text or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)".lstrip()


def _fmt():
    return _HelpFormatter


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${xp.SEED_ENV}, then the config, then 0)")
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    p = _Parser(
        prog="halftone-shield",
        description="Error-diffusion halftoning as an adversarial defense: transforms, attacks, training, evaluation.",
        epilog="exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure",
        formatter_class=_fmt(),
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    h = sub.add_parser("halftone", parents=[common], formatter_class=_fmt(), help="Floyd-Steinberg halftone a PGM/PPM")
    h.add_argument("--in", dest="input", required=True, help="input P5/P6 image")
    h.add_argument("--out", required=True, help="output image")

    t = sub.add_parser("transform", parents=[common], formatter_class=_fmt(), help="apply a defense transform to an image")
    t.add_argument("--kind", required=True, choices=[k.value for k in Kind])
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--out", required=True)
    blur, nlm = DEFAULT_PARAMS[Kind.GAUSSIAN_BLUR], DEFAULT_PARAMS[Kind.NON_LOCAL_MEANS]
    t.add_argument("--kernel-size", type=int, default=blur["kernel_size"], help="gaussian_blur")
    t.add_argument("--sigma", type=float, default=blur["sigma"], help="gaussian_blur")
    t.add_argument("--quality", type=int, default=DEFAULT_PARAMS[Kind.JPEG_LIKE]["quality"], help="jpeg_like")
    t.add_argument("--bits", type=int, default=DEFAULT_PARAMS[Kind.BIT_DEPTH]["bits"], help="bit_depth")
    t.add_argument("--patch-radius", type=int, default=nlm["patch_radius"], help="non_local_means")
    t.add_argument("--search-radius", type=int, default=nlm["search_radius"], help="non_local_means")
    t.add_argument("--h-filter", type=float, default=nlm["h_filter"], help="non_local_means")

    a = sub.add_parser("attack", parents=[common], formatter_class=_fmt(), help="attack one image or a test set")
    a.add_argument("--model", required=True, help="checkpoint file")
    a.add_argument("--attack", default="pgd_linf", choices=list(PRESET_ATTACKS), help="preset attack settings")
    a.add_argument("--defense", default="identity", choices=[k.value for k in Kind], help="defense in front of the model")
    a.add_argument("--steps", type=int, default=None, help="override the preset step count")
    a.add_argument("--random-start", action=argparse.BooleanOptionalAction, default=None)
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="single P6 image to attack (needs --label)")
    src.add_argument("--n-test", type=int, help="attack the first N test images of the dataset")
    a.add_argument("--label", type=int, default=None, help="true class of --in")
    a.add_argument("--out", default=None, help="where to write the adversarial image")
    a.add_argument("--cifar-dir", default=None)

    tr = sub.add_parser("train", parents=[common], formatter_class=_fmt(), help="train one model")
    tr.add_argument("--out", required=True, help="checkpoint file to write")
    tr.add_argument("--defense", default="identity", choices=[k.value for k in Kind])
    tr.add_argument("--mode", default="standard", choices=[m.value for m in Mode])
    tr.add_argument("--attack", default="pgd_linf", choices=list(PRESET_ATTACKS), help="attack used in adversarial mode")
    _experiment_flags(tr)

    ev = sub.add_parser("eval", parents=[common], formatter_class=_fmt(), help="defense x attack accuracy table")
    ev.add_argument("--out", required=True, help="CSV file to write")
    ev.add_argument("--defenses", default=None, help=f"comma list (default: {','.join(DEFAULTS.defenses)})")
    ev.add_argument("--training", default=None, help=f"comma list (default: {','.join(DEFAULTS.training)})")
    ev.add_argument("--attacks", default=None, help=f"comma list (default: {','.join(DEFAULTS.attacks)})")
    ev.add_argument("--adv-per-attack", action=argparse.BooleanOptionalAction, default=None,
                    help=f"adversarially train one model per attack column (default: {DEFAULTS.adv_per_attack})")
    ev.add_argument("--model-dir", default=None, help="cache trained checkpoints here")
    ev.add_argument("--jobs", type=int, default=1, help="parallel attack columns")
    _experiment_flags(ev)

    an = sub.add_parser("analyze", parents=[common], formatter_class=_fmt(), help="feature-difference analysis")
    an.add_argument("--out", required=True, help="CSV of per-defense feature MSE")
    an.add_argument("--defenses", default=None, help=f"comma list (default: {','.join(DEFAULTS.defenses)})")
    an.add_argument("--n-examples", type=int, default=None, help=f"test images used (default: {DEFAULTS.n_examples})")
    an.add_argument("--transform-clean", action=argparse.BooleanOptionalAction, default=None,
                    help="also pass the clean image through the defense")
    an.add_argument("--maps-dir", default=None, help="write per-defense difference maps as PGM here")
    an.add_argument("--model-dir", default=None, help="cache trained checkpoints here")
    _experiment_flags(an)
    return p


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    d = DEFAULTS
    p.add_argument("--cifar-dir", default=None, help="directory of CIFAR-10 .bin batches (synthetic data if unset)")
    p.add_argument("--n-train", type=int, default=None, help=f"training images (default: {d.n_train})")
    p.add_argument("--n-test", type=int, default=None, help=f"test images (default: {d.n_test})")
    p.add_argument("--epochs", type=int, default=None, help=f"standard training epochs (default: {d.epochs})")
    p.add_argument("--adv-epochs", type=int, default=None, help=f"adversarial training epochs (default: {d.adv_epochs})")
    p.add_argument("--adv-warm-start", action=argparse.BooleanOptionalAction, default=None,
                   help=f"start adversarial training from the standard model (default: {d.adv_warm_start})")
    p.add_argument("--batch-size", type=int, default=None, help=f"minibatch size (default: {d.batch_size})")
    p.add_argument("--learning-rate", type=float, default=None, help=f"initial SGD step size (default: {d.learning_rate})")
    p.add_argument("--momentum", type=float, default=None, help=f"SGD momentum (default: {d.momentum})")


def _split(v: str | None):
    return None if v is None else tuple(s.strip() for s in v.split(",") if s.strip())


def _experiment(args, section: str) -> xp.ExperimentConfig:
    parser = xp.read_config(args.config)
    overrides = {
        "seed": xp.resolve_seed(args.seed, parser),
        "cifar_dir": args.cifar_dir,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "epochs": args.epochs,
        "adv_epochs": args.adv_epochs,
        "adv_warm_start": args.adv_warm_start,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
    }
    for name in ("defenses", "training", "attacks"):
        if hasattr(args, name):
            overrides[name] = _split(getattr(args, name))
    for name in ("adv_per_attack", "model_dir", "jobs", "n_examples", "transform_clean"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    return xp.experiment_from_config(parser, section, overrides)


# ------------------------------------------------------------------ commands


def cmd_halftone(args) -> None:
    save_ppm(floyd_steinberg(load_ppm(args.input)), args.out)


def cmd_transform(args) -> None:
    names = {
        Kind.GAUSSIAN_BLUR: ("kernel_size", "sigma"),
        Kind.NON_LOCAL_MEANS: ("patch_radius", "search_radius", "h_filter"),
        Kind.JPEG_LIKE: ("quality",),
        Kind.BIT_DEPTH: ("bits",),
    }
    kind = Kind(args.kind)
    transform = Transform(kind, {n: getattr(args, n) for n in names.get(kind, ())})
    save_ppm(apply(transform, load_ppm(args.input)), args.out)


def _attack_config(args, parser) -> AttackConfig:
    cfg = PRESET_ATTACKS[args.attack]
    values = {}
    if parser.has_section("attack"):
        sec = parser["attack"]
        for key in ("epsilon", "alpha", "epsilon_m", "alpha_m"):
            if key in sec:
                values[key] = sec.getfloat(key)
        if "steps" in sec:
            values["steps"] = sec.getint("steps")
        if "random_start" in sec:
            values["random_start"] = sec.getboolean("random_start")
        if "family" in sec or "norm" in sec:
            values["family"] = sec.get("family", cfg.family.value)
            values["norm"] = sec.get("norm", cfg.norm.value)
        if sec.get("surrogate"):
            values["surrogate"] = Transform(sec.get("surrogate"))
    if args.steps is not None:
        values["steps"] = args.steps
    if args.random_start is not None:
        values["random_start"] = args.random_start
    return AttackConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, **values})


def cmd_attack(args) -> None:
    parser = xp.read_config(args.config)
    seed = xp.resolve_seed(args.seed, parser)
    if parser.has_section("attack") and args.seed is None and "seed" in parser["attack"]:
        seed = parser["attack"].getint("seed")
    cfg = _attack_config(args, parser)
    model = load_checkpoint(args.model)
    defense = Transform(args.defense)
    transform = None if defense.kind is Kind.IDENTITY else defense
    if args.input is not None:
        if args.label is None:
            raise UsageError("--in requires --label")
        x = load_ppm(args.input)[None]
        y = np.array([args.label])
    else:
        _, test = xp.load_data(xp.ExperimentConfig(seed=seed, n_train=1, n_test=args.n_test, cifar_dir=args.cifar_dir))
        x, y = test.images, test.labels
    res = run_attack(model, x, y, cfg, transform, defense.obfuscates_gradients, seed)
    ok = constraint_ok(x, res, cfg)
    seen = apply(defense, res.adversarial)
    acc = 100.0 * float(np.mean(predict(model, seen) == y))
    print(f"attack={cfg.name} defense={defense.name} examples={len(y)} robust_accuracy={acc:.2f} "
          f"budget_ok={int(ok.sum())}/{len(ok)} final_loss={res.loss_trace[-1]:.4f}")
    if args.out:
        save_ppm(res.adversarial[0], args.out)


def cmd_train(args) -> None:
    cfg = _experiment(args, "train")
    train_set, _ = xp.load_data(cfg)
    mode = Mode(args.mode)
    model = xp.get_model(cfg, train_set, args.defense, mode, args.attack if mode is Mode.ADVERSARIAL else None)
    save_checkpoint(model, args.out)


def cmd_eval(args) -> None:
    cfg = _experiment(args, "eval")
    report_csv(xp.run_eval(cfg), args.out)


def cmd_analyze(args) -> None:
    cfg = _experiment(args, "analyze")
    values, maps = xp.run_analyze(cfg)
    with open(args.out, "w", newline="") as fh:
        fh.write(feature_csv_text(values))
    if args.maps_dir:
        os.makedirs(args.maps_dir, exist_ok=True)
        top = max((m.max() for m in maps.values()), default=0.0) or 1.0
        for name, m in maps.items():
            save_ppm(m / top, os.path.join(args.maps_dir, f"{name}.pgm"))


COMMANDS = {
    "halftone": cmd_halftone,
    "transform": cmd_transform,
    "attack": cmd_attack,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}

VALIDATION_ERRORS = (UsageError, xp.ConfigError, TransformConfigError, AttackConfigError)
RUNTIME_ERRORS = (OSError, ImageFormatError, CheckpointError, TrainingDivergedError, BallViolationError)


def run(argv: list[str] | None = None) -> int:
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s",
        )
        COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
