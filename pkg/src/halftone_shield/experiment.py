"""Experiment orchestration: config files, model caching, the evaluation grid
and the feature-difference analysis.

Config files are INI-style (``key = value`` under ``[section]`` headers) read
with :mod:`configparser`.  Recognized sections and keys::

    [data]     cifar_dir, n_train, n_test
    [train]    epochs, adv_epochs, adv_warm_start, batch_size, learning_rate, momentum, lr_decay_at
    [eval]     defenses, training, attacks, adv_per_attack, model_dir
    [analyze]  defenses, n_examples, transform_clean
    [attack]   family, norm, epsilon, alpha, epsilon_m, alpha_m, steps, surrogate, random_start, seed

A top-level ``seed`` may be given under ``[DEFAULT]``.  List values are comma
separated.  Command line flags override file values.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, fields

import numpy as np

from . import data as datasets
from .attacks import PRESET_ATTACKS, AttackConfig
from .model import SmallCnn, init, load_checkpoint, save_checkpoint
from .training import (
    ATTACK_COLUMNS,
    EvalReport,
    Mode,
    TrainConfig,
    adversarial_examples,
    evaluate,
    feature_mse,
    train,
    with_seeded_start,
)
from .transforms import Kind, Transform

log = logging.getLogger(__name__)

ALL_DEFENSES = tuple(k.value for k in Kind)
METHOD_NAMES = {"identity": "vanilla"}
SEED_ENV = "HALFTONE_SHIELD_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    cifar_dir: str | None = None
    n_train: int = 5000
    n_test: int = 1000
    epochs: int = 20
    adv_epochs: int = 10
    adv_warm_start: bool = True
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay_at: float = 0.75
    defenses: tuple[str, ...] = ALL_DEFENSES
    training: tuple[str, ...] = ("standard", "adversarial")
    attacks: tuple[str, ...] = ATTACK_COLUMNS
    adv_per_attack: bool = True
    model_dir: str | None = None
    n_examples: int = 1000
    transform_clean: bool = False
    jobs: int = 1

    def __post_init__(self):
        for d in self.defenses:
            if d not in ALL_DEFENSES:
                raise ConfigError(f"unknown defense {d!r}; choose from {', '.join(ALL_DEFENSES)}")
        for a in self.attacks:
            if a not in PRESET_ATTACKS:
                raise ConfigError(f"unknown attack {a!r}; choose from {', '.join(PRESET_ATTACKS)}")
        for t in self.training:
            try:
                Mode(t)
            except ValueError:
                raise ConfigError(f"unknown training mode {t!r}") from None
        if self.n_train < 1 or self.n_test < 0 or self.epochs < 0 or self.adv_epochs < 0:
            raise ConfigError("n_train must be >= 1; n_test, epochs and adv_epochs >= 0")
        if not 0 < self.lr_decay_at <= 1:
            raise ConfigError("lr_decay_at must be in (0, 1]")

    def train_config(self, mode: Mode, defense: Transform, attack: AttackConfig | None = None) -> TrainConfig:
        epochs = self.epochs if mode is Mode.STANDARD else self.adv_epochs
        decay = int(round(epochs * self.lr_decay_at))
        return TrainConfig(
            mode=mode,
            attack=None if attack is None else with_seeded_start(attack),
            defense=defense,
            epochs=epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            lr_decay_epochs=(decay,) if decay < epochs else (),
            seed=self.seed + 1,
        )


# ------------------------------------------------------------------ config files

_SECTION_KEYS = {
    "data": ("cifar_dir", "n_train", "n_test"),
    "train": ("epochs", "adv_epochs", "adv_warm_start", "batch_size", "learning_rate", "momentum", "lr_decay_at"),
    "eval": ("defenses", "training", "attacks", "adv_per_attack", "model_dir"),
    "analyze": ("defenses", "n_examples", "transform_clean"),
}


def read_config(path: str | os.PathLike | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parser


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    kind = str(kinds[name])
    try:
        if kind.startswith("tuple"):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind == "bool":
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip() or None


def experiment_from_config(
    parser: configparser.ConfigParser, section: str, overrides: dict | None = None
) -> ExperimentConfig:
    """Merge ``[data]``, ``[train]`` and the command's own section, then ``overrides``."""
    values: dict = {}
    if parser.defaults().get("seed") is not None:
        values["seed"] = _coerce("seed", parser.defaults()["seed"])
    for sec in ("data", "train", section):
        if not parser.has_section(sec):
            continue
        allowed = set(_SECTION_KEYS.get(sec, ())) | {"seed"}
        for key, raw in parser.items(sec):
            if key in parser.defaults():
                continue
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            values[key] = _coerce(key, raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values)


def resolve_seed(cli_seed: int | None, parser: configparser.ConfigParser | None = None) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if parser is not None and parser.defaults().get("seed"):
        return int(parser.defaults()["seed"])
    return 0


# ------------------------------------------------------------------- run pieces


def load_data(cfg: ExperimentConfig) -> tuple[datasets.Dataset, datasets.Dataset]:
    return datasets.load(cfg.n_train, cfg.n_test, cfg.seed, cfg.cifar_dir)


def _model_key(defense: str, mode: Mode, attack: str | None) -> str:
    return f"{defense}__{mode.value}" + (f"__{attack}" if attack else "")


def get_model(
    cfg: ExperimentConfig,
    train_set: datasets.Dataset,
    defense: str,
    mode: Mode,
    attack: str | None = None,
) -> SmallCnn:
    """Train (or load from ``model_dir``) the model for one table cell.

    With ``adv_warm_start`` an adversarial model starts from the standard
    model of the same defense instead of a fresh initialization.
    """
    path = None
    if cfg.model_dir:
        os.makedirs(cfg.model_dir, exist_ok=True)
        path = os.path.join(cfg.model_dir, f"{_model_key(defense, mode, attack)}__s{cfg.seed}.ckpt")
        if os.path.exists(path):
            log.info("loading %s", path)
            return load_checkpoint(path)
    tcfg = cfg.train_config(mode, Transform(defense), PRESET_ATTACKS[attack] if attack else None)
    log.info("training %s", _model_key(defense, mode, attack))
    if mode is Mode.ADVERSARIAL and cfg.adv_warm_start:
        start = get_model(cfg, train_set, defense, Mode.STANDARD)
    else:
        classes = int(train_set.labels.max()) + 1 if len(train_set) else datasets.NUM_CLASSES
        start = init(cfg.seed, num_classes=max(classes, datasets.NUM_CLASSES))
    model = train(start, train_set.images, train_set.labels, tcfg)
    if path:
        save_checkpoint(model, path)
    return model


def run_eval(cfg: ExperimentConfig) -> EvalReport:
    train_set, test_set = load_data(cfg)
    attacks = {name: with_seeded_start(PRESET_ATTACKS[name]) for name in cfg.attacks}
    report = EvalReport()
    for training in cfg.training:
        mode = Mode(training)
        for defense in cfg.defenses:
            transform = Transform(defense)
            method = METHOD_NAMES.get(defense, defense)
            if mode is Mode.STANDARD:
                model = get_model(cfg, train_set, defense, mode)
                row = evaluate(model, transform, test_set.images, test_set.labels, attacks, cfg.seed, training, cfg.jobs, method)
            else:
                # clean column comes from the PGD-linf trained model; each attack column
                # from a model trained on that attack (or the PGD-linf model throughout)
                base = get_model(cfg, train_set, defense, mode, "pgd_linf")
                row = evaluate(base, transform, test_set.images, test_set.labels, {}, cfg.seed, training, method=method)
                for name, acfg in attacks.items():
                    m = get_model(cfg, train_set, defense, mode, name) if cfg.adv_per_attack else base
                    cell = evaluate(m, transform, test_set.images, test_set.labels, {name: acfg}, cfg.seed, training, method=method)
                    row.attacks[name] = cell.attacks[name]
                    row.checked += cell.checked
            log.info("%s/%s: %s", training, method, row)
            report.rows.append(row)
    return report


def run_analyze(cfg: ExperimentConfig) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Per-defense mean feature MSE between clean images and defended PGD-linf
    examples, each defense with its own standard-trained model.

    Also returns the per-defense mean squared difference map (H/4 x W/4).
    """
    from .model import features, to_nchw
    from .transforms import apply

    train_set, test_set = load_data(cfg)
    n = min(cfg.n_examples, len(test_set))
    x, y = test_set.images[:n], test_set.labels[:n]
    attack = with_seeded_start(PRESET_ATTACKS["pgd_linf"])
    values, maps = {}, {}
    for defense in cfg.defenses:
        transform = Transform(defense)
        model = get_model(cfg, train_set, defense, Mode.STANDARD)
        adv = adversarial_examples(model, transform, x, y, attack, cfg.seed)
        method = METHOD_NAMES.get(defense, defense)
        values[method] = feature_mse(model, x, adv, transform, cfg.transform_clean)
        ref = apply(transform, x) if cfg.transform_clean else x
        diff = features(model, to_nchw(ref)) - features(model, to_nchw(apply(transform, adv)))
        maps[method] = (diff**2).mean(axis=(0, 1))
    return values, maps


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
