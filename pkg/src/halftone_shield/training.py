"""Standard and adversarial training, the defense x attack evaluation grid,
and the clean-vs-adversarial feature difference analysis."""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, constraint_ok, run_attack
from .model import SmallCnn, extract_features, features, forward, predict, to_nchw
from .transforms import Kind, Transform, apply

log = logging.getLogger(__name__)

ATTACK_COLUMNS = ("pgd_linf", "pgd_l2", "mult_linf", "mult_l2")
CSV_HEADER = ("method", "training", "clean", *ATTACK_COLUMNS, "avg_adv", "avg_all")
IDENTITY = Transform(Kind.IDENTITY)


class TrainingDivergedError(RuntimeError):
    pass


class BallViolationError(AssertionError):
    pass


class Mode(str, enum.Enum):
    STANDARD = "standard"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.STANDARD
    attack: AttackConfig | None = None
    defense: Transform = IDENTITY
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay: float = 0.1
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.ADVERSARIAL and self.attack is None:
            raise ValueError("adversarial training needs an attack config")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def defended_input(defense: Transform, images: np.ndarray) -> np.ndarray:
    out = apply(defense, images)
    if defense.kind is Kind.HALFTONE and not np.all((out == 0.0) | (out == 1.0)):
        raise AssertionError("halftone defense produced non-binary model input")
    return out


def sgd_step(model: SmallCnn, images: np.ndarray, labels: np.ndarray, velocity: dict, lr: float, momentum: float) -> float:
    with ad.Tape():
        params = model.tensors(requires_grad=True)
        loss = ad.softmax_cross_entropy(forward(model, to_nchw(images), params), labels)
    value = float(loss.values)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"loss became {value}; lower the learning rate")
    ad.backward(loss)
    for name, t in params.items():
        v = velocity.get(name)
        v = t.grad if v is None else momentum * v + t.grad
        velocity[name] = v
        model.params[name] = model.params[name] - lr * v
    return value


def train(model: SmallCnn, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> SmallCnn:
    """Return a trained copy of ``model``; the defense is applied inside the loop."""
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            lr *= cfg.lr_decay
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if cfg.flip:
                flips = rng.uniform(size=len(idx)) < 0.5
                x = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
            if cfg.mode is Mode.ADVERSARIAL:
                x = run_attack(
                    model,
                    x,
                    y,
                    cfg.attack,
                    transform=None if cfg.defense.kind is Kind.IDENTITY else cfg.defense,
                    bpda=cfg.defense.obfuscates_gradients,
                    rng=rng,
                ).adversarial
            losses.append(sgd_step(model, defended_input(cfg.defense, x), y, velocity, lr, cfg.momentum))
        log.info("epoch %d/%d loss %.4f lr %.4g", epoch + 1, cfg.epochs, float(np.mean(losses)), lr)
    return model


# ------------------------------------------------------------------- evaluation


@dataclass
class EvalRow:
    method: str
    training: str
    clean: float
    attacks: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def avg_adv(self) -> float | None:
        vals = [self.attacks[k] for k in ATTACK_COLUMNS if k in self.attacks]
        return float(np.mean(vals)) if vals else None

    @property
    def avg_all(self) -> float:
        return float(np.mean([self.clean, *self.attacks.values()]))


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    feature_mse: dict[str, float] = field(default_factory=dict)


def accuracy(model: SmallCnn, defense: Transform, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(predict(model, defended_input(defense, images)) == labels))


def _cell_seed(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def adversarial_examples(
    model: SmallCnn,
    defense: Transform,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    seed: int = 0,
    batch_size: int = 200,
    key: int = 0,
) -> np.ndarray:
    """Adaptive white-box attack on ``model`` behind ``defense``.

    BPDA (identity backward) is used for gradient-obfuscating defenses;
    differentiable defenses are attacked through their exact gradient.
    Every generated example is checked against its budget.
    """
    out = np.empty_like(images)
    transform = None if defense.kind is Kind.IDENTITY else defense
    for b, start in enumerate(range(0, len(labels), batch_size)):
        sl = slice(start, start + batch_size)
        res = run_attack(
            model, images[sl], labels[sl], cfg, transform, defense.obfuscates_gradients, _cell_seed(seed, key, b)
        )
        ok = constraint_ok(images[sl], res, cfg)
        if not ok.all():
            raise BallViolationError(f"{cfg.name}: {int((~ok).sum())} examples left the attack budget")
        out[sl] = res.adversarial
    return out


def evaluate(
    model: SmallCnn,
    defense: Transform,
    images: np.ndarray,
    labels: np.ndarray,
    attacks: dict[str, AttackConfig],
    seed: int = 0,
    training: str = "standard",
    jobs: int = 1,
    method: str | None = None,
) -> EvalRow:
    """Clean and per-attack accuracy (%) of ``model`` behind ``defense``."""
    row = EvalRow(method or defense.name, training, accuracy(model, defense, images, labels))

    def cell(item):
        k, (name, cfg) = item
        adv = adversarial_examples(model, defense, images, labels, cfg, seed, key=k)
        return name, accuracy(model, defense, adv, labels)

    items = list(enumerate(attacks.items()))
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(cell, items))
    else:
        results = [cell(it) for it in items]
    for name, acc in results:
        row.attacks[name] = acc
    row.checked = len(labels) * len(attacks)
    return row


def feature_mse(
    model: SmallCnn,
    clean: np.ndarray,
    adversarial: np.ndarray,
    defense: Transform = IDENTITY,
    transform_clean: bool = False,
) -> float:
    """Mean squared difference between last-conv features of the clean image and
    of the defended adversarial image.  Single images or batches."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {adversarial.shape}")
    ref = apply(defense, clean) if transform_clean else clean
    if clean.ndim == 3:
        diff = extract_features(model, ref) - extract_features(model, apply(defense, adversarial))
    else:
        diff = features(model, to_nchw(ref)) - features(model, to_nchw(apply(defense, adversarial)))
    return float(np.mean(diff**2))


# ---------------------------------------------------------------------- reports


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.2f}"


def report_rows(report: EvalReport) -> list[list[str]]:
    rows = []
    for r in report.rows:
        cells = [r.attacks.get(k) for k in ATTACK_COLUMNS]
        rows.append([r.method, r.training, _fmt(r.clean), *map(_fmt, cells), _fmt(r.avg_adv), _fmt(r.avg_all)])
    return rows


def report_csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(report))
    return buf.getvalue()


def report_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(report_csv_text(report))


def feature_csv_text(values: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "feature_mse"))
    for k, v in values.items():
        w.writerow((k, f"{v:.6f}"))
    return buf.getvalue()


def with_seeded_start(cfg: AttackConfig) -> AttackConfig:
    return replace(cfg, random_start=True)
