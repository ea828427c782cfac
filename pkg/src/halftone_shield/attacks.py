"""White-box attacks: additive PGD, multiplicative (Mult) PGD, and BPDA.

All attacks ascend the untargeted cross-entropy of the model on a batch of
``(N, H, W, C)`` images.  The per-example loss is summed over the batch, so
each example's gradient is independent of the rest of the batch.

When a defense transform sits in front of the model, the forward pass always
runs the real transform.  The backward pass goes through its exact
vector-Jacobian product when ``bpda`` is off, or straight through (identity
surrogate) when it is on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import SmallCnn, forward, from_nchw, to_nchw
from .image import LabeledExample
from .transforms import Transform, apply, vjp

BALL_TOL = 1e-6
RATIO_MASK = 1e-6


class AttackConfigError(ValueError):
    pass


class Family(str, enum.Enum):
    PGD = "pgd"
    MULT = "mult"


class Norm(str, enum.Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class AttackConfig:
    family: Family = Family.PGD
    norm: Norm = Norm.LINF
    epsilon: float = 8 / 255
    alpha: float = 3 / 255
    epsilon_m: float = 1.08
    alpha_m: float = 1.03
    steps: int = 5
    surrogate: Transform | None = None
    random_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "norm", Norm(self.norm))
        if self.steps < 1:
            raise AttackConfigError(f"steps must be >= 1, got {self.steps}")
        if self.family is Family.PGD and (self.epsilon <= 0 or self.alpha <= 0):
            raise AttackConfigError("pgd needs epsilon > 0 and alpha > 0")
        if self.family is Family.MULT and (self.epsilon_m <= 1 or self.alpha_m <= 1):
            raise AttackConfigError("mult needs epsilon_m > 1 and alpha_m > 1")

    @property
    def name(self) -> str:
        return f"{self.family.value}_{self.norm.value}"


PRESET_ATTACKS: dict[str, AttackConfig] = {
    "pgd_linf": AttackConfig(Family.PGD, Norm.LINF, epsilon=8 / 255, alpha=3 / 255, steps=5),
    "pgd_l2": AttackConfig(Family.PGD, Norm.L2, epsilon=1.0, alpha=3.0, steps=5),
    "mult_linf": AttackConfig(Family.MULT, Norm.LINF, epsilon_m=1.08, alpha_m=1.03, steps=5),
    "mult_l2": AttackConfig(Family.MULT, Norm.L2, epsilon_m=1.3, alpha_m=1.03, steps=5),
}


@dataclass
class AttackResult:
    """``adversarial`` has the shape of the attacked input.

    ``constraint_slack`` is budget minus distance per example (negative means
    a violation); ``log_factor`` is the multiplicative field for Mult attacks.
    """

    adversarial: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    constraint_slack: np.ndarray | float = 0.0
    log_factor: np.ndarray | None = None


def loss_and_grad(
    model: SmallCnn,
    images: np.ndarray,
    labels: np.ndarray,
    transform: Transform | None = None,
    bpda: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example loss and input gradient of ``CE(model(transform(images)))``."""
    with ad.Tape():
        x = ad.Tensor(to_nchw(images), requires_grad=True)
        z = x
        if transform is not None:
            seen = apply(transform, images)
            back = None if bpda else (lambda g: to_nchw(vjp(transform, images, from_nchw(g))))
            z = ad.surrogate(x, to_nchw(seen), back)
        logits = forward(model, z)
        loss = ad.softmax_cross_entropy(logits, labels, reduction="sum")
    ad.backward(loss)
    per = -ad.log_softmax(logits.values)[np.arange(len(labels)), labels]
    return per, from_nchw(x.grad)


def _flat_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def _project_l2(delta: np.ndarray, radius: float) -> np.ndarray:
    norm = _flat_norm(delta)
    scale = np.where(norm > radius, radius / np.maximum(norm, 1e-300), 1.0)
    return delta * _bcast(scale, delta)


def _random_l2(rng: np.random.Generator, shape, radius: float) -> np.ndarray:
    d = rng.standard_normal(shape)
    d /= _bcast(np.maximum(_flat_norm(d), 1e-12), d)
    return d * _bcast(radius * rng.uniform(size=shape[0]), d)


def run_attack(
    model: SmallCnn,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    transform: Transform | None = None,
    bpda: bool = True,
    rng: np.random.Generator | int | None = 0,
) -> AttackResult:
    """Attack a batch ``(N, H, W, C)``; dispatches on ``cfg.family``.

    ``cfg.surrogate``, when set and no ``transform`` is passed, names a defense
    to attack with BPDA.
    """
    if transform is None and cfg.surrogate is not None:
        transform, bpda = cfg.surrogate, True
    rng = np.random.default_rng(rng)
    x0 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.family is Family.PGD:
        return _pgd(model, x0, labels, cfg, transform, bpda, rng)
    return _mult(model, x0, labels, cfg, transform, bpda, rng)


def _pgd(model, x0, labels, cfg, transform, bpda, rng) -> AttackResult:
    linf = cfg.norm is Norm.LINF
    x = x0.copy()
    if cfg.random_start:
        if linf:
            x = x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
        else:
            x = x0 + _random_l2(rng, x0.shape, cfg.epsilon)
        x = np.clip(x, 0.0, 1.0)
    trace = []
    for _ in range(cfg.steps):
        loss, g = loss_and_grad(model, x, labels, transform, bpda)
        trace.append(float(loss.mean()))
        if linf:
            x = x + cfg.alpha * np.sign(g)
            x = np.clip(x0 + np.clip(x - x0, -cfg.epsilon, cfg.epsilon), 0.0, 1.0)
        else:
            gn = np.maximum(_flat_norm(g), 1e-12)
            x = x + cfg.alpha * g / _bcast(gn, g)
            x = np.clip(x0 + _project_l2(x - x0, cfg.epsilon), 0.0, 1.0)
    delta = x - x0
    dist = np.abs(delta).reshape(len(x), -1).max(axis=1) if linf else _flat_norm(delta)
    return AttackResult(x, trace, cfg.epsilon - dist)


def mult_budget(cfg: AttackConfig, n: int) -> float:
    """Bound on the log-factor field: per pixel for linf, whole field for l2."""
    if cfg.norm is Norm.LINF:
        return math.log(cfg.epsilon_m)
    return math.log(cfg.epsilon_m) * math.sqrt(n)


def _mult(model, x0, labels, cfg, transform, bpda, rng) -> AttackResult:
    linf = cfg.norm is Norm.LINF
    n = int(np.prod(x0.shape[1:]))
    budget = mult_budget(cfg, n)
    step = math.log(cfg.alpha_m)
    logr = np.zeros_like(x0)
    if cfg.random_start:
        logr = rng.uniform(-budget, budget, size=x0.shape) if linf else _random_l2(rng, x0.shape, budget)
    trace = []
    for _ in range(cfg.steps):
        pre = x0 * np.exp(logr)
        x = np.clip(pre, 0.0, 1.0)
        loss, g = loss_and_grad(model, x, labels, transform, bpda)
        trace.append(float(loss.mean()))
        # chain rule through x = x0 * exp(logr); the clip is treated as identity
        gr = g * pre
        if linf:
            logr = np.clip(logr + step * np.sign(gr), -budget, budget)
        else:
            gn = np.maximum(_flat_norm(gr), 1e-12)
            logr = _project_l2(logr + step * math.sqrt(n) * gr / _bcast(gn, gr), budget)
    x = np.clip(x0 * np.exp(logr), 0.0, 1.0)
    dist = np.abs(logr).reshape(len(x), -1).max(axis=1) if linf else _flat_norm(logr)
    return AttackResult(x, trace, budget - dist, logr)


def constraint_ok(x0: np.ndarray, result: AttackResult, cfg: AttackConfig, tol: float = BALL_TOL) -> np.ndarray:
    """Per-example check that the adversarial batch respects its budget and the unit box."""
    x0 = np.asarray(x0)
    adv = result.adversarial
    n = len(adv)
    box = (adv.reshape(n, -1).min(axis=1) >= 0.0) & (adv.reshape(n, -1).max(axis=1) <= 1.0)
    if cfg.family is Family.PGD:
        delta = (adv - x0).reshape(n, -1)
        dist = np.abs(delta).max(axis=1) if cfg.norm is Norm.LINF else np.sqrt((delta**2).sum(axis=1))
        return box & (dist <= cfg.epsilon + tol)
    if cfg.norm is Norm.LINF:
        mask = x0 > RATIO_MASK
        ratio = np.where(mask, adv / np.where(mask, x0, 1.0), 1.0).reshape(n, -1)
        ok = (ratio >= 1.0 / cfg.epsilon_m - tol) & (ratio <= cfg.epsilon_m + tol)
        return box & ok.all(axis=1)
    budget = mult_budget(cfg, int(np.prod(x0.shape[1:])))
    if result.log_factor is None:
        return box & False
    return box & (_flat_norm(result.log_factor) <= budget * (1 + tol))


# ------------------------------------------------------- single-example wrappers


def _single(model, example: LabeledExample, cfg, transform, bpda, seed) -> AttackResult:
    res = run_attack(model, example.image[None], np.array([example.label]), cfg, transform, bpda, seed)
    return AttackResult(
        res.adversarial[0],
        res.loss_trace,
        float(res.constraint_slack[0]),
        None if res.log_factor is None else res.log_factor[0],
    )


def pgd_linf(model: SmallCnn, example: LabeledExample, cfg: AttackConfig = PRESET_ATTACKS["pgd_linf"], seed=0):
    if cfg.family is not Family.PGD or cfg.norm is not Norm.LINF:
        raise AttackConfigError(f"pgd_linf needs a pgd/linf config, got {cfg.name}")
    return _single(model, example, cfg, None, True, seed)


def pgd_l2(model: SmallCnn, example: LabeledExample, cfg: AttackConfig = PRESET_ATTACKS["pgd_l2"], seed=0):
    if cfg.family is not Family.PGD or cfg.norm is not Norm.L2:
        raise AttackConfigError(f"pgd_l2 needs a pgd/l2 config, got {cfg.name}")
    return _single(model, example, cfg, None, True, seed)


def mult_attack(model: SmallCnn, example: LabeledExample, cfg: AttackConfig = PRESET_ATTACKS["mult_linf"], seed=0):
    if cfg.family is not Family.MULT:
        raise AttackConfigError(f"mult_attack needs a mult config, got {cfg.name}")
    return _single(model, example, cfg, None, True, seed)


def bpda_attack(model: SmallCnn, example: LabeledExample, cfg: AttackConfig, transform: Transform, seed=0):
    """Forward through ``transform``, backward through the identity."""
    return _single(model, example, cfg, transform, True, seed)


def with_random_start(cfg: AttackConfig, on: bool = True) -> AttackConfig:
    return replace(cfg, random_start=on)
