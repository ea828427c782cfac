import math

import numpy as np
import pytest

from halftone_shield import attacks
from halftone_shield.attacks import (
    PRESET_ATTACKS,
    AttackConfig,
    AttackConfigError,
    bpda_attack,
    constraint_ok,
    mult_attack,
    mult_budget,
    pgd_l2,
    pgd_linf,
    run_attack,
    with_random_start,
)
from halftone_shield.image import LabeledExample
from halftone_shield.model import init, predict
from halftone_shield.transforms import make

rng = np.random.default_rng(21)


def dead_model():
    model = init(0)
    model.params["dense.weight"][:] = 0.0
    return model


def interior_batch(n=3, lo=0.2, hi=0.8):
    return rng.uniform(lo, hi, size=(n, 8, 8, 3))


@pytest.fixture
def constant_gradient(monkeypatch):
    """Replace the loss gradient with a fixed field."""

    def install(sign=1.0):
        def fake(model, images, labels, transform=None, bpda=True):
            return np.zeros(len(images)), np.full(images.shape, sign)

        monkeypatch.setattr(attacks, "loss_and_grad", fake)

    return install


@pytest.mark.parametrize("name", list(PRESET_ATTACKS))
def test_zero_gradient_is_fixed_point(name):
    x = interior_batch()
    res = run_attack(dead_model(), x, [0, 1, 2], PRESET_ATTACKS[name])
    assert np.array_equal(res.adversarial, x)


def test_pgd_linf_single_step(constant_gradient):
    constant_gradient(+1.0)
    x = interior_batch(lo=0.1, hi=0.99)
    cfg = AttackConfig("pgd", "linf", epsilon=8 / 255, alpha=3 / 255, steps=1)
    res = run_attack(None, x, [0, 0, 0], cfg)
    assert np.allclose(res.adversarial, np.clip(x + 3 / 255, 0, 1), atol=1e-15)
    big_step = AttackConfig("pgd", "linf", epsilon=2 / 255, alpha=3 / 255, steps=1)
    res = run_attack(None, x, [0, 0, 0], big_step)
    assert np.allclose(res.adversarial, np.clip(x + 2 / 255, 0, 1), atol=1e-15)


def test_mult_linf_single_step(constant_gradient):
    constant_gradient(+1.0)
    x = interior_batch(lo=0.1, hi=0.99)
    cfg = AttackConfig("mult", "linf", epsilon_m=1.08, alpha_m=1.03, steps=1)
    res = run_attack(None, x, [0, 0, 0], cfg)
    assert np.allclose(res.adversarial, np.clip(x * 1.03, 0, 1), atol=1e-14)


def test_mult_linf_saturates_at_budget(constant_gradient):
    constant_gradient(-1.0)
    x = interior_batch()
    res = run_attack(None, x, [0, 0, 0], AttackConfig("mult", "linf", epsilon_m=1.08, alpha_m=1.03, steps=5))
    assert np.allclose(res.adversarial, x / 1.08, atol=1e-14)


def test_pgd_l2_lands_on_sphere(constant_gradient):
    constant_gradient(+1.0)
    x = interior_batch(lo=0.3, hi=0.6)  # no clamping at radius 1 with 192 pixels
    res = run_attack(None, x, [0, 0, 0], AttackConfig("pgd", "l2", epsilon=1.0, alpha=3.0, steps=1))
    norms = np.sqrt(((res.adversarial - x) ** 2).reshape(3, -1).sum(axis=1))
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_mult_l2_budget(constant_gradient):
    constant_gradient(+1.0)
    x = interior_batch(lo=0.3, hi=0.6)
    cfg = AttackConfig("mult", "l2", epsilon_m=1.3, alpha_m=1.03, steps=20)
    res = run_attack(None, x, [0, 0, 0], cfg)
    n = x[0].size
    assert mult_budget(cfg, n) == pytest.approx(math.log(1.3) * math.sqrt(n))
    norms = np.sqrt((res.log_factor**2).reshape(3, -1).sum(axis=1))
    assert np.allclose(norms, mult_budget(cfg, n), rtol=1e-12)
    assert constraint_ok(x, res, cfg).all()


@pytest.mark.parametrize("name", list(PRESET_ATTACKS))
@pytest.mark.parametrize("start", [False, True])
def test_ball_invariants_on_real_model(trained_model, small_set, name, start):
    _, test = small_set
    x, y = test.images[:40], test.labels[:40]
    cfg = with_random_start(PRESET_ATTACKS[name], start)
    res = run_attack(trained_model, x, y, cfg, rng=5)
    assert constraint_ok(x, res, cfg).all()
    assert res.adversarial.min() >= 0.0 and res.adversarial.max() <= 1.0
    delta = (res.adversarial - x).reshape(len(x), -1)
    if name == "pgd_linf":
        assert np.abs(delta).max() <= 8 / 255 + 1e-6
    elif name == "pgd_l2":
        assert np.sqrt((delta**2).sum(axis=1)).max() <= 1.0 + 1e-6
    elif name == "mult_linf":
        mask = x > 1e-6
        ratio = res.adversarial[mask] / x[mask]
        assert ratio.min() >= 1 / 1.08 - 1e-6 and ratio.max() <= 1.08 + 1e-6


def test_constraint_ok_flags_violations():
    x = interior_batch(2)
    cfg = PRESET_ATTACKS["pgd_linf"]
    bad = x.copy()
    bad[1, 0, 0, 0] += 9 / 255
    ok = constraint_ok(x, attacks.AttackResult(bad), cfg)
    assert ok.tolist() == [True, False]


@pytest.mark.parametrize("name", list(PRESET_ATTACKS))
def test_bpda_identity_is_bit_exact(trained_model, small_set, name):
    _, test = small_set
    cfg = with_random_start(PRESET_ATTACKS[name])
    for i in range(3):
        ex = LabeledExample(test.images[i], int(test.labels[i]))
        plain = attacks._single(trained_model, ex, cfg, None, True, seed=i)
        bpda = bpda_attack(trained_model, ex, cfg, make("identity"), seed=i)
        assert np.array_equal(plain.adversarial, bpda.adversarial)


def test_attacks_are_deterministic(trained_model, small_set):
    _, test = small_set
    cfg = with_random_start(PRESET_ATTACKS["pgd_l2"])
    a = run_attack(trained_model, test.images[:10], test.labels[:10], cfg, rng=3)
    b = run_attack(trained_model, test.images[:10], test.labels[:10], cfg, rng=3)
    assert np.array_equal(a.adversarial, b.adversarial)


def test_attack_increases_loss(trained_model, small_set):
    _, test = small_set
    res = run_attack(trained_model, test.images[:50], test.labels[:50], PRESET_ATTACKS["pgd_linf"])
    assert res.loss_trace[-1] > res.loss_trace[0]


def test_budget_is_monotone(trained_model, small_set):
    _, test = small_set
    x, y = test.images, test.labels

    def robust(eps):
        cfg = AttackConfig("pgd", "linf", epsilon=eps, alpha=3 / 255, steps=5)
        return np.mean(predict(trained_model, run_attack(trained_model, x, y, cfg).adversarial) == y)

    assert robust(8 / 255) <= robust(4 / 255)


def test_bpda_against_bit_depth_lowers_accuracy(trained_model, small_set):
    _, test = small_set
    x, y = test.images[:100], test.labels[:100]
    defense = make("bit_depth")
    clean = np.mean(predict(trained_model, defense(x)) == y)
    adv = run_attack(trained_model, x, y, PRESET_ATTACKS["pgd_linf"], transform=defense, bpda=True).adversarial
    assert np.mean(predict(trained_model, defense(adv)) == y) <= clean


def test_surrogate_field_selects_bpda(trained_model, small_set):
    _, test = small_set
    x, y = test.images[:5], test.labels[:5]
    ht = make("halftone")
    cfg = AttackConfig(surrogate=ht)
    via_cfg = run_attack(trained_model, x, y, cfg)
    explicit = run_attack(trained_model, x, y, AttackConfig(), transform=ht, bpda=True)
    assert np.array_equal(via_cfg.adversarial, explicit.adversarial)


def test_single_example_wrappers(trained_model, small_set):
    _, test = small_set
    ex = LabeledExample(test.images[0], int(test.labels[0]))
    for fn in (pgd_linf, pgd_l2, mult_attack):
        res = fn(trained_model, ex)
        assert res.adversarial.shape == ex.image.shape
        assert res.constraint_slack >= -1e-6
    with pytest.raises(AttackConfigError):
        pgd_linf(trained_model, ex, PRESET_ATTACKS["pgd_l2"])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"steps": 0},
        {"epsilon": 0.0},
        {"family": "mult", "epsilon_m": 1.0},
        {"family": "mult", "alpha_m": 0.9},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(AttackConfigError):
        AttackConfig(**kwargs)


def test_preset_settings():
    p = PRESET_ATTACKS
    assert (p["pgd_linf"].epsilon, p["pgd_linf"].alpha) == (8 / 255, 3 / 255)
    assert (p["pgd_l2"].epsilon, p["pgd_l2"].alpha) == (1.0, 3.0)
    assert (p["mult_linf"].epsilon_m, p["mult_linf"].alpha_m) == (1.08, 1.03)
    assert (p["mult_l2"].epsilon_m, p["mult_l2"].alpha_m) == (1.3, 1.03)
    assert all(c.steps == 5 and not c.random_start for c in p.values())
