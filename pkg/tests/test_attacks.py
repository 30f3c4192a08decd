import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advshield.attacks import (
    AttackSpec,
    craft,
    cw,
    fgsm,
    filter_successful,
    load_adv,
    pgd,
    save_adv,
)
from advshield.diffnet import Batch, DiffNet, NetConfig, build_net, predict
from advshield.errors import ConfigError


def identity_net():
    return DiffNet(NetConfig((1, 2, 1), (), 2), [np.eye(2), np.zeros(2)])


def pixels(*rows):
    return np.asarray(rows, dtype=float).reshape(len(rows), 1, 2, 1)


def small_net(seed=0):
    return build_net(NetConfig((4, 4, 1), (12, 6), 3, seed=seed))


def random_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.uniform(0, 1, (n, 4, 4, 1)), rng.integers(0, 3, n))


class TestSpec:
    def test_fgsm_forces_single_step(self):
        s = AttackSpec("fgsm", epsilon=0.2, steps=7, step_size=0.01)
        assert s.steps == 1 and s.step_size == 0.2

    def test_pgd_default_step(self):
        s = AttackSpec("pgd", epsilon=0.08)
        assert s.steps == 10 and s.step_size == pytest.approx(0.02)

    @pytest.mark.parametrize("kw", [dict(method="xyz"), dict(epsilon=-0.1), dict(steps=0),
                                    dict(cw_constant=-1.0), dict(cw_lr=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AttackSpec(**kw)


class TestFgsm:
    def test_zero_budget_identity(self):
        b = random_batch(20)
        adv = fgsm(small_net(), b, 0.0)
        assert adv.x_adv.tobytes() == np.asarray(b.x, float).tobytes()

    def test_linear_hand_case(self):
        # grad = (p0 - 1, p1) has signs (-, +)
        adv = fgsm(identity_net(), Batch(pixels((0.6, 0.4)), np.array([0])), 0.1)
        np.testing.assert_allclose(adv.x_adv.ravel(), [0.5, 0.5], atol=1e-15)

    def test_box_clipping(self):
        # label 1: grad = (p0, p1 - 1) has signs (+, -)
        adv = fgsm(identity_net(), Batch(pixels((0.98, 0.02)), np.array([1])), 0.05)
        np.testing.assert_array_equal(adv.x_adv.ravel(), [1.0, 0.0])

    def test_per_sample_budget(self):
        b = Batch(pixels((0.5, 0.5), (0.5, 0.5)), np.array([0, 0]))
        adv = fgsm(identity_net(), b, np.array([0.1, 0.2]))
        np.testing.assert_allclose(adv.x_adv[:, 0, :, 0], [[0.4, 0.6], [0.3, 0.7]])


class TestPgd:
    def test_single_step_equals_fgsm(self):
        net, b = small_net(1), random_batch(64, 1)
        for eps in (0.0, 0.03, 0.2):
            a = fgsm(net, b, eps).x_adv
            p = pgd(net, b, AttackSpec("pgd", epsilon=eps, steps=1, step_size=eps)).x_adv
            assert np.max(np.abs(a - p)) <= 1e-12

    def test_zero_budget_any_steps(self):
        b = random_batch(16)
        adv = pgd(small_net(), b, AttackSpec("pgd", epsilon=0.0, steps=7, step_size=0.05))
        assert adv.x_adv.tobytes() == np.asarray(b.x, float).tobytes()

    def test_linear_reaches_fgsm_corner(self):
        # identity net, label 0: gradient sign is (-, +) everywhere
        b = Batch(pixels((0.6, 0.4), (0.3, 0.7)), np.array([0, 0]))
        eps, step = 0.1, 0.03
        corner = fgsm(identity_net(), b, eps).x_adv
        steps = int(np.ceil(eps / step))
        adv = pgd(identity_net(), b, AttackSpec("pgd", epsilon=eps, steps=steps, step_size=step))
        np.testing.assert_allclose(adv.x_adv, corner, atol=1e-12)
        short = pgd(identity_net(), b, AttackSpec("pgd", epsilon=eps, steps=steps - 1, step_size=step))
        assert not np.allclose(short.x_adv, corner)

    def test_random_start_deterministic_and_bounded(self):
        net, b = small_net(2), random_batch(30, 2)
        spec = AttackSpec("pgd", epsilon=0.05, steps=3, random_start=True)
        a, c = pgd(net, b, spec, seed=4), pgd(net, b, spec, seed=4)
        assert a.x_adv.tobytes() == c.x_adv.tobytes()
        assert np.max(np.abs(a.x_adv - b.x)) <= 0.05 + 1e-9
        assert pgd(net, b, spec, seed=5).x_adv.tobytes() != a.x_adv.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 0.3), st.integers(1, 5))
    def test_budget_and_box(self, seed, eps, steps):
        b = random_batch(8, seed)
        adv = pgd(small_net(seed % 3), b, AttackSpec("pgd", epsilon=eps, steps=steps))
        assert np.max(np.abs(adv.x_adv - b.x)) <= eps + 1e-9
        assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1


class TestCw:
    def test_zero_constant_returns_inputs(self):
        b = random_batch(20, 3)
        adv = cw(small_net(3), b, AttackSpec("cw", cw_constant=0.0, steps=50))
        assert np.max(np.abs(adv.x_adv - b.x)) <= 1e-6

    def test_already_misclassified_untouched(self):
        # identity net predicts class 0 for (0.7, 0.2); label 1 is already wrong
        b = Batch(pixels((0.7, 0.2)), np.array([1]))
        adv = cw(identity_net(), b, AttackSpec("cw", cw_constant=5.0, steps=30))
        np.testing.assert_array_equal(adv.x_adv, b.x)

    def test_large_constant_crosses_linear_boundary(self):
        # identity net: class 1 iff x1 > x0
        b = Batch(pixels((0.6, 0.4), (0.55, 0.45), (0.3, 0.8)), np.array([0, 0, 1]))
        adv = cw(identity_net(), b, AttackSpec("cw", cw_constant=100.0, steps=100))
        x = adv.x_adv[:, 0, :, 0]
        closed_form = (x[:, 1] > x[:, 0]).astype(int)
        np.testing.assert_array_equal(adv.pred, closed_form)
        np.testing.assert_array_equal(adv.pred, 1 - b.y)
        assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1

    def test_in_box(self):
        b = random_batch(40, 5)
        adv = cw(small_net(5), b, AttackSpec("cw", cw_constant=50.0, steps=40, cw_lr=0.05))
        assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1


class TestFilter:
    def test_no_success(self):
        b = Batch(pixels((0.7, 0.2), (0.1, 0.9)), np.array([0, 1]))
        adv = fgsm(identity_net(), b, 0.0)
        out = filter_successful(adv, identity_net())
        assert out.count == 0 and len(out) == 0

    def test_one_flip(self):
        # eps 0.1 flips (0.55, 0.45) but not (0.9, 0.1)
        b = Batch(pixels((0.55, 0.45), (0.9, 0.1)), np.array([0, 0]))
        adv = fgsm(identity_net(), b, 0.1)
        out = filter_successful(adv, identity_net())
        assert len(out) == 1 and out.count == 1
        np.testing.assert_allclose(out.x.ravel(), [0.55, 0.45])


def test_attacks_pure(tmp_path):
    net, b = small_net(4), random_batch(25, 4)
    for spec in (AttackSpec("fgsm", epsilon=0.1), AttackSpec("pgd", epsilon=0.1),
                 AttackSpec("cw", cw_constant=3.0, steps=20)):
        a, c = craft(net, b, spec), craft(net, b, spec)
        assert a.x_adv.tobytes() == c.x_adv.tobytes()
    save_adv(tmp_path / "adv.adtn", a)
    back = load_adv(tmp_path / "adv.adtn", b.x)
    assert back.x_adv.tobytes() == a.x_adv.tobytes()
    np.testing.assert_array_equal(back.success, a.success)
    np.testing.assert_array_equal(back.pred, predict(net, a.x_adv))
    assert (tmp_path / "adv.adtn.csv").read_text().startswith("index,label,pred,success\n")


def test_subnormal_budget_default_step():
    s = AttackSpec("pgd", epsilon=5e-324)
    assert s.step_size == 5e-324
