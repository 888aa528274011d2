import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advl.network import build_network, forward
from advl.optim import AdamState, adam_step
from advl.tensor import DomainError
from advl.whitebox import (
    EpsAttackConfig, SubstitutionFrame, balance_offset, cw_logit_loss, cw_logit_loss_grad,
    epsilon_attack, epsilon_attack_batch, eps_bounds, image_to_w, make_frame, w_to_image,
)


class TestBounds:
    @pytest.mark.parametrize("x, a, b", [(0.5, 0.4, 0.6), (0.05, 0.0, 0.15), (1.0, 0.9, 1.0)])
    def test_cases(self, x, a, b):
        lo, hi = eps_bounds(np.array([x]), 0.1)
        assert lo[0] == pytest.approx(a, abs=1e-15) and hi[0] == pytest.approx(b, abs=1e-15)

    def test_width(self, rng):
        x = rng.random(500)
        a, b = eps_bounds(x, 0.3)
        assert np.all(a <= x) and np.all(x <= b) and np.all(b - a <= 0.6 + 1e-15)


class TestSubstitution:
    def test_saturation(self):
        f = make_frame(np.array([0.3, 0.0, 1.0]), 0.2)
        np.testing.assert_allclose(w_to_image(np.full(3, 50.0), f), f.b, atol=1e-15)
        np.testing.assert_allclose(w_to_image(np.full(3, -50.0), f), f.a, atol=1e-15)

    @pytest.mark.parametrize("x, eps", [(0.5, 0.1), (0.45, 0.1), (0.6, 0.2), (0.3, 0.25), (0.0, 0.6)])
    def test_zero_maps_to_half(self, x, eps):
        # with u = (b + a - 1) / (b - a), tanh(-arctanh(u)) = -u, so the
        # image is -(b + a - 1) / 2 + (b + a) / 2 = 1/2
        f = make_frame(np.array([x]), eps)
        assert w_to_image(np.zeros(1), f)[0] == pytest.approx(0.5, abs=1e-12)

    def test_zero_outside_box_lands_on_nearest_edge(self):
        f = make_frame(np.array([0.05, 0.95]), 0.1)
        img = w_to_image(np.zeros(2), f)
        assert img[0] == pytest.approx(f.b[0], abs=1e-6)
        assert img[1] == pytest.approx(f.a[1], abs=1e-6)

    def test_midpoint(self):
        f = make_frame(np.array([0.2, 0.7]), 0.1)
        np.testing.assert_allclose(image_to_w((f.a + f.b) / 2, f), -f.c, atol=1e-12)

    def test_round_trip_clean_image(self, rng):
        x = rng.uniform(0.01, 0.99, 300)
        f = make_frame(x, 0.2)
        assert np.max(np.abs(w_to_image(image_to_w(x, f), f) - x)) <= 1e-9

    def test_round_trip_random_interior(self, rng):
        x = rng.random(1000)
        f = make_frame(x, 0.15)
        pts = f.a + (f.b - f.a) * rng.uniform(0.001, 0.999, x.shape)
        assert np.max(np.abs(w_to_image(image_to_w(pts, f), f) - pts)) <= 1e-9

    def test_edges_nudged_inward(self):
        x = np.array([0.0, 1.0])
        f = make_frame(x, 0.2)
        w = image_to_w(x, f)
        assert np.all(np.isfinite(w))
        assert np.max(np.abs(w_to_image(w, f) - x)) <= 1.01e-6

    def test_degenerate_pixel(self):
        f = SubstitutionFrame(np.array([0.4]), np.array([0.4]), balance_offset(np.array([0.4]), np.array([0.4])))
        assert w_to_image(np.array([3.0]), f)[0] == 0.4
        assert image_to_w(np.array([0.4]), f)[0] == 0.0
        with pytest.raises(DomainError):
            image_to_w(np.array([0.5]), f)

    def test_outside_box_rejected(self):
        f = make_frame(np.array([0.5]), 0.1)
        with pytest.raises(DomainError):
            image_to_w(np.array([0.7]), f)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 1), st.floats(1e-3, 1), st.floats(-30, 30))
    def test_box_property(self, x, eps, w):
        f = make_frame(np.array([x]), eps)
        img = w_to_image(np.array([w]), f)[0]
        assert max(x - eps, 0) - 1e-15 <= img <= min(x + eps, 1) + 1e-15
        assert 0 <= img <= 1


class TestLoss:
    def test_success_floor(self):
        assert cw_logit_loss(np.array([1.0, 3.0]), 1, 0.0) == 0.0

    def test_margin(self):
        assert cw_logit_loss(np.array([3.0, 1.0]), 1, 0.0) == 2.0

    def test_unfloored_negative(self):
        assert cw_logit_loss(np.array([1.0, 3.0]), 1, 5.0) == -2.0

    def test_gradient_and_tie_break(self):
        z = np.array([2.0, 0.0, 2.0, 1.0])
        v, g = cw_logit_loss_grad(z, 3, 0.0)
        assert v == 1.0
        np.testing.assert_array_equal(g, [1, 0, 0, -1])

    def test_floor_has_zero_gradient(self):
        _, g = cw_logit_loss_grad(np.array([0.0, 5.0]), 1, 1.0)
        assert not g.any()

    def test_batch(self):
        z = np.array([[1.0, 3.0], [3.0, 1.0]])
        np.testing.assert_array_equal(cw_logit_loss(z, [1, 1]), [0.0, 2.0])


def simulate_adam(g, steps, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam recurrence written out longhand."""
    m = v = 0.0
    w = 0.0
    deltas = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        deltas.append(step)
        w -= step
    return w, deltas


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        w = np.array([0.3, -1.0])
        _, w2 = adam_step(AdamState.zeros_like(w), w, np.zeros(2))
        np.testing.assert_array_equal(w, w2)

    def test_constant_gradient_step_size(self):
        w = np.zeros(1)
        st_ = AdamState.zeros_like(w, lr=0.01)
        for _ in range(500):
            prev = w.copy()
            _, w = adam_step(st_, w, np.array([0.37]))
        ref_w, deltas = simulate_adam(0.37, 500)
        assert abs(abs(w[0] - prev[0]) - 0.01) <= 0.01 * 0.01
        assert abs(deltas[-1] - 0.01) <= 1e-4
        assert w[0] == pytest.approx(ref_w, rel=1e-12)

    def test_coordinatewise(self):
        w = np.zeros(2)
        st_ = AdamState.zeros_like(w)
        for _ in range(5):
            _, w = adam_step(st_, w, np.array([1e-3, 0.0]))
        assert w[1] == 0.0 and w[0] < 0

    def test_masked_rows_frozen(self):
        w = np.zeros((2, 3))
        st_ = AdamState.zeros_like(w)
        _, w = adam_step(st_, w, np.ones((2, 3)), mask=np.array([True, False]))
        assert np.all(w[0] < 0) and np.all(w[1] == 0)


class TestEpsilonAttack:
    def test_target_already_predicted(self, blob_net):
        net, data = blob_net
        x = data.images[0]
        t = int(forward(net, x).logits.argmax())
        r = epsilon_attack(net, x, t, EpsAttackConfig(epsilon_8bit=10))
        assert r.success and r.iterations_used == 0
        # the start image is x up to the inward edge nudge
        assert r.max_pert_8bit <= 255 * 1.0001e-6

    def test_batch_attack_invariants(self, blob_net):
        net, data = blob_net
        xs = data.images[::20]
        preds = forward(net, xs).logits.argmax(1)
        ts = (preds + 1) % 3
        cfg = EpsAttackConfig(epsilon_8bit=120, max_iters=300, learning_rate=0.1, check_box=True)
        res = epsilon_attack_batch(net, xs, ts, cfg)
        for x, t, r in zip(xs, ts, res):
            assert r.max_pert_8bit <= cfg.epsilon_8bit + 1e-6
            assert 0 <= r.adversarial.min() and r.adversarial.max() <= 1
            z = forward(net, r.adversarial).logits
            assert r.success == (int(z.argmax()) == t) == (cw_logit_loss(z, t) <= 0)
        assert sum(r.success for r in res) >= 1

    def test_single_matches_batch(self, blob_net):
        net, data = blob_net
        xs = data.images[:3]
        ts = [2, 0, 1]
        cfg = EpsAttackConfig(epsilon_8bit=80, max_iters=50, learning_rate=0.1)
        batch = epsilon_attack_batch(net, xs, ts, cfg)
        for x, t, rb in zip(xs, ts, batch):
            rs = epsilon_attack(net, x, t, cfg)
            assert rs.iterations_used == rb.iterations_used and rs.success == rb.success
            np.testing.assert_allclose(rs.adversarial, rb.adversarial, atol=1e-9)

    def test_without_abort_runs_full_budget(self, blob_net):
        net, data = blob_net
        r = epsilon_attack(net, data.images[0], 1, EpsAttackConfig(epsilon_8bit=50, max_iters=7,
                                                                   abort_early=False))
        assert r.iterations_used == 7

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EpsAttackConfig(epsilon_8bit=0)
        with pytest.raises(ValueError):
            EpsAttackConfig(kappa=-1)
