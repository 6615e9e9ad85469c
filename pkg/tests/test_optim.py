import numpy as np
import pytest

from hoifit.errors import ShapeMismatch
from hoifit.optim import AdamState, EmaBank, EmaState, adam_step, ema_normalize


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0, 3.0])
        p2, st = adam_step(p, np.zeros(3), None, lr=0.1)
        assert np.array_equal(p2, p)
        assert st.t == 1

    def test_first_step_sign_update(self):
        g = np.array([3.0, -0.5, 1e-3])
        p2, _ = adam_step(np.zeros(3), g, None, lr=0.1)
        # first-step identity: delta = -lr * g / (|g| + eps)
        assert np.allclose(p2, -0.1 * g / (np.abs(g) + 1e-8), atol=1e-6)

    def test_matches_scalar_replay_oracle(self):
        """Independent scalar recurrence replay of the textbook update."""
        rng = np.random.default_rng(0)
        grads = rng.normal(size=50)
        p = np.array([0.7])
        state = None
        # oracle
        m = v = 0.0
        x = 0.7
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            p, state = adam_step(p, np.array([g]), state, lr)
        assert p[0] == pytest.approx(x, abs=1e-12)

    def test_quadratic_convergence(self):
        x = np.array([1.0])
        state = None
        for _ in range(200):
            x, state = adam_step(x, 2 * x, state, lr=0.1)
        assert abs(x[0]) < 1e-3

    def test_per_element_lr(self):
        g = np.ones(2)
        p, _ = adam_step(np.zeros(2), g, None, lr=np.array([0.1, 0.001]))
        assert p[0] == pytest.approx(-0.1, rel=1e-6)
        assert p[1] == pytest.approx(-0.001, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step(np.zeros(3), np.zeros(4), None, 0.1)


class TestEmaNormalize:
    def test_constant_input_normalizes_to_one(self):
        state = EmaState()
        for _ in range(300):
            out, state = ema_normalize(5.0, state)
        assert out == pytest.approx(1.0, rel=1e-6)

    def test_first_call_sign(self):
        out, _ = ema_normalize(-3.0, EmaState())
        assert out == pytest.approx(-1.0, rel=1e-6)

    def test_doubling_then_decay(self):
        """Replay the scalar recurrence directly as the oracle."""
        state = EmaState()
        for _ in range(500):
            _, state = ema_normalize(1.0, state)
        out, state = ema_normalize(2.0, state)
        # oracle recurrence
        assert out == pytest.approx(2.0 / (0.99 * 1.0 + 0.01 * 2.0), rel=1e-4)
        for _ in range(2000):
            out, state = ema_normalize(2.0, state)
        assert out == pytest.approx(1.0, rel=1e-4)

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            EmaState(decay=1.0)

    def test_bank_independent_names(self):
        bank = EmaBank()
        a = bank.normalize("a", 10.0)
        b = bank.normalize("b", 0.1)
        assert a == pytest.approx(1.0, rel=1e-6)
        assert b == pytest.approx(1.0, rel=1e-6)
