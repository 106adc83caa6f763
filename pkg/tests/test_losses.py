import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lstr import ltt
from lstr.losses import (
    backward_through_topk,
    composite_loss,
    fvu_grad,
    fvu_loss,
    ghost_grad,
    ghost_loss,
    skip_grad,
    skip_loss,
    token_ce_grad,
    token_ce_loss,
)
from lstr.ltt import CalibrationStats, init_params, topk_relu
from lstr.numerics import Rng


def params(d=4, alpha=3, seed=0):
    r = Rng(seed)
    p = init_params(d, alpha, 3, CalibrationStats(r.normal(d), r.normal(d), 1.0), r)
    p.W_skip[:] = r.normal((d, d)) * 0.3
    p.b_enc[:] = r.normal(p.d_feat) * 0.5
    return p


def fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        o = x[i]
        x[i] = o + eps
        up = f()
        x[i] = o - eps
        dn = f()
        x[i] = o
        g[i] = (up - dn) / (2 * eps)
    return g


class TestFvu:
    def test_perfect(self):
        Z = Rng(0).normal((8, 3))
        assert fvu_loss(Z, Z) == 0.0

    def test_mean_prediction(self):
        Z = Rng(0).normal((8, 3))
        assert abs(fvu_loss(np.broadcast_to(Z.mean(0), Z.shape), Z) - 1.0) < 1e-9

    def test_two_pass_oracle(self):
        r = Rng(1)
        Z, Zh = r.normal((10, 4)), r.normal((10, 4))
        mean = [sum(Z[i, j] for i in range(10)) / 10 for j in range(4)]
        var = sum(sum((Z[i, j] - mean[j]) ** 2 for i in range(10)) / 10 for j in range(4)) / 4
        mse = sum((Zh[i, j] - Z[i, j]) ** 2 for i in range(10) for j in range(4)) / 40
        assert fvu_loss(Zh, Z) == pytest.approx(mse / var, abs=1e-10)

    @given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), st.integers(0, 1000))
    def test_scale_invariance(self, c, seed):
        r = Rng(seed)
        Z, Zh = r.normal((6, 3)), r.normal((6, 3))
        assert fvu_loss(c * Zh, c * Z) == pytest.approx(fvu_loss(Zh, Z), rel=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            fvu_loss(np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            fvu_loss(np.zeros((4, 3)), np.ones((4, 3)))

    def test_grad(self):
        r = Rng(2)
        Z, Zh = r.normal((5, 3)), r.normal((5, 3))
        np.testing.assert_allclose(fvu_grad(Zh, Z), fd(lambda: fvu_loss(Zh, Z), Zh), rtol=1e-6)

    def test_per_dimension_toggle(self):
        r = Rng(3)
        Z, Zh = r.normal((6, 3)) * [1, 10, 100], r.normal((6, 3))
        expected = np.mean(((Zh - Z) ** 2).mean(0) / Z.var(0))
        assert fvu_loss(Zh, Z, per_dimension=True) == pytest.approx(expected)
        np.testing.assert_allclose(fvu_grad(Zh, Z, True), fd(lambda: fvu_loss(Zh, Z, True), Zh), rtol=1e-6)


class TestSkip:
    def test_exact_affine_fit(self):
        p = params()
        p.W_skip[:] = 0
        z = Rng(0).normal(4)
        p.b_dec[:] = z
        assert skip_loss(Rng(1).normal((5, 4)), np.tile(z, (5, 1)), p) == 0.0

    def test_closed_form(self):
        p = params()
        p.W_skip[:] = 0
        p.b_dec[:] = 0
        Z = Rng(0).normal((5, 4))
        assert skip_loss(Rng(1).normal((5, 4)), Z, p) == pytest.approx(np.mean(np.sum(Z**2, 1)))

    def test_grads(self):
        p = params()
        r = Rng(4)
        H, Z = r.normal((5, 4)), r.normal((5, 4))
        g = skip_grad(H, Z, p)
        f = lambda: skip_loss(H, Z, p)
        np.testing.assert_allclose(g["W_skip"], fd(f, p.W_skip), rtol=1e-5)
        np.testing.assert_allclose(g["b_dec"], fd(f, p.b_dec), rtol=1e-5)
        np.testing.assert_allclose(g["H"], fd(f, H), rtol=1e-5)


class TestGhost:
    def setup_case(self, seed=0):
        p = params(seed=seed)
        r = Rng(seed + 10)
        C = r.normal((6, 4))
        pre = C @ p.W_enc.T + p.b_enc
        R = r.normal((6, 4))
        dead = np.zeros(p.d_feat, bool)
        dead[::2] = True
        return p, C, pre, R, dead

    def test_no_dead(self):
        p, C, pre, R, _ = self.setup_case()
        dead = np.zeros(p.d_feat, bool)
        assert ghost_loss(pre, dead, R, p) == pytest.approx(np.mean(np.sum(R**2, 1)))
        g = ghost_grad(pre, C, dead, R, p)
        assert all(not np.any(v) for v in g.values())

    def test_all_dead_inactive(self):
        p, C, pre, R, _ = self.setup_case()
        pre = -np.abs(pre)
        dead = np.ones(p.d_feat, bool)
        assert ghost_loss(pre, dead, R, p) == pytest.approx(np.mean(np.sum(R**2, 1)))
        assert not np.any(ghost_grad(pre, C, dead, R, p)["W_dec"])

    @pytest.mark.parametrize("seed", range(5))
    def test_grads_and_isolation(self, seed):
        p, C, pre, R, dead = self.setup_case(seed)

        def f():
            return ghost_loss(C @ p.W_enc.T + p.b_enc, dead, R, p)

        g = ghost_grad(pre, C, dead, R, p)
        np.testing.assert_allclose(g["W_enc"], fd(f, p.W_enc), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(g["b_enc"], fd(f, p.b_enc), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(g["W_dec"], fd(f, p.W_dec), rtol=1e-5, atol=1e-9)
        assert np.all(g["W_enc"][~dead] == 0) and np.all(g["b_enc"][~dead] == 0)
        assert np.all(g["W_dec"][:, ~dead] == 0)
        assert set(g) == {"W_dec", "W_enc", "b_enc"}

    def test_mask_length(self):
        p, C, pre, R, _ = self.setup_case()
        with pytest.raises(ValueError):
            ghost_loss(pre, np.ones(3, bool), R, p)


class TestTokenCe:
    def test_uniform(self):
        assert token_ce_loss(np.zeros(21), [4]) == pytest.approx(math.log(21))

    def test_dominant_margin(self):
        vals = [token_ce_loss(np.eye(5)[2] * m, [2]) for m in (1, 10, 50)]
        assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-20

    def test_grad(self):
        lg = Rng(0).normal((3, 6))
        t = [1, 5, 0]
        g = token_ce_grad(lg, t)
        np.testing.assert_allclose(g, fd(lambda: token_ce_loss(lg, t), lg), rtol=1e-6, atol=1e-10)
        p = np.exp(lg) / np.exp(lg).sum(1, keepdims=True)
        np.testing.assert_allclose(g * 3, p - np.eye(6)[t], atol=1e-12)

    def test_target_range(self):
        with pytest.raises(ValueError):
            token_ce_loss(np.zeros(4), [4])


class TestComposite:
    def test_weights_off(self):
        assert composite_loss(0.3, 5, 7, 9, 0, 0, 0).total == 0.3

    def test_zero(self):
        assert composite_loss(0, 0, 0, 0, 0.1, 0.1, 1.0).total == 0.0

    @given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 2), min_size=3, max_size=3))
    def test_sum(self, parts, lams):
        b = composite_loss(*parts, *lams)
        assert b.total == pytest.approx(parts[0] + lams[0] * parts[1] + lams[1] * parts[2] + lams[2] * parts[3],
                                        abs=1e-12, rel=1e-12)
        assert b.lambdas == tuple(lams)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            composite_loss(0, 0, 0, 0, -0.1, 0, 0)


class TestSte:
    def test_identity_when_all_active(self):
        pre = np.abs(Rng(0).normal(6)) + 0.1
        g = Rng(1).normal(6)
        np.testing.assert_array_equal(backward_through_topk(g, topk_relu(pre, 6)), g)

    def test_empty_code(self):
        g = Rng(1).normal(4)
        assert not np.any(backward_through_topk(g, topk_relu(-np.ones(4), 2)))

    def test_passthrough_keeps_all_positive(self):
        pre = np.array([3.0, 2.0, 1.0, -1.0])
        g = np.ones(4)
        assert backward_through_topk(g, topk_relu(pre, 1)).tolist() == [1, 0, 0, 0]
        assert backward_through_topk(g, topk_relu(pre, 1), "passthrough").tolist() == [1, 1, 1, 0]
        with pytest.raises(ValueError):
            backward_through_topk(g, topk_relu(pre, 1), "soft")

    def test_end_to_end_encoder_grad(self):
        """dFVU/dW_enc through the masked STE, on a perturbation-stable active set."""
        p = params(d=4, alpha=4, seed=3)
        r = Rng(3)
        H, Z = r.normal((6, 4)), r.normal((6, 4))
        k = 3
        bc = ltt.forward_batch(p, H, k)
        g = fvu_grad(bc.z_hat, Z)
        dS = g @ p.W_dec
        ana = np.stack([backward_through_topk(dS[i], topk_relu(bc.pre[i], k)) for i in range(6)]).T @ bc.centered
        eps = 1e-6
        for idx in [(0, 0), (3, 2), (7, 1), (11, 3), (15, 0)]:
            o = p.W_enc[idx]
            vals = []
            for s in (1, -1):
                p.W_enc[idx] = o + s * eps
                b2 = ltt.forward_batch(p, H, k)
                assert np.array_equal(b2.mask, bc.mask)
                vals.append(fvu_loss(b2.z_hat, Z))
            p.W_enc[idx] = o
            num = (vals[0] - vals[1]) / (2 * eps)
            assert abs(num - ana[idx]) <= 1e-4 * max(abs(num), abs(ana[idx])) + 1e-10
