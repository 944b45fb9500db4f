import math

import numpy as np
import pytest

from selectenc import attack as atk
from selectenc.attack import (
    AttackConfig,
    AttackFailed,
    AttackInfeasible,
    invert,
    matching_loss,
    total_variation,
    trace_export,
    trace_import,
)
from selectenc import autodiff as ad
from selectenc.dataio import synth_images
from selectenc.encryption import BOUNDED_NOISE, AttackerView, EncryptionMask, attacker_view, top_s_mask
from selectenc.evalmetrics import mse
from selectenc.models import build, lenet_small, loss_and_grad, onehot


@pytest.fixture(scope="module")
def setup():
    params = build(lenet_small((8, 8, 1), 10), 0)
    img = synth_images(1, 1, 10, (8, 8, 1))[0]
    y = onehot(img.label, 10)
    _, g = loss_and_grad(params, img.pixels, y)
    return params, img.pixels, y, g


def full_view(v):
    return AttackerView(v, np.ones(len(v), dtype=bool))


class TestMatchingLoss:
    def test_perfect_l2_match(self):
        g = np.random.default_rng(0).normal(size=6)
        assert matching_loss(full_view(g), g, "l2") == 0.0

    def test_orthogonal_cosine(self):
        assert matching_loss(full_view([1.0, 0.0]), [0.0, 3.0], "cosine") == 1.0

    def test_masked_l2_loop_oracle(self):
        rng = np.random.default_rng(1)
        g0, cand = rng.normal(size=6), rng.normal(size=6)
        mask = EncryptionMask(np.array([1, 0, 0, 1, 0, 0]), 2 / 6)
        view = attacker_view(g0, mask)
        expect = sum((cand[i] - g0[i]) ** 2 for i in (1, 2, 4, 5))
        assert math.isclose(matching_loss(view, cand, "l2"), expect, rel_tol=1e-14)

    def test_zero_norm_cosine_is_one(self):
        assert matching_loss(full_view([1.0, 2.0]), [0.0, 0.0], "cosine") == 1.0

    def test_no_known_coordinates(self):
        view = attacker_view(np.ones(4), top_s_mask(np.ones(4), 1.0))
        with pytest.raises(AttackInfeasible):
            matching_loss(view, np.ones(4))

    def test_bounded_noise_counts_all_coordinates(self):
        g0 = np.array([1.0, 2.0, 3.0])
        view = attacker_view(g0, EncryptionMask(np.array([0, 1, 0]), 1 / 3), BOUNDED_NOISE, xi=0.5, seed=0)
        expect = float(np.sum((g0 - view.values) ** 2))
        assert math.isclose(matching_loss(view, g0, "l2"), expect, rel_tol=1e-14)

    @pytest.mark.parametrize("matching", ["l2", "cosine"])
    def test_tensor_and_array_agree(self, matching):
        rng = np.random.default_rng(2)
        g0, cand = rng.normal(size=10), rng.normal(size=10)
        view = attacker_view(g0, top_s_mask(np.abs(g0), 0.3))
        t = matching_loss(view, ad.Tensor(cand), matching).item()
        assert math.isclose(t, matching_loss(view, cand, matching), rel_tol=1e-13)


class TestTotalVariation:
    def test_constant_image(self):
        assert total_variation(np.full((4, 4, 3), 0.3)) == 0.0

    def test_two_pixels(self):
        assert total_variation(np.array([[[0.0], [1.0]]])) == 1.0

    def test_double_loop_oracle(self):
        x = np.random.default_rng(3).uniform(size=(4, 4, 2))
        expect = 0.0
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    if i + 1 < 4:
                        expect += abs(x[i + 1, j, c] - x[i, j, c])
                    if j + 1 < 4:
                        expect += abs(x[i, j + 1, c] - x[i, j, c])
        assert math.isclose(total_variation(x), expect, rel_tol=1e-13)
        assert math.isclose(total_variation(ad.Tensor(x)).item(), expect, rel_tol=1e-13)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"restarts": 0}, {"matching": "l1"}, {"alpha_tv": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)

    def test_defaults(self):
        cfg = AttackConfig()
        assert (cfg.matching, cfg.signed_gradients, cfg.step_size, cfg.restarts) == ("cosine", True, 0.1, 5)

    def test_schedule_milestones(self):
        assert atk._milestones(2000) == {750, 1250, 1750}

    def test_restart_seed_is_derived_from_all_three(self):
        a = np.random.default_rng(atk.restart_seed(0, 1, 2)).standard_normal(3)
        b = np.random.default_rng(atk.restart_seed(0, 2, 1)).standard_normal(3)
        assert not np.array_equal(a, b)


class TestInvert:
    def test_full_mask_is_infeasible(self, setup):
        params, _, y, g = setup
        view = attacker_view(g, top_s_mask(np.abs(g.values), 1.0))
        with pytest.raises(AttackInfeasible):
            invert(params, y, view, AttackConfig(iterations=1, restarts=1))

    def test_view_length_checked(self, setup):
        params, _, y, _ = setup
        with pytest.raises(ValueError):
            invert(params, y, full_view(np.ones(3)), AttackConfig(iterations=1, restarts=1))

    def test_result_contract(self, setup):
        params, x0, y, g = setup
        cfg = AttackConfig(iterations=40, restarts=3)
        r = invert(params, y, attacker_view(g, top_s_mask(np.abs(g.values), 0.3)), cfg)
        assert r.x_star.shape == x0.shape
        assert r.x_star.min() >= 0 and r.x_star.max() <= 1
        assert len(r.loss_trace) == 40 and len(r.restart_losses) == 3
        tail = r.loss_trace[-4:]
        assert r.final_rec_loss == min(tail)
        assert r.final_rec_loss == min(r.restart_losses)
        assert r.restart_losses[r.restart_index] == r.final_rec_loss
        envelope = np.minimum.accumulate(r.loss_trace)
        assert np.all(np.diff(envelope) <= 0)

    def test_deterministic(self, setup):
        params, _, y, g = setup
        view = attacker_view(g, top_s_mask(np.abs(g.values), 0.2))
        cfg = AttackConfig(iterations=25, restarts=2, seed=4)
        a, b = invert(params, y, view, cfg), invert(params, y, view, cfg)
        assert a.x_star.tobytes() == b.x_star.tobytes()
        assert a.loss_trace == b.loss_trace

    def test_masked_values_never_read(self, setup):
        params, _, y, g = setup
        mask = top_s_mask(np.abs(g.values), 0.3)
        cfg = AttackConfig(iterations=20, restarts=1)
        base = invert(params, y, attacker_view(g, mask), cfg)
        hidden = mask.bits.astype(bool)
        rng = np.random.default_rng(0)
        for _ in range(3):
            values = np.where(hidden, rng.normal(scale=100, size=g.values.size), g.values)
            view = AttackerView(values, ~hidden)
            r = invert(params, y, view, cfg)
            assert r.x_star.tobytes() == base.x_star.tobytes()
            assert r.loss_trace == base.loss_trace

    def test_diverging_restart_is_skipped(self, setup, monkeypatch, caplog):
        params, _, y, g = setup
        real = atk.objective_and_grad
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            rec, obj, dx = real(*args, **kwargs)
            return (rec, float("nan"), dx) if calls["n"] == 1 else (rec, obj, dx)

        monkeypatch.setattr(atk, "objective_and_grad", flaky)
        r = invert(params, y, full_view(g.values), AttackConfig(iterations=5, restarts=2))
        assert r.restart_index == 1 and math.isnan(r.restart_losses[0])
        assert "restart 0 aborted" in caplog.text

    def test_all_restarts_diverging(self, setup, monkeypatch):
        params, _, y, g = setup
        monkeypatch.setattr(atk, "objective_and_grad", lambda *a, **k: (1.0, float("inf"), np.zeros((8, 8, 1))))
        with pytest.raises(AttackFailed):
            invert(params, y, full_view(g.values), AttackConfig(iterations=3, restarts=2))

    def test_objective_gradient_matches_finite_differences(self, setup):
        params, x0, y, g = setup
        view = attacker_view(g, top_s_mask(np.abs(g.values), 0.3))
        cfg = AttackConfig(matching="cosine", alpha_tv=1e-3)
        x = np.random.default_rng(5).uniform(0.2, 0.8, size=x0.shape)
        _, _, dx = atk.objective_and_grad(params, y, view, x, cfg)
        rng = np.random.default_rng(6)
        for _ in range(5):
            d = rng.normal(size=x.shape)
            h = 1e-6
            fp = atk.objective_and_grad(params, y, view, x + h * d, cfg)[1]
            fm = atk.objective_and_grad(params, y, view, x - h * d, cfg)[1]
            assert math.isclose((fp - fm) / (2 * h), float(np.sum(dx * d)), rel_tol=1e-4)

    def test_unprotected_l2_reconstruction(self, setup):
        params, x0, y, g = setup
        r = invert(params, y, full_view(g.values), AttackConfig(matching="l2", iterations=2000, restarts=1))
        assert r.final_rec_loss < 1e-3
        assert mse(r.x_star, x0) < 0.01


class TestTrace:
    def test_three_rows_with_header(self, setup):
        params, _, y, g = setup
        r = invert(params, y, full_view(g.values), AttackConfig(iterations=3, restarts=1))
        lines = trace_export(r).splitlines()
        assert lines[0] == "iter,rec_loss" and len(lines) == 4

    def test_round_trip_is_bitwise(self, setup, tmp_path):
        params, _, y, g = setup
        r = invert(params, y, full_view(g.values), AttackConfig(iterations=30, restarts=1))
        trace_export(r, tmp_path / "t.csv")
        back = trace_import((tmp_path / "t.csv").read_text())
        assert np.array(back).tobytes() == np.array(r.loss_trace).tobytes()

    def test_import_needs_header(self):
        with pytest.raises(ValueError):
            trace_import("0,1.0\n")
