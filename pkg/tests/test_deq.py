"""Training loss, the equilibrium solve, the Jacobian-free gradient and fine-tuning."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from instances import denoiser_like_params, sinusoid_pair, tiny_configs
from oracles import central_difference, generic_field, rel_err
from pnpreg.data import make_pairs
from pnpreg.deq import (
    LOG_COLUMNS,
    DeqConfig,
    deq_forward,
    deq_loss,
    deq_loss_field_gradient,
    deq_operator_config,
    finetune,
    iterate_loss,
    iterate_loss_gradient,
    jfb_gradient,
    paper_deq_config,
    write_log_csv,
)
from pnpreg.denoiser import ConvNetParams, init_convnet
from pnpreg.metrics import jacobian_loss, ncc, smoothness
from pnpreg.pirate import desk_config, pirate_update
from pnpreg.warp import warp


def random_images(rng, dims):
    m = rng.random(dims)
    return warp(m, rng.uniform(-0.6, 0.6, dims + (len(dims),))), m


class TestLoss:
    def test_identity_on_identical_images(self, rng):
        f = rng.random((8, 8))
        total, terms = deq_loss(np.zeros((8, 8, 2)), f, f, DeqConfig(ncc_window=3))
        # only the denominator stabiliser in flat windows keeps this above zero
        assert total == pytest.approx(0.0, abs=1e-6)
        assert terms["smoothness"] == 0.0 and terms["jacobian"] == 0.0

    def test_single_term(self, rng):
        f, m = random_images(rng, (8, 8))
        u = generic_field(rng, (8, 8))
        total, _ = deq_loss(u, f, m, DeqConfig(w0=1.0, w1=0.0, w2=0.0, ncc_window=3))
        assert total == ncc(f, warp(m, u), 3)

    def test_terms_recompose(self, rng):
        f, m = random_images(rng, (8, 8))
        u = generic_field(rng, (8, 8), scale=0.9)
        cfg = DeqConfig(w0=1.0, w1=5.0, w2=2.0, ncc_window=3)
        total, terms = deq_loss(u, f, m, cfg)
        assert terms["jacobian"] > 0
        expected = (ncc(f, warp(m, u), 3) + 5.0 * smoothness(u) + 2.0 * jacobian_loss(u))
        assert total == pytest.approx(expected, rel=1e-12)
        assert total == pytest.approx(sum(terms.values()), rel=1e-15)

    @pytest.mark.parametrize("dims", [(8, 8), (4, 4, 4)])
    def test_field_gradient_matches_finite_differences(self, rng, dims):
        cfg = DeqConfig(w0=1.0, w1=5.0, w2=1.0, ncc_window=3)
        for _ in range(3):
            f, m = random_images(rng, dims)
            u = generic_field(rng, dims, scale=0.9)
            fd = central_difference(lambda x: deq_loss(x, f, m, cfg)[0], u)
            assert rel_err(deq_loss_field_gradient(u, f, m, cfg), fd) < 1e-4

    def test_iterate_gradient_on_the_coarse_grid(self, rng):
        f, m = random_images(rng, (16, 16))
        cfg = DeqConfig(ncc_window=3)
        pcfg = desk_config((16, 16))
        phi = generic_field(rng, (8, 8), scale=0.9)
        fd = central_difference(lambda x: iterate_loss(x, f, m, cfg, pcfg)[0], phi)
        assert rel_err(iterate_loss_gradient(phi, f, m, cfg, pcfg), fd) < 1e-4

    def test_config(self):
        cfg = paper_deq_config()
        assert (cfg.w0, cfg.w1, cfg.w2, cfg.learning_rate, cfg.epochs) == (1.0, 5.0, 1.0,
                                                                            1e-5, 50)
        for kw in (dict(w1=-1.0), dict(epochs=-1), dict(learning_rate=-1e-3)):
            with pytest.raises(ValueError):
                DeqConfig(**kw)


@pytest.fixture(scope="module")
def tiny():
    f, m = sinusoid_pair(1)
    params = denoiser_like_params(1)
    dcfg, pcfg = tiny_configs()
    fwd = deq_forward(params, f, m, dcfg, pcfg)
    return f, m, params, dcfg, pcfg, fwd


class TestForward:
    def test_converges_to_a_fixed_point(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        assert fwd.converged and not fwd.diverged
        op_cfg = deq_operator_config(pcfg, params)
        np.testing.assert_allclose(pirate_update(fwd.x, f, m, op_cfg, 0), fwd.x, atol=1e-9)

    def test_operator_uses_a_fixed_step(self, tiny):
        _, _, params, _, pcfg, _ = tiny
        op_cfg = deq_operator_config(pcfg, params)
        assert op_cfg.schedule == "fixed" and op_cfg.denoiser_active

    def test_warm_start_at_the_fixed_point(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        again = deq_forward(params, f, m, dcfg, pcfg, phi0=fwd.x)
        assert again.converged and again.nfe < fwd.nfe / 10


class TestJfb:
    def test_matches_the_transposed_operator_jacobian(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        upstream = iterate_loss_gradient(fwd.x, f, m, dcfg, pcfg)
        grad = jfb_gradient(params, fwd.x, f, m, dcfg, pcfg).grad.arrays()
        arrays = params.arrays()
        for i, a in enumerate(arrays):
            def probe(x, i=i):
                q = ConvNetParams.from_arrays(arrays[:i] + [x] + arrays[i + 1:])
                out = pirate_update(fwd.x, f, m, deq_operator_config(pcfg, q), 0)
                return float(np.sum(upstream * out))
            fd = central_difference(probe, a, h=1e-5)
            assert rel_err(grad[i], fd) < 1e-5

    def test_zero_upstream_gives_zero(self, tiny):
        f, m, params, _, pcfg, fwd = tiny
        cfg = DeqConfig(w0=0.0, w1=0.0, w2=0.0)
        for a in jfb_gradient(params, fwd.x, f, m, cfg, pcfg).grad.arrays():
            np.testing.assert_array_equal(a, 0.0)

    def test_zero_tau_gives_zero(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        for a in jfb_gradient(params, fwd.x, f, m, dcfg, replace(pcfg, tau=0.0)).grad.arrays():
            np.testing.assert_array_equal(a, 0.0)

    def test_linear_in_the_loss_weights(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        one = jfb_gradient(params, fwd.x, f, m, dcfg, pcfg).grad.arrays()
        two = jfb_gradient(params, fwd.x, f, m, replace(dcfg, w0=2.0, w1=10.0, w2=2.0),
                           pcfg).grad.arrays()
        for a, b in zip(one, two):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-300)

    def test_residual_flag(self, tiny, rng):
        f, m, params, dcfg, pcfg, fwd = tiny
        res = jfb_gradient(params, fwd.x, f, m, dcfg, pcfg)
        assert res.residual < 1e-9 and not res.flagged
        far = jfb_gradient(params, fwd.x + rng.normal(size=fwd.x.shape), f, m, dcfg, pcfg)
        assert far.flagged and far.residual > dcfg.jfb_threshold

    def test_descent_direction(self, tiny):
        f, m, params, dcfg, pcfg, fwd = tiny
        d = jfb_gradient(params, fwd.x, f, m, dcfg, pcfg).grad.arrays()
        norm = np.sqrt(sum(float(np.sum(a * a)) for a in d))

        def loss(eps):
            q = ConvNetParams.from_arrays([a + eps * b / norm for a, b in zip(params.arrays(), d)])
            r = deq_forward(q, f, m, dcfg, pcfg, phi0=fwd.x)
            return iterate_loss(r.x, f, m, dcfg, pcfg)[0]

        assert (loss(1e-3) - loss(-1e-3)) / 2e-3 > 0


@pytest.fixture(scope="module")
def ft_setup():
    pairs = make_pairs(2, (32, 32), seed=4, magnitude=2.0, smoothness_scale=5.0)
    params = init_convnet(2, hidden=4, layers=2, seed=1)
    pcfg = desk_config((32, 32))
    dcfg = DeqConfig(epochs=2, learning_rate=1e-3, max_iter=40, tol=1e-4, ncc_window=5)
    return pairs, params, dcfg, pcfg


class TestFinetune:
    def test_zero_epochs_keeps_params(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        res = finetune(pairs, params, replace(dcfg, epochs=0), pcfg)
        for a, b in zip(res.params.arrays(), params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert res.log == [] and res.attempted == 0

    def test_zero_learning_rate_keeps_params(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        res = finetune(pairs, params, replace(dcfg, epochs=1, learning_rate=0.0), pcfg,
                       timing=False)
        for a, b in zip(res.params.arrays(), params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert len(res.log) == 2

    def test_updates_and_logs(self, ft_setup, tmp_path):
        pairs, params, dcfg, pcfg = ft_setup
        res = finetune(pairs, params, dcfg, pcfg, timing=False)
        assert res.attempted == 4 and res.skipped == 0
        assert any(not np.array_equal(a, b)
                   for a, b in zip(res.params.arrays(), params.arrays()))
        for row in res.log:
            assert set(row) == set(LOG_COLUMNS)
            assert row["nfe"] >= 1 and row["status"] in ("ok", "flagged")
            assert row["loss"] == pytest.approx(row["ncc_term"] + row["smt_term"]
                                                + row["jac_term"])
        assert [s["epoch"] for s in res.epoch_summary] == [0, 1]
        write_log_csv(tmp_path / "log.csv", res.log)
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert list(rows[0]) == list(LOG_COLUMNS) and len(rows) == 4

    def test_deterministic(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        a = finetune(pairs, params, dcfg, pcfg, timing=False)
        b = finetune(pairs, params, dcfg, pcfg, timing=False)
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            assert x.tobytes() == y.tobytes()
        assert a.log == b.log

    def test_resume_matches_uninterrupted(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        full = finetune(pairs, params, dcfg, pcfg, timing=False)
        first = finetune(pairs, params, replace(dcfg, epochs=1), pcfg, timing=False)
        rest = finetune(pairs, first.params, dcfg, pcfg, adam=first.adam, start_epoch=1,
                        timing=False)
        for x, y in zip(full.params.arrays(), rest.params.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_diverging_pairs_are_skipped(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        unstable = replace(pcfg, alpha=1e3)
        res = finetune(pairs, params, replace(dcfg, epochs=1), unstable, timing=False)
        assert res.skipped == 2
        assert all(row["status"] == "diverged" for row in res.log)
        for a, b in zip(res.params.arrays(), params.arrays()):
            assert a.tobytes() == b.tobytes()

    def test_on_epoch_callback(self, ft_setup):
        pairs, params, dcfg, pcfg = ft_setup
        seen = []
        finetune(pairs, params, dcfg, pcfg, on_epoch=lambda e, p, a: seen.append((e, a.t)))
        assert seen == [(0, 2), (1, 4)]

    def test_no_pairs(self, ft_setup):
        _, params, dcfg, pcfg = ft_setup
        with pytest.raises(ValueError):
            finetune([], params, dcfg, pcfg)
