import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradlab.diagnostics import (
    DiagnosticsReport,
    ProbeBatch,
    ProbeConfig,
    dormant_fraction,
    hutchinson_trace,
    hvp_finite_diff,
    run_probes,
    srank,
)
from gradlab.errors import InputError
from gradlab.networks import ArchitectureSpec, backward_network, build_network, forward_network
from gradlab.rng import make_rng


class TestDormant:
    def test_all_zero(self):
        assert dormant_fraction(np.zeros((16, 8)), 0.025) == 1.0

    def test_identical_nonzero_units(self, rng):
        col = rng.standard_normal(16)
        h = np.tile(col[:, None], (1, 6))
        assert dormant_fraction(h, 0.025) == 0.0

    def test_one_zeroed_unit_of_four(self, rng):
        h = np.abs(rng.standard_normal((32, 4))) + 0.5
        h[:, 2] = 0.0
        assert dormant_fraction(h, 0.025) == 0.25

    def test_empty_batch(self):
        with pytest.raises(InputError):
            dormant_fraction(np.zeros((0, 4)), 0.025)

    @given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_scale_invariance(self, c, seed):
        h = make_rng(seed).standard_normal((10, 6))
        h[:, 0] *= 1e-4  # one near-dormant unit
        assert dormant_fraction(h, 0.025) == dormant_fraction(c * h, 0.025)


class TestSrank:
    def test_identity(self):
        assert srank(np.eye(8), 0.01) == 8

    def test_constructed_rank3(self, rng):
        m = rng.standard_normal((16, 3)) @ rng.standard_normal((3, 32))
        assert srank(m, 0.01) == 3

    def test_two_scales(self):
        assert srank(np.diag([100.0, 1.0]), 0.01) == 1

    def test_all_zero_convention(self):
        assert srank(np.zeros((4, 4)), 0.01) == 0

    def test_orthogonal_invariance(self, rng):
        m = rng.standard_normal((12, 7))
        g = rng.standard_normal((12, 12))
        q, _ = np.linalg.qr(g)
        assert srank(q @ m, 0.01) == srank(m, 0.01)


class TestHvp:
    def quadratic(self, a):
        return lambda tensors: {"w": a @ tensors["w"]}

    def test_quadratic_exact(self, rng):
        m = rng.standard_normal((6, 6))
        a = m + m.T
        theta = {"w": rng.standard_normal(6)}
        v = {"w": rng.standard_normal(6)}
        hv = hvp_finite_diff(self.quadratic(a), theta, v, 1e-3)
        expected = a @ v["w"]
        assert np.max(np.abs(hv["w"] - expected)) / np.max(np.abs(expected)) < 1e-5

    def test_linear_loss_zero(self, rng):
        const_grad = {"w": rng.standard_normal(5)}
        hv = hvp_finite_diff(lambda t: {"w": const_grad["w"]}, {"w": rng.standard_normal(5)}, {"w": np.ones(5)}, 1e-3)
        assert np.allclose(hv["w"], 0.0)

    def test_nonfinite_raises(self, rng):
        from gradlab.errors import NumericError

        def bad(t):
            return {"w": np.full(3, np.nan)}

        with pytest.raises(NumericError):
            hvp_finite_diff(bad, {"w": np.zeros(3)}, {"w": np.ones(3)}, 1e-3)


class TestHutchinson:
    def test_identity_hessian(self, rng):
        theta = {"w": rng.standard_normal(17)}
        est, stderr = hutchinson_trace(lambda t: {"w": t["w"]}, theta, 25, make_rng(1))
        assert abs(est - 17.0) <= max(3 * stderr, 1e-6)

    def test_diag_123(self, rng):
        a = np.diag([1.0, 2.0, 3.0])
        est, _ = hutchinson_trace(lambda t: {"w": a @ t["w"]}, {"w": rng.standard_normal(3)}, 1000, make_rng(2))
        assert abs(est - 6.0) / 6.0 < 0.05

    def test_linear_loss(self, rng):
        g = rng.standard_normal(4)
        est, stderr = hutchinson_trace(lambda t: {"w": g}, {"w": rng.standard_normal(4)}, 50, make_rng(3))
        assert abs(est) < 1e-6

    def test_stderr_scaling(self, rng):
        m = make_rng(11).standard_normal((10, 10))
        a = m + m.T  # off-diagonals give the estimator real variance
        grad = lambda t: {"w": a @ t["w"]}
        theta = {"w": rng.standard_normal(10)}
        _, se_small = hutchinson_trace(grad, theta, 100, make_rng(4))
        _, se_big = hutchinson_trace(grad, theta, 400, make_rng(5))
        assert abs(se_big / se_small - 0.5) < 0.3 * 0.5 + 0.15


def probe_setup(seed=0, zero_head=False):
    spec = ArchitectureSpec(topology="plain", depth=2, width=16, feat_dim=8, activation="relu")
    params = build_network(spec, 6, 3, make_rng(seed))
    if zero_head:
        params.head.weight[:] = 0.0
        params.head.bias[:] = 0.0
    r = make_rng(seed + 1000)
    batch = ProbeBatch(inputs=r.standard_normal((64, 6)), labels=r.integers(0, 3, 64))
    targets = r.standard_normal((64, 3))

    def loss_fn(p):
        res = forward_network(p, batch.inputs)
        diff = res.outputs - targets
        bundle = backward_network(p, res.caches, diff / diff.shape[0])
        return 0.5 * float(np.mean(diff**2)), bundle

    return params, batch, loss_fn


class TestRunProbes:
    def config(self, n=5):
        return ProbeConfig(hutchinson_samples=n)

    def test_fresh_relu_net_low_dormancy(self):
        for seed in range(5):
            params, batch, loss_fn = probe_setup(seed)
            report = run_probes(params, batch, loss_fn, self.config(), make_rng(99))
            assert report.dormant_fraction < 0.2

    def test_zeroed_head_gives_zero_mean_q(self):
        params, batch, loss_fn = probe_setup(zero_head=True)
        report = run_probes(params, batch, loss_fn, self.config(), make_rng(99))
        assert report.mean_q == 0.0

    def test_determinism(self):
        params, batch, loss_fn = probe_setup()
        a = run_probes(params, batch, loss_fn, self.config(), make_rng(7), step=3)
        b = run_probes(params, batch, loss_fn, self.config(), make_rng(7), step=3)
        assert a == b

    def test_probes_do_not_mutate_params(self):
        params, batch, loss_fn = probe_setup()
        before = {n: t.copy() for n, t in params.tensors().items()}
        run_probes(params, batch, loss_fn, self.config(), make_rng(0))
        for name, tensor in params.tensors().items():
            assert np.array_equal(tensor, before[name])

    def test_report_fields(self):
        params, batch, loss_fn = probe_setup()
        report = run_probes(params, batch, loss_fn, self.config(), make_rng(0), step=12)
        assert report.step == 12
        assert len(report.per_layer_grad_norms) == len(params.tensor_names())
        assert 0.0 <= report.dormant_fraction <= 1.0
        assert 1 <= report.srank <= 16
        assert report.accuracy is not None and 0.0 <= report.accuracy <= 1.0


class TestProbeConfig:
    def test_validation(self):
        with pytest.raises(InputError):
            ProbeConfig(srank_delta=1.5)
        with pytest.raises(InputError):
            ProbeConfig(hutchinson_samples=0)
