"""GateState behavior: running statistics, expected masks, the dependent
gate rule, and gradients of every stochastic path against finite differences."""

import numpy as np
import pytest

from betadrop import autodiff as ad
from betadrop import distributions as d
from betadrop.errors import ContractError, DimensionError
from betadrop.gates import (
    MODE_BB,
    MODE_DBB,
    GateState,
    beta_sample_node,
    concrete_mask_node,
    dbb_phi_node,
    dependent_gate_probability,
    kl_beta_gaussian_node,
    kl_bb_node,
    sample_pi_node,
)

from helpers import gradcheck


def make_gate(k=4, mode=MODE_BB, eps=1e-3, seed=0):
    gate = GateState.create(k, mode=mode, eps=eps)
    rng = d.make_rng(seed)
    # move parameters off their symmetric init so gradients are informative
    gate.a_raw.value = gate.a_raw.value + rng.normal(0, 0.3, k)
    gate.b_raw.value = gate.b_raw.value + rng.normal(0, 0.3, k)
    gate.gamma.value = rng.normal(0.5, 0.2, k)
    gate.eta.value = rng.normal(0.4, 0.1, k)
    gate.kappa_raw.value = gate.kappa_raw.value + rng.normal(0, 0.2, k)
    return gate


class TestInitialization:
    def test_initial_expected_pi_is_0_9(self):
        gate = GateState.create(5)
        assert gate.expected_pi() == pytest.approx(np.full(5, 0.9), abs=1e-12)

    def test_initial_gate_params(self):
        gate = GateState.create(3)
        assert np.allclose(gate.gamma.value, 0.0)
        assert np.allclose(gate.eta.value, 1.0)
        assert np.allclose(gate.kappa(), 0.1)

    def test_bad_mode_rejected(self):
        with pytest.raises(ContractError):
            GateState.create(3, mode="both")


class TestRunningStats:
    def test_first_batch_initializes_directly(self):
        gate = GateState.create(3)
        batch = np.full((8, 3), 2.5)
        gate.update_running_stats(batch)
        assert np.allclose(gate.run_mean, 2.5)
        assert np.allclose(gate.run_std, gate.sigma_floor)

    def test_ema_converges_geometrically(self):
        gate = GateState.create(2)
        gate.update_running_stats(np.zeros((4, 2)))  # init at mean 0
        target = np.full(2, 1.0)
        batch = np.concatenate([np.full((2, 2), 0.5), np.full((2, 2), 1.5)])
        mu0_err = abs(gate.run_mean[0] - 1.0)
        for t in range(1, 6):
            gate.update_running_stats(batch)
            assert abs(gate.run_mean[0] - 1.0) == pytest.approx(
                0.9**t * mu0_err, rel=1e-9
            )

    def test_small_batch_rejected(self):
        gate = GateState.create(2)
        with pytest.raises(ContractError):
            gate.update_running_stats(np.ones((1, 2)))

    def test_wrong_width_rejected(self):
        gate = GateState.create(2)
        with pytest.raises(DimensionError):
            gate.update_running_stats(np.ones((4, 3)))

    def test_evaluation_never_mutates(self):
        gate = make_gate(3, mode=MODE_DBB)
        gate.update_running_stats(np.random.default_rng(0).normal(size=(16, 3)))
        mean, std = gate.run_mean.copy(), gate.run_std.copy()
        gate.expected_mask(np.random.default_rng(1).normal(size=(5, 3)))
        assert np.array_equal(gate.run_mean, mean)
        assert np.array_equal(gate.run_std, std)


class TestDependentGateProbability:
    def test_standardized_zero_hits_clamp_floor(self):
        gate = GateState.create(1, eps=1e-3)
        gate.gamma.value = np.array([1.0])
        gate.run_mean = np.array([3.0])
        gate.run_std = np.array([1.0])
        gate.stats_initialized = True
        phi = dependent_gate_probability(0.5, np.array([3.0]), gate, beta=np.array([0.0]))
        assert phi == pytest.approx(0.0005)

    def test_saturating_shift_hits_ceiling(self):
        gate = GateState.create(1, eps=1e-3)
        gate.run_mean = np.array([0.0])
        gate.run_std = np.array([1.0])
        gate.stats_initialized = True
        phi = dependent_gate_probability(0.8, np.array([0.0]), gate, beta=np.array([2.0]))
        assert phi == pytest.approx(0.7992)

    def test_interior_arithmetic(self):
        gate = GateState.create(1, eps=1e-2)
        gate.gamma.value = np.array([2.0])
        gate.run_mean = np.array([0.0])
        gate.run_std = np.array([1.0])
        gate.stats_initialized = True
        phi = dependent_gate_probability(0.8, np.array([0.3]), gate, beta=np.array([0.1]))
        assert phi == pytest.approx(0.56)

    def test_defaults_to_eta(self):
        gate = GateState.create(1, eps=1e-3)
        gate.run_mean = np.array([0.0])
        gate.run_std = np.array([1.0])
        gate.eta.value = np.array([0.5])
        gate.stats_initialized = True
        phi = dependent_gate_probability(1.0, np.array([0.0]), gate)
        assert phi == pytest.approx(0.5)


class TestExpectedMask:
    def test_bb_uniform(self):
        gate = GateState.create(4)
        gate.a_raw.value = np.full(4, float(d.softplus_inv(1.0)))
        gate.b_raw.value = np.full(4, float(d.softplus_inv(1.0)))
        assert gate.expected_mask() == pytest.approx(np.full(4, 0.5))

    def test_dbb_requires_input(self):
        gate = make_gate(3, mode=MODE_DBB)
        with pytest.raises(ContractError):
            gate.expected_mask()

    def test_dbb_requires_stats(self):
        gate = make_gate(3, mode=MODE_DBB)
        with pytest.raises(ContractError):
            gate.expected_mask(np.zeros(3))

    def test_dbb_saturating_eta_gives_ceiling(self):
        gate = GateState.create(2, mode=MODE_DBB, eps=1e-3)
        gate.eta.value = np.array([5.0, 5.0])
        gate.update_running_stats(np.random.default_rng(0).normal(size=(10, 2)))
        mask = gate.expected_mask(np.zeros(2))
        assert mask == pytest.approx((1.0 - 1e-3) * gate.expected_pi())

    def test_bb_mask_matches_thresholded_concrete_samples(self):
        # tau -> 0 concrete draws thresholded at 1/2 are Bernoulli(pi)
        gate = make_gate(3, seed=5)
        rng = d.make_rng(11)
        n = 100_000
        u_pi = d.open_unit_uniform(rng, (n, 3))
        pis = d.kumaraswamy_sample(u_pi, gate.a()[None, :], gate.b()[None, :])
        u_z = d.open_unit_uniform(rng, (n, 3))
        z = d.concrete_bernoulli_sample(pis, 1e-3, u_z)
        mc = (z > 0.5).mean(axis=0)
        assert np.abs(mc - gate.expected_mask()).max() < 0.01

    def test_dbb_dominance_everywhere(self):
        # the input-dependent mask never exceeds (1 - eps) * BB mask
        gate = make_gate(6, mode=MODE_DBB, seed=3)
        rng = d.make_rng(0)
        gate.update_running_stats(rng.normal(size=(32, 6)))
        bb = gate.expected_pi()
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 5.0), size=(8, 6))
            dbb = gate.expected_mask(x)
            assert (dbb <= (1.0 - gate.eps) * bb[None, :] + 1e-15).all()


class TestSubset:
    def test_subset_slices_all_fields(self):
        gate = make_gate(5, mode=MODE_DBB)
        gate.update_running_stats(np.random.default_rng(0).normal(size=(10, 5)))
        keep = np.array([0, 3, 4])
        sub = gate.subset(keep)
        assert sub.k == 3
        assert np.array_equal(sub.a_raw.value, gate.a_raw.value[keep])
        assert np.array_equal(sub.run_std, gate.run_std[keep])
        assert sub.stats_initialized

    def test_subset_is_independent_copy(self):
        gate = make_gate(4)
        sub = gate.subset(np.array([1, 2]))
        sub.a_raw.value[0] = 99.0
        assert gate.a_raw.value[1] != 99.0


class TestGraphPieces:
    def test_sample_pi_matches_numpy_path(self):
        gate = make_gate(4, seed=2)
        seed = 77
        node = sample_pi_node(gate, d.make_rng(seed))
        u = d.open_unit_uniform(d.make_rng(seed), 4)
        expected = d.kumaraswamy_sample(u, gate.a(), gate.b())
        assert np.allclose(node.value, expected, atol=1e-14)

    def test_sample_pi_gradients(self):
        gate = make_gate(4, seed=2)
        coeffs = ad.constant(np.random.default_rng(1).normal(size=4))

        def loss():
            pi = sample_pi_node(gate, d.make_rng(9))
            return ad.sum_all(ad.mul(pi, coeffs))

        gradcheck(loss, [gate.a_raw, gate.b_raw])

    def test_concrete_mask_gradients(self):
        gate = make_gate(3, seed=4)
        u = d.open_unit_uniform(d.make_rng(3), (5, 3))
        coeffs = ad.constant(np.random.default_rng(2).normal(size=(5, 3)))

        def loss():
            pi = sample_pi_node(gate, d.make_rng(8))
            mask = concrete_mask_node(pi, u, tau=0.7)
            return ad.sum_all(ad.mul(mask, coeffs))

        gradcheck(loss, [gate.a_raw, gate.b_raw])

    def test_dbb_phi_gradients_all_parameters(self):
        gate = make_gate(3, mode=MODE_DBB, seed=6)
        rng_x = np.random.default_rng(5)
        xval = rng_x.normal(size=(6, 3))
        x = ad.parameter(xval)
        coeffs = ad.constant(rng_x.normal(size=(6, 3)))

        def loss():
            pi = sample_pi_node(gate, d.make_rng(21))
            beta = beta_sample_node(gate, d.make_rng(22))
            phi = dbb_phi_node(gate, x, pi, beta)
            return ad.sum_all(ad.mul(phi, coeffs))

        # gradient flows into the gate input through the batch statistics too
        gradcheck(
            loss,
            [gate.a_raw, gate.b_raw, gate.gamma, gate.eta, gate.kappa_raw, x],
        )

    def test_kl_nodes_match_numpy_and_fd(self):
        gate = make_gate(5, seed=7)
        kl = kl_bb_node(gate)
        expected = d.kl_kumaraswamy_beta(gate.a(), gate.b(), gate.alpha_over_k).sum()
        assert float(kl.value) == pytest.approx(float(expected), rel=1e-12)
        gradcheck(lambda: kl_bb_node(gate), [gate.a_raw, gate.b_raw])

        rho = np.sqrt(5.0)
        klb = kl_beta_gaussian_node(gate, rho)
        expected_b = d.gaussian_kl(gate.eta.value, gate.kappa() ** 2, rho)
        assert float(klb.value) == pytest.approx(expected_b, rel=1e-12)
        gradcheck(lambda: kl_beta_gaussian_node(gate, rho), [gate.eta, gate.kappa_raw])

    def test_dbb_training_needs_two_examples(self):
        gate = make_gate(3, mode=MODE_DBB)
        x = ad.constant(np.zeros((1, 3)))
        pi = sample_pi_node(gate, d.make_rng(0))
        beta = beta_sample_node(gate, d.make_rng(1))
        with pytest.raises(ContractError):
            dbb_phi_node(gate, x, pi, beta)
