import math
import warnings

import numpy as np
import pytest

from hgllim.errors import DimensionMismatch, InvalidLabel, ParseError
from hgllim.potts import (NeighborGraph, PottsField, async_sweep, estimate_psi, mean_field_prior,
                          potts_energy, psi_gradient, psi_hessian, psi_objective)


def fixed_point(field, graph, rng, iters=2000):
    q = rng.dirichlet(np.ones(field.K), size=graph.n_sites)
    for _ in range(iters):
        new = 0.5 * q + 0.5 * mean_field_prior(q, field, graph)
        if np.max(np.abs(new - q)) < 1e-15:
            break
        q = new
    return q


def fd_gradient(q, field, graph, h=1e-5):
    x0 = np.concatenate([[field.beta], field.alpha[1:]])
    g = np.zeros_like(x0)
    for i in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        fp = psi_objective(q, PottsField(np.r_[0.0, xp[1:]], xp[0]), graph)
        fm = psi_objective(q, PottsField(np.r_[0.0, xm[1:]], xm[0]), graph)
        g[i] = (fp - fm) / (2 * h)
    return g


class TestGraph:
    def test_lattice_4(self):
        g = NeighborGraph.lattice(3, 3, 4)
        assert sorted(g.neighbors(4)) == [1, 3, 5, 7]
        assert sorted(g.neighbors(0)) == [1, 3]
        assert g.n_edges == 12

    def test_lattice_8(self):
        g = NeighborGraph.lattice(3, 3, 8)
        assert sorted(g.neighbors(4)) == [0, 1, 2, 3, 5, 6, 7, 8]
        assert g.n_edges == 20

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            NeighborGraph.lattice(2, 2, 6)

    def test_edge_list(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("# triangle plus a pendant\n0 1\n1 2\n2 0  # closing edge\n\n2 3\n")
        g = NeighborGraph.load_edge_list(p)
        assert g.n_sites == 4
        assert sorted(g.neighbors(2)) == [0, 1, 3]
        assert list(g.degree) == [2, 2, 3, 1]

    def test_edge_list_parse_error(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("0 1\n1 x\n")
        with pytest.raises(ParseError) as exc:
            NeighborGraph.load_edge_list(p)
        assert exc.value.row == 2

    def test_duplicate_edges_collapse(self):
        g = NeighborGraph.from_edges(3, [(0, 1), (1, 0), (0, 1)])
        assert g.n_edges == 1


class TestEnergy:
    def test_beta_zero_sums_field(self, rng):
        g = NeighborGraph.lattice(3, 4)
        f = PottsField(np.array([0.0, 0.4, -1.0]), 0.0)
        z = rng.integers(1, 4, size=12)
        assert potts_energy(z, f, g) == pytest.approx(f.alpha[z - 1].sum())

    def test_single_site(self):
        g = NeighborGraph.isolated(1)
        assert potts_energy(np.array([1]), PottsField(np.array([0.0, 2.0]), 3.0), g) == 0.0

    def test_two_adjacent_sites(self):
        g = NeighborGraph.from_edges(2, [(0, 1)])
        f = PottsField(np.array([0.0, 0.3]), 1.0)
        assert potts_energy(np.array([2, 2]), f, g) == pytest.approx(1.6, abs=1e-15)

    def test_invalid_label(self):
        g = NeighborGraph.isolated(2)
        f = PottsField(np.zeros(2))
        with pytest.raises(InvalidLabel):
            potts_energy(np.array([0, 1]), f, g)
        with pytest.raises(InvalidLabel):
            potts_energy(np.array([1, 3]), f, g)

    def test_alpha_pinned(self):
        f = PottsField(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(f.alpha, [0.0, 1.0])
        with pytest.raises(ValueError):
            PottsField(np.zeros(2), -0.1)


class TestMeanFieldPrior:
    def test_uniform(self, rng):
        g = NeighborGraph.lattice(3, 3)
        q = rng.dirichlet(np.ones(4), size=9)
        np.testing.assert_allclose(mean_field_prior(q, PottsField(np.zeros(4)), g), 0.25)

    def test_log3(self, rng):
        g = NeighborGraph.lattice(2, 2)
        q = rng.dirichlet(np.ones(2), size=4)
        out = mean_field_prior(q, PottsField(np.array([0.0, math.log(3)])), g)
        np.testing.assert_allclose(out, np.tile([0.25, 0.75], (4, 1)), atol=1e-15)

    def test_single_neighbour(self):
        g = NeighborGraph.from_edges(2, [(0, 1)])
        q = np.array([[0.5, 0.5], [1.0, 0.0]])
        out = mean_field_prior(q, PottsField(np.zeros(2), 2.0), g)
        np.testing.assert_allclose(out[0], [0.8807970779778825, 0.11920292202211755], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mean_field_prior(np.ones((3, 2)) / 2, PottsField(np.zeros(2)), NeighborGraph.isolated(4))


class TestObjective:
    def test_uniform_value(self, rng):
        g = NeighborGraph.lattice(3, 3)
        q = rng.dirichlet(np.ones(3), size=9)
        assert psi_objective(q, PottsField(np.zeros(3)), g) == pytest.approx(-9 * math.log(3))

    def test_single_site(self):
        a = 0.7
        val = psi_objective(np.array([[1.0, 0.0]]), PottsField(np.array([0.0, a])), NeighborGraph.isolated(1))
        assert val == pytest.approx(-math.log1p(math.exp(a)), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_fd_3x3(self, seed):
        rng = np.random.default_rng(seed)
        g = NeighborGraph.lattice(3, 3)
        K = 3
        q = rng.dirichlet(np.ones(K), size=9)
        f = PottsField(np.r_[0.0, rng.normal(size=K - 1)], rng.uniform(0, 2))
        np.testing.assert_allclose(psi_gradient(q, f, g), fd_gradient(q, f, g), rtol=1e-6, atol=1e-8)

    def test_gradient_zero_when_prior_equals_q(self, rng):
        g = NeighborGraph.lattice(4, 4)
        f = PottsField(np.array([0.0, 0.5, -0.3]), 0.8)
        q = fixed_point(f, g, rng)
        np.testing.assert_allclose(mean_field_prior(q, f, g), q, atol=1e-14)
        np.testing.assert_allclose(psi_gradient(q, f, g), 0.0, atol=1e-12)

    def test_uniform_prior_alpha_component(self, rng):
        g = NeighborGraph.lattice(3, 3)
        q = rng.dirichlet(np.ones(2), size=9)
        grad = psi_gradient(q, PottsField(np.zeros(2), 0.0), g)
        assert grad[1] == pytest.approx(np.sum(q[:, 1] - 0.5), abs=1e-14)

    def test_hessian_matches_fd(self, rng):
        g = NeighborGraph.lattice(4, 4)
        q = rng.dirichlet(np.ones(3), size=16)
        f = PottsField(np.array([0.0, 0.2, -0.4]), 0.6)
        x0 = np.concatenate([[f.beta], f.alpha[1:]])
        h = 1e-6
        H = np.zeros((3, 3))
        for i in range(3):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            H[:, i] = (psi_gradient(q, PottsField(np.r_[0.0, xp[1:]], xp[0]), g)
                       - psi_gradient(q, PottsField(np.r_[0.0, xm[1:]], xm[0]), g)) / (2 * h)
        np.testing.assert_allclose(psi_hessian(q, f, g), H, rtol=1e-6, atol=1e-8)


class TestEstimate:
    @pytest.mark.parametrize("beta,alpha", [(0.8, [0.0, 0.5, -0.3]), (1.5, [0.0, -1.0]),
                                            (0.3, [0.0, 0.2, 0.1, -0.2])])
    def test_self_consistency(self, rng, beta, alpha):
        g = NeighborGraph.lattice(8, 8)
        truth = PottsField(np.array(alpha), beta)
        q = fixed_point(truth, g, rng)
        est = estimate_psi(q, g, PottsField(np.zeros(len(alpha)), 0.0))
        np.testing.assert_allclose(mean_field_prior(q, est, g), q, atol=1e-4)
        assert est.beta == pytest.approx(beta, abs=1e-3)

    def test_uniform_rows(self):
        g = NeighborGraph.lattice(4, 4)
        q = np.full((16, 3), 1 / 3)
        est = estimate_psi(q, g, PottsField(np.zeros(3), 0.5))
        np.testing.assert_allclose(est.alpha, 0.0, atol=1e-8)
        assert psi_gradient(q, PottsField(np.zeros(3), 1.3), g)[0] == pytest.approx(0.0, abs=1e-12)

    def test_constant_one_hot_hits_beta_max(self):
        g = NeighborGraph.lattice(4, 4)
        q = np.zeros((16, 2))
        q[:, 0] = 1.0
        # with every site in class 1 the beta derivative is sum_n deg_n (1 - p_n1) > 0 for any finite psi
        grad = psi_gradient(q, PottsField(np.zeros(2), 5.0), g)
        assert grad[0] > 0
        with pytest.warns(RuntimeWarning, match="beta"):
            est = estimate_psi(q, g, PottsField(np.zeros(2)), beta_max=40.0)
        assert est.beta == 40.0

    def test_monotone_trace(self, rng):
        g = NeighborGraph.lattice(6, 6)
        q = rng.dirichlet(np.ones(4) * 0.3, size=36)
        _, trace = estimate_psi(q, g, PottsField(np.zeros(4), 3.0), return_trace=True)
        assert np.all(np.diff(trace) >= -1e-12)

    def test_fixed_beta(self, rng):
        g = NeighborGraph.lattice(5, 5)
        q = rng.dirichlet(np.ones(3), size=25)
        est = estimate_psi(q, g, PottsField(np.zeros(3), 1.25), fix_beta=True)
        assert est.beta == 1.25
        assert np.max(np.abs(psi_gradient(q, est, g)[1:])) < 1e-6


class TestSweep:
    def test_equal_likelihoods_single_neighbour(self):
        g = NeighborGraph.from_edges(2, [(0, 1)])
        q = np.array([[0.5, 0.5], [1.0, 0.0]])
        # site 1 is clamped to (1, 0) by an overwhelming likelihood; site 0 has none
        log_lik = np.array([[0.0, 0.0], [0.0, -800.0]])
        async_sweep(log_lik, PottsField(np.zeros(2), 2.0), g, q)
        np.testing.assert_allclose(q[0], [0.8807970779778825, 0.11920292202211755], atol=1e-12)

    def test_beta_zero_is_softmax(self, rng):
        g = NeighborGraph.lattice(3, 3)
        ll = rng.normal(size=(9, 3))
        f = PottsField(np.array([0.0, 0.3, -0.2]), 0.0)
        q = np.full((9, 3), 1 / 3)
        async_sweep(ll, f, g, q)
        a = ll + f.alpha
        ref = np.exp(a - a.max(axis=1, keepdims=True))
        np.testing.assert_allclose(q, ref / ref.sum(axis=1, keepdims=True), rtol=1e-13)

    def test_rows_sum_to_one(self, rng):
        g = NeighborGraph.lattice(5, 5)
        q = rng.dirichlet(np.ones(4), size=25)
        async_sweep(rng.normal(size=(25, 4)) * 5, PottsField(np.zeros(4), 2.0), g, q)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-13)
