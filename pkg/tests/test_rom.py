"""Eigendecomposition, projections, mode ordering, and reduced integration."""

import numpy as np
import pytest

from stabnode import diffcore as dc
from stabnode import neural_ode as node
from stabnode import rom


def zero_mlp(d, hidden=6):
    sizes = [d, hidden, d]
    return dc.MlpParams(sizes, ["sigmoid", "linear"],
                        [np.zeros((sizes[i], sizes[i + 1])) for i in range(2)],
                        [np.zeros(sizes[i + 1]) for i in range(2)])


def random_symmetric(d, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((d, d))
    return 0.5 * (m + m.T)


class TestEigSymmetric:
    def test_identity(self):
        basis = rom.eig_symmetric(np.eye(5))
        assert np.allclose(basis.eigenvalues, 1.0)
        assert np.allclose(basis.eigenvectors.T @ basis.eigenvectors, np.eye(5),
                           atol=1e-12)

    def test_two_by_two_exchange(self):
        basis = rom.eig_symmetric(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(basis.eigenvalues, [1.0, -1.0])
        r = 1 / np.sqrt(2)
        assert np.allclose(basis.eigenvectors[:, 0], [r, r])
        assert np.allclose(basis.eigenvectors[:, 1], [r, -r])

    def test_circulant_symbol_oracle(self):
        c0, c1, c2 = -2.0, 0.8, -0.1
        st = dc.ConvStencil(np.array([c2, c1, c0, c1, c2]))
        d = 16
        mat = dc.circulant_from_taps(st.taps, d)
        basis = rom.eig_symmetric(mat)
        k = np.arange(d)
        expected = c0 + 2 * c1 * np.cos(2 * np.pi * k / d) \
            + 2 * c2 * np.cos(4 * np.pi * k / d)
        assert np.allclose(np.sort(basis.eigenvalues), np.sort(expected), atol=1e-8)

    @pytest.mark.parametrize("d,seed", [(8, 0), (32, 1), (64, 2), (128, 3)])
    def test_random_matrices_against_lapack(self, d, seed):
        mat = random_symmetric(d, seed)
        basis = rom.eig_symmetric(mat)
        scale = np.linalg.norm(mat)
        residual = mat @ basis.eigenvectors - basis.eigenvectors * basis.eigenvalues
        assert np.max(np.linalg.norm(residual, axis=0)) < 1e-8 * scale
        assert np.max(np.abs(basis.eigenvectors.T @ basis.eigenvectors - np.eye(d))) < 1e-10
        assert np.all(np.diff(basis.eigenvalues) <= 1e-12)
        oracle = np.sort(np.linalg.eigvalsh(mat))[::-1]
        assert np.allclose(basis.eigenvalues, oracle, atol=1e-9 * max(scale, 1.0))

    def test_sign_convention_deterministic(self):
        mat = random_symmetric(12, 7)
        a = rom.eig_symmetric(mat)
        b = rom.eig_symmetric(mat.copy())
        assert np.array_equal(a.eigenvectors, b.eigenvectors)
        picks = np.argmax(np.abs(a.eigenvectors), axis=0)
        assert np.all(a.eigenvectors[picks, np.arange(12)] > 0)

    def test_asymmetric_rejected(self):
        mat = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            rom.eig_symmetric(mat)


class TestProjectors:
    def test_full_retention(self):
        basis = rom.eig_symmetric(random_symmetric(6, 1))
        p, q = rom.projectors(basis, 6)
        assert np.allclose(p, np.eye(6), atol=1e-10)
        assert np.max(np.abs(q)) < 1e-10

    @pytest.mark.parametrize("d_p", [1, 3, 5])
    def test_projector_algebra(self, d_p):
        basis = rom.eig_symmetric(random_symmetric(8, 2))
        p, q = rom.projectors(basis, d_p)
        assert np.allclose(p + q, np.eye(8), atol=1e-10)
        assert np.allclose(p @ p, p, atol=1e-10)
        assert np.max(np.abs(p @ q)) < 1e-10


class _SpanRhs:
    """RHS confined to the span of one basis vector, coefficient u[0]."""

    def __init__(self, vector):
        self.vector = vector

    def eval(self, u):
        return np.outer(u[:, 0], self.vector)


class TestVarianceSort:
    def test_constant_snapshots_fall_back_to_eigenvalue_order(self):
        basis = rom.eig_symmetric(random_symmetric(6, 3))
        model = _SpanRhs(np.zeros(6))
        snaps = np.tile(np.arange(6.0), (10, 1))
        out = rom.variance_sort(basis, model, snaps)
        assert np.array_equal(out.eigenvalues, basis.eigenvalues)
        assert out.ordering == "variance"

    def test_single_active_direction_sorts_first(self):
        basis = rom.eig_symmetric(random_symmetric(6, 4))
        target = basis.eigenvectors[:, 4]
        model = _SpanRhs(target)
        rng = np.random.default_rng(0)
        snaps = rng.standard_normal((50, 6))
        out = rom.variance_sort(basis, model, snaps)
        assert np.allclose(np.abs(out.eigenvectors[:, 0]), np.abs(target))

    def test_sign_flip_invariant(self):
        basis = rom.eig_symmetric(random_symmetric(6, 5))
        flipped = rom.EigenBasis(basis.eigenvalues.copy(),
                                 basis.eigenvectors * -1.0, basis.ordering)
        model = _SpanRhs(basis.eigenvectors[:, 2])
        snaps = np.random.default_rng(1).standard_normal((40, 6))
        a = rom.variance_sort(basis, model, snaps)
        b = rom.variance_sort(flipped, model, snaps)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)

    def test_empty_snapshots_rejected(self):
        basis = rom.eig_symmetric(np.eye(4))
        with pytest.raises(ValueError):
            rom.variance_sort(basis, _SpanRhs(np.zeros(4)), np.zeros((0, 4)))


def stabilized_model(d, seed=0, zero_net=False):
    mat = node.true_linear_matrix("kse", d, 22.0)
    if zero_net:
        mlp = zero_mlp(d)
    else:
        mlp = dc.init_mlp([d, 10, d], ["sigmoid", "linear"],
                          ("normal", 0.0, 0.02), seed)
    return node.RhsModel("fixed-linear", mlp, fixed_matrix=mat)


class TestGalerkinRhs:
    def test_zero_nonlinearity_decouples(self):
        d = 8
        model = stabilized_model(d, zero_net=True)
        basis = rom.eig_symmetric(model.linear_matrix())
        p = np.arange(1.0, 5.0)
        out = rom.galerkin_rhs(basis, 4, model, p)
        assert np.allclose(out, basis.eigenvalues[:4] * p, atol=1e-12)

    def test_full_retention_matches_conjugated_rhs(self):
        d = 8
        model = stabilized_model(d, seed=1)
        basis = rom.eig_symmetric(model.linear_matrix())
        p = np.random.default_rng(2).standard_normal(d)
        out = rom.galerkin_rhs(basis, d, model, p)
        u = basis.eigenvectors @ p
        expected = basis.eigenvectors.T @ node.rhs_eval(model, u)
        assert np.max(np.abs(out - expected)) < 1e-10

    def test_matches_direct_evaluation(self):
        d = 8
        model = stabilized_model(d, seed=3)
        basis = rom.eig_symmetric(model.linear_matrix())
        d_p = 5
        p = np.random.default_rng(4).standard_normal(d_p)
        out = rom.galerkin_rhs(basis, d_p, model, p)
        vp = basis.leading(d_p)
        expected = vp.T @ node.rhs_eval(model, vp @ p)
        assert np.max(np.abs(out - expected)) < 1e-10

    def test_bare_nonlinear_model_rejected(self):
        d = 6
        basis = rom.eig_symmetric(np.eye(d))
        model = node.RhsModel("nonlinear", zero_mlp(d))
        with pytest.raises(ValueError):
            rom.galerkin_rhs(basis, 3, model, np.zeros(3))


class TestUnresolvedCorrection:
    def test_zero_nonlinearity_gives_zero(self):
        d = 8
        model = stabilized_model(d, zero_net=True)
        basis = rom.eig_symmetric(model.linear_matrix())
        # d_p = 7 keeps the conserved-mean (zero-eigenvalue) mode resolved
        q = rom.unresolved_correction(basis, 7, model, np.ones(7))
        assert np.max(np.abs(q)) == 0.0

    def test_single_iteration_matches_dense_solve(self):
        d = 10
        model = stabilized_model(d, seed=5)
        basis = rom.eig_symmetric(model.linear_matrix())
        d_p = 7
        p = 0.3 * np.random.default_rng(6).standard_normal(d_p)
        q = rom.unresolved_correction(basis, d_p, model, p)
        vp, vq = basis.leading(d_p), basis.trailing(d_p)
        rhs_vec = -(vq.T @ model.nonlinear(vp @ p))
        oracle = np.linalg.solve(np.diag(basis.eigenvalues[d_p:]), rhs_vec)
        assert np.allclose(q, oracle, atol=1e-12)

    def test_fixed_point_residual_decreases(self):
        d = 12
        model = stabilized_model(d, seed=7)
        basis = rom.eig_symmetric(model.linear_matrix())
        d_p = 7
        vp, vq = basis.leading(d_p), basis.trailing(d_p)
        lam_q = basis.eigenvalues[d_p:]
        p = 0.3 * np.random.default_rng(8).standard_normal(d_p)

        def residual(q):
            return np.linalg.norm(lam_q * q + vq.T @ model.nonlinear(vp @ p + vq @ q))

        q1 = rom.unresolved_correction(basis, d_p, model, p, iterations=1)
        assert residual(q1) < residual(np.zeros(d - d_p))

    def test_near_zero_trailing_eigenvalue_named(self):
        vals = np.array([2.0, 1.0, 1e-14, -1.0])
        basis = rom.EigenBasis(vals, np.eye(4))
        model = stabilized_model(4, zero_net=True)
        with pytest.raises(ValueError, match="2"):
            rom.unresolved_correction(basis, 2, model, np.zeros(2))


class TestRomIntegrate:
    def test_full_retention_matches_full_rollout(self):
        d = 8
        model = stabilized_model(d, seed=9)
        basis = rom.eig_symmetric(model.linear_matrix())
        u0 = 0.2 * np.random.default_rng(10).standard_normal(d)
        times, states = rom.rom_integrate(basis, d, model, u0, 0.5,
                                          mode="galerkin", save_interval=0.25,
                                          dt=0.05)
        _, full = node.rollout(model, u0, 0.5, 0.25, steps_per_interval=5)
        assert np.max(np.abs(states - full)) < 1e-7

    def test_zero_nonlinearity_exponential_modes(self):
        d = 8
        model = stabilized_model(d, zero_net=True)
        basis = rom.eig_symmetric(model.linear_matrix())
        d_p = 4
        p0 = np.ones(d_p)
        u0 = basis.leading(d_p) @ p0
        t_end = 0.25
        times, states = rom.rom_integrate(basis, d_p, model, u0, t_end,
                                          mode="galerkin", save_interval=t_end,
                                          dt=0.0125)
        p_end = basis.leading(d_p).T @ states[-1]
        expected = np.exp(basis.eigenvalues[:d_p] * t_end) * p0
        assert np.allclose(p_end, expected, rtol=1e-6)

    def test_ppg_equals_galerkin_plus_correction(self):
        d = 10
        model = stabilized_model(d, seed=11)
        basis = rom.eig_symmetric(model.linear_matrix())
        d_p = 7
        u0 = 0.2 * np.random.default_rng(12).standard_normal(d)
        _, plain = rom.rom_integrate(basis, d_p, model, u0, 0.2,
                                     mode="galerkin", save_interval=0.1, dt=0.02)
        _, post = rom.rom_integrate(basis, d_p, model, u0, 0.2,
                                    mode="ppg", save_interval=0.1, dt=0.02)
        vp, vq = basis.leading(d_p), basis.trailing(d_p)
        for k in range(len(plain)):
            p_now = vp.T @ plain[k]
            q_now = rom.unresolved_correction(basis, d_p, model, p_now)
            assert np.allclose(post[k], vp @ p_now + vq @ q_now, atol=1e-12)

    def test_unknown_mode_rejected(self):
        d = 6
        model = stabilized_model(d, zero_net=True)
        basis = rom.eig_symmetric(model.linear_matrix())
        with pytest.raises(ValueError):
            rom.rom_integrate(basis, 3, model, np.zeros(d), 1.0, mode="spectral")


class TestEigenvalueGaps:
    def test_degenerate_spectrum(self):
        basis = rom.EigenBasis(np.full(5, 2.0), np.eye(5))
        assert np.allclose(rom.eigenvalue_gaps(basis), 0.0)

    def test_small_example(self):
        basis = rom.EigenBasis(np.array([-4.0, -1.0, 0.0]), np.eye(3))
        assert np.allclose(rom.eigenvalue_gaps(basis), [3.0, 1.0])

    def test_true_kse_operator_matches_dispersion(self):
        d, L = 64, 22.0
        mat = node.true_linear_matrix("kse", d, L)
        basis = rom.eig_symmetric(mat)
        k = np.arange(d // 2 + 1)
        q = 2 * np.pi * k / L
        sym = q**2 - q**4
        # each nonzero/non-Nyquist symbol appears twice (sin/cos pair)
        expected = np.sort(np.concatenate([sym, sym[1:-1]]))
        assert np.allclose(np.sort(basis.eigenvalues), expected, atol=1e-6)
        gaps = rom.eigenvalue_gaps(basis)
        assert np.allclose(gaps, np.diff(expected), atol=1e-6)


class TestSymmetrization:
    def test_symmetric_passthrough(self):
        d = 8
        model = stabilized_model(d, zero_net=True)
        mat = rom.rom_linear_matrix(model)
        assert np.array_equal(mat, model.linear_matrix())

    def test_asymmetric_warns_and_symmetrizes(self):
        st = dc.ConvStencil(np.array([1.0, 0.0, 0.0]))
        model = node.RhsModel("learned-linear", zero_mlp(8), stencil=st)
        with pytest.warns(UserWarning):
            mat = rom.rom_linear_matrix(model)
        assert np.array_equal(mat, mat.T)


class TestEigenbasisIO:
    def test_round_trip(self, tmp_path):
        basis = rom.eig_symmetric(random_symmetric(10, 13))
        path = tmp_path / "basis.sneb"
        rom.write_eigenbasis(path, basis)
        back = rom.read_eigenbasis(path)
        assert np.array_equal(back.eigenvalues, basis.eigenvalues)
        assert np.array_equal(back.eigenvectors, basis.eigenvectors)
        assert back.ordering == basis.ordering
        path2 = tmp_path / "basis2.sneb"
        rom.write_eigenbasis(path2, back)
        assert path.read_bytes() == path2.read_bytes()
