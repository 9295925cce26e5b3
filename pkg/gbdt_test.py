#!/usr/bin/env python3
"""
GBDT v1.0 - Unit Test Suite
Run: python -m pytest gbdt_test.py -v --tb=short
"""

import os
import logging

import numpy as np
import pytest

os.environ["LOG_DIR"] = "./test_logs"

import gbdt_branchsqrt
from gbdt_matcore import (
    ConfigError, DomainError, PointFlag, PreconditionError, ResonanceError, ShapeError,
    SingularMatrixError, HermitianFlag, as_matrix, commutator, dagger, fro, inv, inverse, matrix_exp, multiply,
    solve_sylvester,
)
from gbdt_branchsqrt import (
    BranchChoice, JordanSpec, shifted_sqrt, sqrt_residual, toeplitz_block_sqrt, toeplitz_upper,
)
from gbdt_core import (
    Background, FieldGrid, GbdtFlow, GbdtTriple, GridSpec, PathSpec, ScalarProfile, explicit_A,
    explicit_a_origin, explicit_pi_jordan2, identity_residual, j_ioffdiag, j_offdiag, jordan2_A,
    jordan2_pi_factors, jordan2_pi_factors_exp, jordan2_resolvents, lambda_of, lambda_radical,
    pauli2, recover_S_jordan2, sample_grid, solve_S_identity, check_signature, z_ring, J_SELECTORS,
    fundamental_solution, spectral_point, darboux_matrix, transformed_coefficients, GbdtState, signature_j,
)
from gbdt_sigma import calU, grav_constant, check_grav_triple, normalize_det, seed_solution, transform_sigma
from gbdt_ernst import (
    HamiltonianFamily, HamiltonianPair, ernst_A, ernst_algebraic, ernst_darboux, ernst_triple, ernst_w0, ernst_propagate,
    seed_hamiltonians, transformed_hamiltonians,
)
from gbdt_verify import (
    CheckResult, ResidualReport, check_compatibility, check_darboux_j, check_identity, check_j_unitarity,
    check_lambda_odes, check_pde_sigma, check_seed_conservation, check_seed_sigma, check_sqrt, check_zero_curvature,
    background_stencils, field_to_csv, load_field_csv, check_transformed_flow, transformed_stencils,
)

os.makedirs("./test_logs", exist_ok=True)


def offset_background() -> Background:
    """f = 1 - xi, h = eta: alpha = 1 - xi + eta stays positive near the origin."""
    return Background.exp_diag(ScalarProfile((1.0, -1.0)), ScalarProfile((0.0, 1.0)))


def sigma_triple() -> GbdtTriple:
    return GbdtTriple(JordanSpec.jordan_block(0.3 + 0.4j, 1), [[1.25]], [[1.0, 0.5]], j_offdiag(1))

# ============================================================================
# MATRIX KERNELS
# ============================================================================

class TestMatCore:
    def test_scalar_promoted_to_matrix(self):
        assert as_matrix(3).shape == (1, 1)

    def test_non_finite_rejected(self):
        with pytest.raises(ShapeError):
            as_matrix([[1.0, np.nan]])

    def test_three_dimensional_rejected(self):
        with pytest.raises(ShapeError):
            as_matrix(np.zeros((2, 2, 2)))

    def test_singular_inverse(self):
        with pytest.raises(SingularMatrixError) as e:
            inv(np.zeros((2, 2)), "zero")
        assert e.value.condition == float("inf")
        assert e.value.flag == PointFlag.SINGULAR

    def test_multiply_checks_shapes(self):
        assert np.allclose(multiply(np.eye(2), np.ones((2, 3))), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            multiply(np.eye(2), np.ones((3, 2)))

    def test_inverse_returns_condition(self):
        x, cond = inverse(np.diag([2.0, 0.5]))
        assert np.allclose(x, np.diag([0.5, 2.0]))
        assert cond == pytest.approx(4.0)

    def test_inverse_condition_ceiling(self):
        with pytest.raises(SingularMatrixError):
            inverse(np.diag([1.0, 1e-10]), max_condition=1e8)

    def test_sylvester_solution(self):
        a = np.array([[1 + 1j, 0.5, 0.2], [0, 2 + 0.5j, -0.3], [0, 0, 3 + 2j]])
        c = np.arange(9).reshape(3, 3) * (1 - 0.5j)
        x = solve_sylvester(a, dagger(a), c)
        assert fro(a @ x - x @ dagger(a) - c) <= 1e-10 * fro(c)

    def test_sylvester_resonance(self):
        with pytest.raises(ResonanceError):
            solve_sylvester(np.eye(1), np.eye(1), np.eye(1))

    def test_matrix_exp(self):
        e = matrix_exp(np.diag([0.0, np.log(2.0)]))
        assert np.allclose(e, np.diag([1.0, 2.0]), atol=1e-14)

    def test_hermitian_flag(self):
        flag = HermitianFlag(1e-10)
        assert flag.check(np.array([[1, 1j], [-1j, 2]]))
        assert not flag.check(np.array([[1, 1j], [1j, 2]]))

    def test_domain_error_names_point(self):
        e = DomainError("root on cut", point=(0.5, -0.25))
        assert e.flag == PointFlag.BRANCH_CUT
        assert "(0.5, -0.25)" in str(e)

    def test_config_error_lists_problems(self):
        e = ConfigError(["a is wrong", "b is wrong"])
        assert e.problems == ["a is wrong", "b is wrong"]
        assert "b is wrong" in str(e)

# ============================================================================
# COMMUTING SQUARE ROOTS
# ============================================================================

class TestBranchSqrt:
    def test_scalar_root(self):
        assert np.allclose(toeplitz_block_sqrt(4.0, 0.0, 1), [2.0])

    def test_jordan2_root_entries(self):
        spec = JordanSpec.jordan_block(2.0, 2)
        r = shifted_sqrt(spec, 0.2)
        s = np.sqrt(1.8)
        assert np.allclose(r, [[s, 1 / (2 * s)], [0, s]], atol=1e-14)

    def test_root_squares_back(self):
        spec = JordanSpec(((1.5 + 0.5j, 3), (-2.0 + 1j, 1)), np.eye(4) + 0.1 * np.triu(np.ones((4, 4)), 1))
        for mu in (0.0, 0.3, -0.7 + 0.2j):
            r = shifted_sqrt(spec, mu)
            assert sqrt_residual(spec, mu, r) <= 1e-12

    def test_roots_commute(self):
        spec = JordanSpec(((2.0, 2), (3.0 + 1j, 2)), np.array([[1, 0.2, 0, 0], [0, 1, 0.3, 0], [0, 0, 1, 0.1],
                                                                [0.2, 0, 0, 1]]))
        r1, r2 = shifted_sqrt(spec, 0.4), shifted_sqrt(spec, -0.6)
        assert fro(commutator(r1, r2)) <= 1e-12

    def test_branch_sign_flips_block(self):
        spec = JordanSpec.jordan_block(2.0 + 0.5j, 3)
        plus = shifted_sqrt(spec, 0.1)
        minus = shifted_sqrt(spec, 0.1, BranchChoice({0: -1}))
        assert np.allclose(minus, -plus, atol=1e-14)

    def test_bad_branch_sign(self):
        with pytest.raises(ShapeError):
            BranchChoice({0: 2})

    def test_residual_only_computed_for_debug(self, monkeypatch, caplog):
        calls = []
        monkeypatch.setattr(gbdt_branchsqrt, "sqrt_residual", lambda *args: calls.append(args) or 0.0)
        spec = JordanSpec.jordan_block(2.0, 2)
        caplog.set_level(logging.INFO, logger="gbdt-branchsqrt")
        shifted_sqrt(spec, 0.2)
        assert calls == []
        caplog.set_level(logging.DEBUG, logger="gbdt-branchsqrt")
        shifted_sqrt(spec, 0.2)
        assert len(calls) == 1

    def test_shift_on_eigenvalue(self):
        with pytest.raises(DomainError) as e:
            shifted_sqrt(JordanSpec.jordan_block(2.0, 2), 2.0)
        assert e.value.flag == PointFlag.POLE

    def test_ill_conditioned_similarity(self):
        with pytest.raises(ShapeError):
            JordanSpec(((1.0, 1), (2.0, 1)), np.array([[1.0, 1.0], [1.0, 1.0 + 1e-12]]))

    def test_toeplitz_upper_layout(self):
        t = toeplitz_upper(np.array([1.0, 2.0, 3.0]))
        assert np.allclose(t, [[1, 2, 3], [0, 1, 2], [0, 0, 1]])

    def test_check_sqrt_passes(self):
        result = check_sqrt(JordanSpec.jordan_block(2.0, 2), [0.2, -0.4, 0.1 + 0.3j])
        assert result.passed
        assert result.coverage == 1.0

# ============================================================================
# SIGNATURES, PROFILES, BACKGROUNDS
# ============================================================================

class TestBackground:
    @pytest.mark.parametrize("name", sorted(J_SELECTORS))
    def test_signature_matrices(self, name):
        j = J_SELECTORS[name](1)
        assert check_signature(j) == []

    def test_pauli2_is_ioffdiag(self):
        assert np.allclose(pauli2(), j_ioffdiag(1))

    def test_non_involution_flagged(self):
        assert check_signature(2 * np.eye(2))

    def test_profile(self):
        g = ScalarProfile((1.0, 0.0, 1.0))
        assert g(2.0) == 5.0
        assert g.derivative(2.0) == 4.0
        assert not g.is_affine()
        assert ScalarProfile.affine(1.0, -1.0).slope() == -1.0

    def test_seed_normalised_at_origin(self):
        bg = offset_background()
        assert np.allclose(bg.u(0.0, 0.0), np.eye(2))

    def test_seed_solves_linear_system(self):
        bg = offset_background()
        h, xi, eta = 1e-5, 0.1, -0.2
        u_inv = np.linalg.inv(bg.u(xi, eta))
        u_xi = (bg.u(xi + h, eta) - bg.u(xi - h, eta)) / (2 * h)
        u_eta = (bg.u(xi, eta + h) - bg.u(xi, eta - h)) / (2 * h)
        assert fro(u_xi @ u_inv - bg.q(xi, eta)) <= 1e-8
        assert fro(u_eta @ u_inv + bg.Q(xi, eta)) <= 1e-8

    def test_seed_solution_tuple(self):
        u, q, big_q = seed_solution(offset_background(), (0.0, 0.0))
        assert np.allclose(u, np.eye(2))
        assert np.allclose(q, np.diag([-1.0, 1.0]))
        assert np.allclose(big_q, np.diag([1.0, -1.0]))

    def test_coefficients_j_skew(self):
        bg = offset_background()
        assert bg.skew_residual(j_offdiag(1), 0.1, 0.2) == 0.0
        assert bg.skew_residual(pauli2(), 0.1, 0.2) <= 1e-15

    def test_seed_checks_pass(self):
        bg = offset_background()
        pts = [(0.1, 0.1), (-0.2, 0.05), (0.15, -0.1)]
        assert check_seed_conservation(bg, j_offdiag(1), pts).passed
        assert check_seed_sigma(bg, pts).passed
        stencils = background_stencils(bg, pts)
        assert check_zero_curvature(stencils, bg, z_samples=z_ring([], 4)).passed

# ============================================================================
# SPECTRAL PARAMETER
# ============================================================================

class TestLambda:
    def test_factored_matches_radical(self):
        bg = offset_background()
        for z in (3 + 1j, -2 + 0.5j, 0.5j):
            assert abs(lambda_of(z, 0.1, -0.1, bg) - lambda_radical(z, 0.1, -0.1, bg)) <= 1e-12

    def test_branch_cut_flagged(self):
        bg = offset_background()
        with pytest.raises(DomainError) as e:
            lambda_of(-5.0, 0.0, 0.0, bg)
        assert e.value.flag == PointFlag.BRANCH_CUT

    def test_odes_hold(self):
        bg = offset_background()
        samples = [(0.1, -0.05, 2 + 1j), (-0.2, 0.1, -1 + 0.7j), (0.05, 0.2, 0.3 - 2j)]
        assert check_lambda_odes(bg, samples).passed

    def test_spectral_point(self):
        bg = offset_background()
        assert spectral_point(2 + 1j, 0.1, 0.05, bg).lam == lambda_of(2 + 1j, 0.1, 0.05, bg)

    def test_fundamental_solution_far_spectrum(self):
        # lambda -> 0 for large |z|, where w reduces to the seed
        bg = offset_background()
        w = fundamental_solution(bg, 1e8 * np.exp(0.25j * np.pi), PathSpec.l_path((0.1, 0.05)))
        assert fro(w - bg.u(0.1, 0.05)) <= 1e-6

    def test_z_ring_size(self):
        ring = z_ring([2 + 1j], 8)
        assert len(ring) == 9
        assert all(abs(z.imag) > 0 for z in ring)

# ============================================================================
# TRIPLES AND THE IDENTITY
# ============================================================================

class TestTriple:
    def test_identity_at_origin(self):
        assert sigma_triple().identity_residual() <= 1e-12

    def test_identity_violation_rejected(self):
        with pytest.raises(PreconditionError):
            GbdtTriple(JordanSpec.jordan_block(0.3 + 0.4j, 1), [[2.0]], [[1.0, 0.5]], j_offdiag(1))

    def test_non_hermitian_s0_rejected(self):
        with pytest.raises(PreconditionError):
            GbdtTriple(np.diag([1j, 2j]), [[1, 1], [0, 1]], np.zeros((2, 2)), j_offdiag(1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            GbdtTriple(np.eye(2), np.eye(2), np.zeros((2, 3)), j_offdiag(1))

    def test_from_identity(self):
        a = np.diag([0.3 + 0.4j, -0.2 + 0.5j])
        pi0 = np.array([[1.0, 0.5j], [0.2, 1.0]])
        triple = GbdtTriple.from_identity(a, pi0, j_offdiag(1))
        assert triple.identity_residual() <= 1e-12
        assert fro(triple.s0 - dagger(triple.s0)) == 0.0

    def test_from_identity_resonant(self):
        with pytest.raises(ResonanceError):
            GbdtTriple.from_identity(np.eye(1) * 0.3, [[1.0, 0.0]], j_offdiag(1))

    def test_solve_s_identity(self):
        a = jordan2_A(0.0, 0.0, 2 + 1j, offset_background())
        pi = np.array([[1.0, 0.5], [0.2, 1.0]])
        s = solve_S_identity(a, pi, j_offdiag(1))
        assert identity_residual(a, s, pi, j_offdiag(1)) <= 1e-12

    def test_identity_transported(self):
        triple = sigma_triple()
        flow = GbdtFlow(triple, offset_background())
        states = [flow.along(PathSpec.l_path(t)) for t in ((0.2, 0.1), (-0.1, 0.25))]
        assert check_identity(states, triple.jmat).passed

    def test_transformed_system(self):
        bg = offset_background()
        pts = [(0.1, 0.05), (-0.1, 0.1)]
        assert check_transformed_flow(sigma_triple(), bg, pts).passed
        stencils = transformed_stencils(sigma_triple(), bg, pts)
        assert check_zero_curvature(stencils, bg, z_samples=z_ring([0.3 + 0.4j], 4)).passed

    def test_darboux_j_unitary(self):
        triple = sigma_triple()
        st = GbdtFlow(triple, offset_background()).along(PathSpec.l_path((0.1, -0.1)))
        assert check_darboux_j([st], triple, [0.5j, 2 + 1j, -3.0]).passed

    def test_darboux_matrix_pole_and_infinity(self):
        triple = sigma_triple()
        st = triple.initial_state()
        with pytest.raises(DomainError) as e:
            darboux_matrix(st, triple, 0.3 + 0.4j)
        assert e.value.flag == PointFlag.POLE
        assert fro(darboux_matrix(st, triple, 1e12) - np.eye(2)) <= 1e-10

    def test_trivial_pi_keeps_coefficients(self):
        triple = GbdtTriple(JordanSpec.jordan_block(0.3, 1), [[1.0]], [[0.0, 0.0]], j_offdiag(1))
        bg = offset_background()
        q_hat, big_q_hat = transformed_coefficients(triple.initial_state(), triple, bg)
        assert fro(q_hat - bg.q(0.0, 0.0)) <= 1e-14
        assert fro(big_q_hat - bg.Q(0.0, 0.0)) <= 1e-14

# ============================================================================
# PATHS
# ============================================================================

class TestPaths:
    def test_l_path(self):
        p = PathSpec.l_path((0.2, -0.1))
        assert p.waypoints == ((0.0, 0.0), (0.2, 0.0), (0.2, -0.1))
        assert abs(p.length() - 0.3) <= 1e-15

    def test_staircase_ends_at_target(self):
        p = PathSpec.staircase((0.2, 0.1), stairs=3)
        assert p.end == pytest.approx((0.2, 0.1))
        assert len(p.waypoints) == 7

    def test_step_bounds(self):
        with pytest.raises(ShapeError):
            PathSpec.l_path((0.1, 0.1), step=1.0)

    def test_path_must_start_at_origin(self):
        flow = GbdtFlow(sigma_triple(), offset_background())
        with pytest.raises(ShapeError):
            flow.along(PathSpec(((0.1, 0.0), (0.2, 0.0))))

# ============================================================================
# EXPLICIT A-FIELD AND THE 2x2 JORDAN CLOSED FORMS
# ============================================================================

class TestExplicitA:
    bg = Background.exp_diag(ScalarProfile((0.0, -1.0)), ScalarProfile((0.0, 1.0)))

    @pytest.mark.parametrize("point", [(0.0, 0.0), (0.1, 0.05), (-0.25, 0.3), (0.3, -0.3)])
    def test_jordan2_matches_square_roots(self, point):
        spec = JordanSpec.jordan_block(2.0, 2)
        assert fro(explicit_A(*point, spec, self.bg) - jordan2_A(*point, 2.0)) <= 1e-12

    def test_resolvents(self):
        a = jordan2_A(0.1, -0.2, 2.0)
        minus, plus = jordan2_resolvents(0.1, -0.2, 2.0)
        assert fro(minus - np.linalg.inv(a - np.eye(2))) <= 1e-12
        assert fro(plus - np.linalg.inv(a + np.eye(2))) <= 1e-12

    def test_pi_factors_through_expm(self):
        e1, e2 = jordan2_pi_factors(0.2, 0.1, 2.0)
        x1, x2 = jordan2_pi_factors_exp(0.2, 0.1, 2.0)
        assert fro(e1 - x1) <= 1e-12 and fro(e2 - x2) <= 1e-12

    def test_anchored_pi_at_origin(self):
        pi0 = np.array([[1.0, 1j], [1.0, 1j]])
        pi = explicit_pi_jordan2((0.0, 0.0), 2.0, pi0, 1, anchored=True)
        assert fro(pi - pi0) <= 1e-14

    def test_closed_forms_need_unit_slopes(self):
        bg = Background.exp_diag(ScalarProfile((1.0, -2.0)), ScalarProfile((0.0, 1.0)))
        with pytest.raises(PreconditionError):
            jordan2_A(0.0, 0.0, 2.0, bg)

    def test_recover_s(self):
        a = jordan2_A(0.0, 0.0, 2 + 1j, offset_background())
        pi = np.array([[1.0, 0.5], [0.2, 1.0]])
        k = 1j * pi @ j_offdiag(1) @ dagger(pi)
        s = recover_S_jordan2(a[0, 0], a[0, 1], k)
        assert fro(s - solve_S_identity(a, pi, j_offdiag(1))) <= 1e-10 * fro(s)

    def test_recover_s_real_eigenvalue(self):
        with pytest.raises(ResonanceError):
            recover_S_jordan2(0.5, 0.1, np.zeros((2, 2)))

    def test_origin_of_explicit_field(self):
        spec = JordanSpec.jordan_block(2 + 1j, 2)
        bg = offset_background()
        assert fro(explicit_a_origin(spec, bg) - explicit_A(0.0, 0.0, spec, bg)) == 0.0

# ============================================================================
# SIGMA AND GRAVITATIONAL SOLUTIONS
# ============================================================================

class TestSigma:
    def test_trivial_pi_gives_seed(self):
        triple = GbdtTriple(JordanSpec.jordan_block(0.3, 1), [[1.0]], [[0.0, 0.0]], j_offdiag(1))
        bg = offset_background()
        sol = transform_sigma(triple, bg, GridSpec(-0.1, 0.1, -0.1, 0.1, 0.05), fd_step=None)
        for i, xi in enumerate(sol.grid.xi):
            for j, eta in enumerate(sol.grid.eta):
                assert fro(sol.grid.values[i, j] - bg.u(xi, eta)) <= 1e-14

    def test_small_grid_solves_pde(self):
        sol = transform_sigma(sigma_triple(), offset_background(), GridSpec(-0.1, 0.1, -0.1, 0.1, 0.05))
        assert sol.grid.coverage() == 1.0
        assert check_pde_sigma(sol.grid).passed
        assert sol.unitarity_residual() <= 1e-9

    def test_calu_needs_invertible_a(self):
        triple = sigma_triple()
        st = triple.initial_state()
        singular = type(st).build(0.0, 0.0, np.zeros((1, 1)), st.pi, st.s, triple.jmat)
        with pytest.raises(SingularMatrixError):
            calU(singular, triple)

    def test_alpha_zero_flags_grid(self):
        bg = Background.exp_diag(ScalarProfile((0.0, -1.0)), ScalarProfile((0.0, 1.0)))
        sol = transform_sigma(sigma_triple(), bg, GridSpec(-0.1, 0.1, -0.1, 0.1, 0.05))
        assert sol.grid.coverage() == 0.0
        assert PointFlag.ALPHA_ZERO.value in sol.grid.flag_counts()

    def test_grav_constant(self):
        triple = GbdtTriple(JordanSpec.jordan_block(0.3, 1), [[1.0]], [[1.0, 0.0]], pauli2())
        bg = offset_background()
        assert check_grav_triple(triple, bg) == []
        assert grav_constant(triple, bg) == pytest.approx(1.0, abs=1e-14)

    def test_grav_rejects_complex_triple(self):
        problems = check_grav_triple(sigma_triple(), offset_background())
        assert any("not real" in p for p in problems)

    def test_normalize_det(self):
        alpha = np.array([[1.0, 2.0]])
        ucheck = np.array([[2 * np.eye(2), np.diag([1.0, -1.0])]])
        u, flags = normalize_det(alpha, ucheck)
        assert np.linalg.det(u[0, 0]) == pytest.approx(1.0)
        assert flags[0, 0] == PointFlag.OK.value
        assert flags[0, 1] == PointFlag.PRECONDITION.value
        assert np.all(np.isnan(u[0, 1]))

    def test_normalize_det_shape(self):
        with pytest.raises(PreconditionError):
            normalize_det(np.ones((2, 2)), np.ones((2, 2, 3, 3)))

# ============================================================================
# ERNST-TYPE SYSTEMS
# ============================================================================

class TestErnst:
    def test_constant_pair_certified(self):
        pair = seed_hamiltonians("constant", 2, j_offdiag(1))
        assert pair.family == HamiltonianFamily.CONSTANT
        assert fro(ernst_algebraic(pair.H(0, 0), pair.Hcal(0, 0), pair.jmat)) == 0.0

    def test_shift_profile_certified(self):
        pair = seed_hamiltonians(HamiltonianFamily.SHIFT_PROFILE, 2, j_offdiag(1))
        assert np.allclose(pair.H(0.1, 0.2), (1 + 0.3 ** 2) * np.eye(2))

    def test_mismatched_constant_pair_rejected(self):
        with pytest.raises(PreconditionError):
            seed_hamiltonians("constant", 2, j_offdiag(1), np.eye(2), 2 * np.eye(2))

    def test_indefinite_rejected(self):
        with pytest.raises(PreconditionError):
            seed_hamiltonians("constant", 2, j_offdiag(1), np.diag([1.0, -1.0]))

    def test_custom_needs_certify(self):
        with pytest.raises(PreconditionError):
            seed_hamiltonians("custom", 2, j_offdiag(1))
        pair = HamiltonianPair(lambda x, y: np.eye(2), lambda x, y: np.eye(2), j_offdiag(1))
        assert pair.certify([(0.0, 0.0)])["algebraic"] == 0.0

    def test_pole_on_spectrum(self):
        with pytest.raises(DomainError) as e:
            ernst_A(np.array([[0.2]]), 0.1, 0.1)
        assert e.value.flag == PointFlag.POLE

    def test_triple_uses_inverse_generator(self):
        triple = ernst_triple(JordanSpec.jordan_block(2 + 1j, 1), [[1.0, 0.5]], j_offdiag(1))
        assert triple.curly_a[0, 0] == pytest.approx(1 / (2 + 1j))
        assert triple.s0[0, 0] == pytest.approx(-2.5)

    def test_w0_j_unitary(self):
        triple = ernst_triple(JordanSpec.jordan_block(2 + 1j, 1), [[1.0, 0.5]], j_offdiag(1))
        pair = seed_hamiltonians("constant", 2, j_offdiag(1))
        st = ernst_propagate(triple, pair, PathSpec.l_path((0.2, 0.1)))
        w0 = ernst_w0(st, triple)
        assert fro(dagger(w0) @ triple.jmat @ w0 - triple.jmat) <= 1e-9

    def test_darboux_on_ernst_line(self):
        triple = ernst_triple(JordanSpec.jordan_block(2 + 1j, 1), [[1.0, 0.5]], j_offdiag(1))
        pair = seed_hamiltonians("constant", 2, j_offdiag(1))
        st = ernst_propagate(triple, pair, PathSpec.l_path((0.2, 0.1)))
        with pytest.raises(DomainError):
            ernst_darboux(st, triple, 0.3)
        v = ernst_darboux(st, triple, 1.0 + 1j, w0=np.eye(2))
        assert fro(v - darboux_matrix(st, triple, 1.0 / (1.0 + 1j - 0.3))) <= 1e-12

    def test_transformed_pair_stays_positive(self):
        triple = ernst_triple(JordanSpec.jordan_block(2 + 1j, 1), [[1.0, 0.5]], j_offdiag(1))
        pair = seed_hamiltonians("constant", 2, j_offdiag(1))
        st = ernst_propagate(triple, pair, PathSpec.l_path((0.2, 0.1)))
        for h in transformed_hamiltonians(st, pair, triple):
            assert fro(h - dagger(h)) <= 1e-10 * fro(h)
            assert np.linalg.eigvalsh(h).min() >= -1e-10

# ============================================================================
# REPORTS AND THE FIELD CODEC
# ============================================================================

class TestReports:
    def test_coverage_floor(self):
        r = CheckResult.from_residuals("x", [1e-12, None, None], 1e-10)
        assert r.coverage == pytest.approx(1 / 3)
        assert not r.passed

    def test_empty_fails(self):
        assert not CheckResult.from_residuals("x", [], 1.0).passed

    def test_non_finite_fails(self):
        assert not CheckResult.from_residuals("x", [float("nan"), 0.0], 1.0).passed

    def test_report_aggregates(self):
        report = ResidualReport().add(CheckResult.from_residuals("a", [1e-3], 1e-2),
                                      CheckResult.from_residuals("b", [1.0], 1e-2))
        assert not report.passed
        assert report.failures() == ["b"]
        assert report.max_residual == 1.0
        assert report["a"].passed
        assert report.to_dict()["checks"][1]["passed"] is False

    def test_csv_reload_reproduces_residual(self, tmp_path):
        bg = offset_background()
        sol = transform_sigma(sigma_triple(), bg, GridSpec(-0.1, 0.1, -0.1, 0.1, 0.05), fd_step=None)
        sol.grid.flag(0, 0, PointFlag.SINGULAR)
        path = tmp_path / "field.csv"
        path.write_text(field_to_csv(sol.grid))
        loaded = load_field_csv(str(path), bg.alpha)
        assert loaded.flags[0, 0] == PointFlag.SINGULAR.value
        before = check_pde_sigma(sol.grid, floor=0.0).max_residual
        after = check_pde_sigma(loaded, floor=0.0).max_residual
        assert abs(before - after) <= 1e-12

    def test_csv_header(self, tmp_path):
        grid = FieldGrid.empty([0.0], [0.0], 2)
        text = field_to_csv(grid)
        assert text.splitlines()[0].startswith("xi,eta,flag,entry_00_re,entry_00_im,entry_01_re")

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ShapeError):
            load_field_csv(str(path))

    def test_sample_grid_shares_flags(self):
        triple = sigma_triple()
        flow = GbdtFlow(triple, offset_background())
        a, b = sample_grid(flow, [0.0, 0.1], [0.0, 0.1], [lambda st: st.a, lambda st: st.s], 1)
        assert a.coverage() == 1.0 and b.coverage() == 1.0
        assert a.stencils is None

# ============================================================================
# CORRUPTED INPUTS
# ============================================================================

class TestCorruptedInputs:
    def test_identity_rejects_shifted_s(self):
        triple = sigma_triple()
        st = triple.initial_state()
        assert check_identity([st], triple.jmat).passed
        bad = GbdtState.build(0.0, 0.0, st.a, st.pi, st.s + 1j * np.eye(1), triple.jmat)
        assert not check_identity([bad], triple.jmat).passed

    def test_zero_curvature_rejects_random_coefficients(self):
        rng = np.random.default_rng(3)
        bg = offset_background()
        pts = [(0.1, 0.05), (-0.1, 0.1)]
        assert check_zero_curvature(background_stencils(bg, pts), bg).passed
        stencils = []
        for pt in pts:
            q = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
            big_q = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
            stencils.append((pt, np.broadcast_to(q, (3, 3, 2, 2)), np.broadcast_to(big_q, (3, 3, 2, 2))))
        assert not check_zero_curvature(stencils, bg).passed

    def test_compatibility_rejects_non_commuting_background(self):
        triple = sigma_triple()
        targets = [(0.2, 0.1), (-0.1, 0.15)]
        assert check_compatibility(triple, offset_background(), targets).passed
        d = signature_j(1)
        kink = np.array([[0.0, 0.5j], [0.0, 0.0]])
        bent = Background.custom(ScalarProfile((1.0, -1.0)), ScalarProfile((0.0, 1.0)),
                                 lambda xi, eta: -d, lambda xi, eta: d + kink)
        assert bent.skew_residual(triple.jmat, 0.1, 0.1) <= 1e-14
        assert not check_compatibility(triple, bent, targets).passed

    def test_j_unitarity_rejects_scaled_field(self):
        sol = transform_sigma(sigma_triple(), offset_background(), GridSpec(-0.1, 0.1, -0.1, 0.1, 0.05), fd_step=None)
        assert check_j_unitarity(sol.grid, j_offdiag(1)).passed
        sol.grid.values[2, 2] = sol.grid.values[2, 2] @ np.diag([2.0, 1.0])
        assert not check_j_unitarity(sol.grid, j_offdiag(1)).passed

    def test_darboux_rejects_broken_identity(self):
        triple = sigma_triple()
        st = triple.initial_state()
        lambdas = [0.5j, 2 + 1j, -3.0]
        assert check_darboux_j([st], triple, lambdas).passed
        bad = GbdtState.build(0.0, 0.0, st.a, st.pi, st.s + np.eye(1), triple.jmat)
        assert not check_darboux_j([bad], triple, lambdas).passed
