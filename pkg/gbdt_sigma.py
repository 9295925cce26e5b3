#!/usr/bin/env python3
"""
GBDT v1.0 - Sigma-model and gravitational solutions
=====================================================
u^ = U u with U = I - i J Pi* S^-1 A^-1 Pi solves the sigma-model equation
(alpha u_xi u^-1)_eta + (alpha u_eta u^-1)_xi = 0 and is J-unitary. For real
2x2 data, u~ = alpha d^-1/2 U u is a real gravitational solution with
det u~ = alpha^2.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from gbdt_core import (
    Background, FieldGrid, GbdtState, GbdtTriple, GbdtFlow, GridSpec, SeedKind, StateField,
    GBDT_FD_STEP, sample_grid,
)
from gbdt_matcore import (
    PointFlag, PreconditionError, SingularMatrixError, condition, dagger, fro, scale,
    GBDT_MAX_CONDITION,
)

logger = logging.getLogger("gbdt-sigma")

REALNESS_TOL = 1e-9

# ============================================================================
# SEED + U
# ============================================================================

def seed_solution(bg: Background, point: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(u, q, Q) of the exp-diag seed u = exp((f - h) j)."""
    if bg.seed != SeedKind.EXP_DIAG:
        raise PreconditionError("seed_solution needs the exp-diag seed")
    xi, eta = point
    return bg.u(xi, eta), bg.q(xi, eta), bg.Q(xi, eta)


def calU(state: GbdtState, triple: GbdtTriple) -> np.ndarray:
    """U = I - i J Pi* S^-1 A^-1 Pi, i.e. w_A at lambda = 0."""
    cond = condition(state.a)
    if cond > GBDT_MAX_CONDITION:
        raise SingularMatrixError(f"A not invertible at ({state.xi:.6g}, {state.eta:.6g})", cond)
    jm = triple.jmat
    return np.eye(jm.shape[0]) - 1j * jm @ dagger(state.pi) @ state.s_inverse() @ np.linalg.inv(state.a) @ state.pi


def j_unitarity(u: np.ndarray, jmat: np.ndarray) -> float:
    return fro(dagger(u) @ jmat @ u - jmat) / scale(jmat)

# ============================================================================
# SOLUTION TYPES
# ============================================================================

@dataclass
class SigmaSolution:
    """u^ on a grid (with its FD stencils) and the U factor it came from."""
    grid: FieldGrid
    calu: FieldGrid
    triple: GbdtTriple
    bg: Background
    provenance: Dict = field(default_factory=dict)

    @property
    def jmat(self) -> np.ndarray:
        return self.triple.jmat

    def unitarity_residual(self) -> float:
        ok = self.grid.ok()
        res = [j_unitarity(self.grid.values[i, j], self.jmat) for i, j in zip(*np.nonzero(ok))]
        return max(res, default=0.0)


@dataclass
class GravSolution:
    """u~ on a grid; `hat` carries u^ = U u, whose determinant is the constant d."""
    grid: FieldGrid
    hat: FieldGrid
    d: float
    triple: GbdtTriple
    bg: Background
    provenance: Dict = field(default_factory=dict)

    def imag_leak(self) -> float:
        ok = self.grid.ok()
        return float(np.max(np.abs(self.grid.values[ok].imag), initial=0.0))

    def det_ratio_error(self) -> float:
        """max |det u~ / alpha^2 - 1| over unflagged points."""
        ok = self.grid.ok()
        dets = np.linalg.det(self.grid.values[ok])
        return float(np.max(np.abs(dets / self.grid.alpha[ok] ** 2 - 1.0), initial=0.0))

    def det_hat_spread(self) -> float:
        """max |det u^ - d| over unflagged points."""
        ok = self.hat.ok()
        return float(np.max(np.abs(np.linalg.det(self.hat.values[ok]) - self.d), initial=0.0))

# ============================================================================
# TRANSFORMS
# ============================================================================

def _check_seed(triple: GbdtTriple, bg: Background, problems: list):
    if bg.m != triple.m:
        problems.append(f"background is {bg.m}x{bg.m} but J is {triple.m}x{triple.m}")
        return
    res = max(bg.skew_residual(triple.jmat, x, y) for x, y in ((0.0, 0.0), (0.1, -0.1), (-0.1, 0.1)))
    if res > 1e-12:
        problems.append(f"seed coefficients not J-skew (residual {res:.2e})")
    if bg.seed == SeedKind.EXP_DIAG or bg.u_fn is not None:
        if fro(bg.u(0.0, 0.0) - np.eye(bg.m)) > 1e-12:
            problems.append("seed u(0,0) != I")


def transform_sigma(triple: GbdtTriple, bg: Background, grid: GridSpec, source: Optional[StateField] = None,
                    threads: int = 1, fd_step: Optional[float] = GBDT_FD_STEP) -> SigmaSolution:
    problems = []
    _check_seed(triple, bg, problems)
    if problems:
        raise PreconditionError("; ".join(problems))
    source = source or GbdtFlow(triple, bg)
    xs, ys = grid.xs, grid.ys
    logger.info(f"sigma transform: {len(xs)}x{len(ys)} grid, n={triple.n}, m={triple.m}, threads={threads}")

    def u_hat(st):
        return calU(st, triple) @ bg.u(st.xi, st.eta)

    hat, calu = sample_grid(source, xs, ys, [u_hat, lambda st: calU(st, triple)], triple.m,
                            threads, fd_step, bg.alpha)
    sol = SigmaSolution(hat, calu, triple, bg, {"background": bg.to_dict(), "grid": asdict(grid)})
    logger.info(f"sigma transform: coverage {hat.coverage():.3f}, "
                f"J-unitarity {sol.unitarity_residual():.2e}")
    return sol


def check_grav_triple(triple: GbdtTriple, bg: Background) -> list:
    problems = []
    if triple.m != 2:
        problems.append(f"gravitational case needs m = 2, got {triple.m}")
    for name, mat in (("A", triple.curly_a), ("S(0,0)", triple.s0), ("Pi(0,0)", triple.pi0)):
        if np.max(np.abs(mat.imag), initial=0.0) > 1e-12:
            problems.append(f"{name} is not real")
    if np.max(np.abs((1j * triple.jmat).imag), initial=0.0) > 1e-12:
        problems.append("iJ is not real")
    if condition(triple.curly_a) > GBDT_MAX_CONDITION or condition(triple.s0) > GBDT_MAX_CONDITION:
        problems.append("A and S(0,0) must be invertible")
    _check_seed(triple, bg, problems)
    return problems


def grav_constant(triple: GbdtTriple, bg: Background) -> float:
    """d = det(U(0,0) u(0,0)); must be positive."""
    u00 = calU(triple.initial_state(), triple) @ bg.u(0.0, 0.0)
    d = np.linalg.det(u00)
    if abs(d.imag) > REALNESS_TOL * max(1.0, abs(d)):
        raise PreconditionError(f"d = {d:.6g} is not real")
    if d.real <= 0:
        raise PreconditionError(f"d = {d.real:.6g} must be positive")
    return float(d.real)


def transform_grav(triple: GbdtTriple, bg: Background, grid: GridSpec, source: Optional[StateField] = None,
                   threads: int = 1, fd_step: Optional[float] = GBDT_FD_STEP) -> GravSolution:
    problems = check_grav_triple(triple, bg)
    if problems:
        raise PreconditionError("; ".join(problems))
    d = grav_constant(triple, bg)
    root = np.sqrt(d)
    source = source or GbdtFlow(triple, bg)
    xs, ys = grid.xs, grid.ys
    logger.info(f"grav transform: {len(xs)}x{len(ys)} grid, d = {d:.12g}")

    def u_hat(st):
        return calU(st, triple) @ bg.u(st.xi, st.eta)

    def u_tilde(st):
        return bg.alpha(st.xi, st.eta) / root * u_hat(st)

    tilde, hat = sample_grid(source, xs, ys, [u_tilde, u_hat], 2, threads, fd_step, bg.alpha)
    ok = tilde.ok()
    for i, j in zip(*np.nonzero(ok)):
        if np.max(np.abs(tilde.values[i, j].imag)) > REALNESS_TOL:
            tilde.flag(i, j, PointFlag.PRECONDITION)
            hat.flag(i, j, PointFlag.PRECONDITION)
    if tilde.ok().sum() < ok.sum():
        logger.warning(f"{int(ok.sum() - tilde.ok().sum())} points flagged for complex leakage")
    tilde.values = tilde.values.real.astype(np.complex128)
    sol = GravSolution(tilde, hat, d, triple, bg, {"background": bg.to_dict(), "grid": asdict(grid)})
    logger.info(f"grav transform: coverage {tilde.coverage():.3f}, det u~/alpha^2 error {sol.det_ratio_error():.2e}, "
                f"det u^ spread {sol.det_hat_spread():.2e}")
    return sol

# ============================================================================
# DET NORMALIZATION
# ============================================================================

def normalize_det(alpha: np.ndarray, ucheck: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """u = alpha (det u_check)^-1/2 u_check pointwise.

    `alpha` has the grid shape, `ucheck` the grid shape plus (2, 2). Points
    with nonpositive (or non-real) determinant come back as NaN with a flag.
    """
    alpha = np.asarray(alpha, dtype=float)
    ucheck = np.asarray(ucheck)
    if ucheck.shape != alpha.shape + (2, 2):
        raise PreconditionError(f"u_check shape {ucheck.shape} does not match alpha {alpha.shape} + (2, 2)")
    dets = np.linalg.det(ucheck)
    real = np.abs(np.imag(dets)) <= REALNESS_TOL * np.maximum(1.0, np.abs(dets))
    good = real & (np.real(dets) > 0)
    flags = np.where(good, PointFlag.OK.value, PointFlag.PRECONDITION.value).astype("<U16")
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(good, alpha / np.sqrt(np.where(good, np.real(dets), 1.0)), np.nan)
    u = factor[..., None, None] * ucheck
    if not good.all():
        logger.warning(f"normalize_det: {int((~good).sum())} points with nonpositive det flagged")
    return u, flags
