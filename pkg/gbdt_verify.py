#!/usr/bin/env python3
"""
GBDT v1.0 - Residual oracles
=============================
Every identity the constructions claim, restated as a numerical check over
fields produced by the other modules (or re-ingested from CSV exports).
Each check returns a CheckResult; a check passes iff its worst residual is
within tolerance AND enough of the grid was evaluated (coverage floor), so
nothing passes by exclusion.
"""

import os
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from gbdt_branchsqrt import BranchChoice, JordanSpec, PRINCIPAL, shifted_sqrt, sqrt_residual
from gbdt_core import (
    Background, FieldGrid, FundamentalFlow, GbdtFlow, GbdtState, GbdtTriple, PathSpec,
    GBDT_FD_STEP, GBDT_ODE_STEP, STENCIL, darboux_matrix, explicit_A, identity_residual, lambda_of,
    transformed_coefficients,
)
from gbdt_ernst import (
    ErnstFlow, HamiltonianGrid, HamiltonianPair, ernst_algebraic, ernst_darboux, ernst_propagate,
    ernst_w0, integrate_w0, psd_floor, transformed_hamiltonians, w0_rate,
)
from gbdt_matcore import GbdtError, PointFlag, ShapeError, as_matrix, commutator, dagger, fro, scale
from gbdt_sigma import calU, j_unitarity

logger = logging.getLogger("gbdt-verify")

GBDT_COVERAGE_FLOOR = float(os.getenv("GBDT_COVERAGE_FLOOR", "0.9"))
# PDE tolerance C * step^2 (1e-5 at the 1e-3 FD step)
PDE_FD_CONSTANT = 10.0

Point = Tuple[float, float]

# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class CheckResult:
    name: str
    max_residual: float
    mean_residual: float
    tolerance: float
    coverage: float
    floor: float = GBDT_COVERAGE_FLOOR
    points: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_residual <= self.tolerance and self.coverage >= self.floor)

    @classmethod
    def from_residuals(cls, name: str, residuals: Sequence[Optional[float]], tolerance: float,
                       floor: float = GBDT_COVERAGE_FLOOR) -> "CheckResult":
        """`None` marks a point that could not be evaluated."""
        covered = [float(r) for r in residuals if r is not None]
        total = len(residuals)
        if covered and not np.all(np.isfinite(covered)):
            worst = float("inf")
        else:
            worst = max(covered, default=0.0)
        result = cls(name, worst, float(np.mean(covered)) if covered else 0.0, tolerance,
                     len(covered) / total if total else 0.0, floor, total)
        log = logger.info if result.passed else logger.warning
        log(f"{name}: max {result.max_residual:.3e} (tol {tolerance:.0e}), coverage {result.coverage:.3f} "
            f"-> {'pass' if result.passed else 'FAIL'}")
        return result

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class ResidualReport:
    checks: List[CheckResult] = field(default_factory=list)

    def add(self, *results: CheckResult) -> "ResidualReport":
        self.checks.extend(results)
        return self

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_residual(self) -> float:
        return max((c.max_residual for c in self.checks), default=0.0)

    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "max_residual": self.max_residual,
                "checks": [c.to_dict() for c in self.checks]}

# ============================================================================
# FIELD HELPERS
# ============================================================================

def _neighbourhoods(grid: FieldGrid, use_stencils: Optional[bool] = None):
    """Yield (i, j, values 3x3, alpha 3x3, hx, hy) or (i, j, None, ...) for uncovered points."""
    if use_stencils is None:
        use_stencils = grid.stencils is not None
    if use_stencils:
        if grid.stencils is None or grid.fd_step is None or grid.alpha_stencils is None:
            raise ShapeError("field carries no FD stencils")
        h = grid.fd_step
        for i in range(len(grid.xi)):
            for j in range(len(grid.eta)):
                nb = grid.stencils[i, j]
                ok = grid.flags[i, j] == PointFlag.OK.value and np.all(np.isfinite(nb))
                yield i, j, (nb if ok else None), grid.alpha_stencils[i, j], h, h
        return
    nx, ny = len(grid.xi), len(grid.eta)
    if nx < 3 or ny < 3 or grid.alpha is None:
        raise ShapeError(f"grid {nx}x{ny} too coarse for the central-difference stencil")
    ok = grid.ok()
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            hx = (grid.xi[i + 1] - grid.xi[i - 1]) / 2
            hy = (grid.eta[j + 1] - grid.eta[j - 1]) / 2
            good = ok[i - 1:i + 2, j - 1:j + 2].all()
            yield (i, j, grid.values[i - 1:i + 2, j - 1:j + 2] if good else None,
                   grid.alpha[i - 1:i + 2, j - 1:j + 2], hx, hy)


def sigma_pde_residual(nb: np.ndarray, alpha: np.ndarray, hx: float, hy: float) -> float:
    """|(alpha u_xi u^-1)_eta + (alpha u_eta u^-1)_xi| on a 3x3 neighbourhood."""
    p = [alpha[1, b] * (nb[2, b] - nb[0, b]) / (2 * hx) @ np.linalg.inv(nb[1, b]) for b in (0, 2)]
    q = [alpha[a, 1] * (nb[a, 2] - nb[a, 0]) / (2 * hy) @ np.linalg.inv(nb[a, 1]) for a in (0, 2)]
    return fro((p[1] - p[0]) / (2 * hy) + (q[1] - q[0]) / (2 * hx))

# ============================================================================
# SIGMA / GRAVITATIONAL CHECKS
# ============================================================================

def check_pde_sigma(grid: FieldGrid, fd_step: Optional[float] = None, tol: Optional[float] = None,
                    floor: float = GBDT_COVERAGE_FLOOR, use_stencils: Optional[bool] = None,
                    name: str = "pde_sigma") -> CheckResult:
    """Central-difference residual of the sigma-model equation.

    Uses the FD stencils when the field has them, otherwise differences
    along the grid itself (interior points only).
    """
    residuals, steps = [], []
    for i, j, nb, alpha, hx, hy in _neighbourhoods(grid, use_stencils):
        if fd_step is not None and abs(max(hx, hy) - fd_step) > 1e-6 * fd_step:
            raise ShapeError(f"field spacing {max(hx, hy):.3g} does not match the FD step {fd_step:.3g}")
        steps.append(max(hx, hy))
        residuals.append(None if nb is None else sigma_pde_residual(nb, alpha, hx, hy))
    if tol is None:
        tol = max(1e-5, PDE_FD_CONSTANT * max(steps, default=0.0) ** 2)
    return CheckResult.from_residuals(name, residuals, tol, floor)


def check_scaling_covariance(grid: FieldGrid, c: np.ndarray, tol: float = 1e-9,
                             use_stencils: Optional[bool] = None) -> CheckResult:
    """PDE residuals of u and of u c agree pointwise for a constant invertible c."""
    c = as_matrix(c, "c")
    scaled = replace(grid, values=grid.values @ c,
                     stencils=None if grid.stencils is None else grid.stencils @ c)
    residuals = []
    for base, moved in zip(_neighbourhoods(grid, use_stencils), _neighbourhoods(scaled, use_stencils)):
        _, _, nb, alpha, hx, hy = base
        if nb is None or moved[2] is None:
            residuals.append(None)
            continue
        residuals.append(abs(sigma_pde_residual(nb, alpha, hx, hy) - sigma_pde_residual(moved[2], alpha, hx, hy)))
    return CheckResult.from_residuals("scaling_covariance", residuals, tol)


def _grid_residuals(grid: FieldGrid, fn) -> List[Optional[float]]:
    ok = grid.ok()
    return [fn(grid.values[i, j], i, j) if ok[i, j] else None
            for i in range(len(grid.xi)) for j in range(len(grid.eta))]


def check_j_unitarity(grid: FieldGrid, jmat: np.ndarray, tol: float = 1e-9,
                      floor: float = GBDT_COVERAGE_FLOOR, name: str = "j_unitarity") -> CheckResult:
    return CheckResult.from_residuals(name, _grid_residuals(grid, lambda u, i, j: j_unitarity(u, jmat)), tol, floor)


def check_det_constant(grid: FieldGrid, d: float, tol: float = 1e-8,
                       floor: float = GBDT_COVERAGE_FLOOR) -> CheckResult:
    return CheckResult.from_residuals(
        "det_constant", _grid_residuals(grid, lambda u, i, j: abs(np.linalg.det(u) - d)), tol, floor)


def check_det_alpha(grid: FieldGrid, tol: float = 1e-8, floor: float = GBDT_COVERAGE_FLOOR) -> CheckResult:
    """det u = alpha^2, relative."""
    return CheckResult.from_residuals(
        "det_alpha", _grid_residuals(grid, lambda u, i, j: abs(np.linalg.det(u) / grid.alpha[i, j] ** 2 - 1)),
        tol, floor)


def check_realness(grid: FieldGrid, tol: float = 1e-9, floor: float = GBDT_COVERAGE_FLOOR) -> CheckResult:
    return CheckResult.from_residuals(
        "realness", _grid_residuals(grid, lambda u, i, j: float(np.max(np.abs(u.imag)))), tol, floor)


def check_trace_identity(grid: FieldGrid, tol: float = 1e-5, floor: float = GBDT_COVERAGE_FLOOR) -> CheckResult:
    """tr(u_xi u^-1) = (det u)_xi / det u (and in eta) by central differences."""
    residuals = []
    for i, j, nb, _, hx, hy in _neighbourhoods(grid):
        if nb is None:
            residuals.append(None)
            continue
        u_inv = np.linalg.inv(nb[1, 1])
        det = np.linalg.det(nb[1, 1])
        r_xi = np.trace((nb[2, 1] - nb[0, 1]) / (2 * hx) @ u_inv) - (np.linalg.det(nb[2, 1]) - np.linalg.det(nb[0, 1])) / (2 * hx) / det
        r_eta = np.trace((nb[1, 2] - nb[1, 0]) / (2 * hy) @ u_inv) - (np.linalg.det(nb[1, 2]) - np.linalg.det(nb[1, 0])) / (2 * hy) / det
        residuals.append(max(abs(r_xi), abs(r_eta)))
    return CheckResult.from_residuals("trace_identity", residuals, tol, floor)


def check_seed_conservation(bg: Background, jmat: np.ndarray, points: Sequence[Point],
                            tol: float = 1e-9) -> CheckResult:
    """u* J u equals its value at the origin."""
    u0 = bg.u(0.0, 0.0)
    ref = dagger(u0) @ jmat @ u0
    residuals = []
    for xi, eta in points:
        u = bg.u(xi, eta)
        residuals.append(fro(dagger(u) @ jmat @ u - ref) / scale(ref))
    return CheckResult.from_residuals("seed_conservation", residuals, tol)


def check_seed_sigma(bg: Background, points: Sequence[Point], fd_step: float = GBDT_FD_STEP,
                     tol: float = 1e-5) -> CheckResult:
    residuals = []
    for xi, eta in points:
        nb = np.array([[bg.u(xi + a * fd_step, eta + b * fd_step) for b in STENCIL] for a in STENCIL])
        alpha = np.array([[bg.alpha(xi + a * fd_step, eta + b * fd_step) for b in STENCIL] for a in STENCIL])
        residuals.append(sigma_pde_residual(nb, alpha, fd_step, fd_step))
    return CheckResult.from_residuals("seed_sigma", residuals, tol)

# ============================================================================
# GBDT CORE CHECKS
# ============================================================================

def check_identity(states: Iterable, jmat: np.ndarray, tol: float = 1e-8, hermitian_tol: float = 1e-10,
                   floor: float = GBDT_COVERAGE_FLOOR) -> CheckResult:
    """Identity A S - S A* = i Pi J Pi* and S = S* for states (PointFlag entries count as uncovered)."""
    residuals = []
    for st in states:
        if isinstance(st, PointFlag):
            residuals.append(None)
            continue
        ident = identity_residual(st.a, st.s, st.pi, jmat)
        herm = fro(st.s - dagger(st.s)) / scale(st.s)
        # a Hermiticity breach counts as a full failure of the identity check
        residuals.append(max(ident, herm * tol / hermitian_tol))
    return CheckResult.from_residuals("identity", residuals, tol, floor)


def _compare_paths(name: str, along: Callable[[PathSpec], GbdtState], targets: Sequence[Point],
                   step: float, tol: float, stairs: int) -> CheckResult:
    residuals = []
    for target in targets:
        try:
            a = along(PathSpec.l_path(target, step))
            b = along(PathSpec.staircase(target, step, stairs))
        except GbdtError as e:
            logger.debug(f"{name} target {target} flagged: {e}")
            residuals.append(None)
            continue
        residuals.append(max(fro(a.pi - b.pi) / scale(a.pi), fro(a.s - b.s) / scale(a.s)))
    return CheckResult.from_residuals(name, residuals, tol)


def check_compatibility(triple: GbdtTriple, bg: Background, targets: Sequence[Point],
                        step: float = GBDT_ODE_STEP, tol: float = 1e-7, stairs: int = 4) -> CheckResult:
    """Path independence of Pi and S: L-path vs staircase per target."""
    return _compare_paths("compatibility", GbdtFlow(triple, bg, step).along, targets, step, tol, stairs)


def check_ernst_compatibility(triple: GbdtTriple, pair: HamiltonianPair, targets: Sequence[Point],
                              step: float = GBDT_ODE_STEP, tol: float = 1e-7, stairs: int = 4) -> CheckResult:
    """Same comparison for the Ernst flow, where A moves with xi + eta only."""
    return _compare_paths("ernst_compatibility", lambda path: ernst_propagate(triple, pair, path),
                          targets, step, tol, stairs)


def check_explicit_A(spec: JordanSpec, bg: Background, points: Sequence[Point], fd_step: float = GBDT_FD_STEP,
                     tol: float = 1e-6, branch: BranchChoice = PRINCIPAL) -> CheckResult:
    """Central differences of the explicit A-field against the A-flow equations."""
    n = spec.size
    eye = np.eye(n)
    residuals = []
    for xi, eta in points:
        try:
            a = explicit_A(xi, eta, spec, bg, branch)
            a_xi = (explicit_A(xi + fd_step, eta, spec, bg, branch) - explicit_A(xi - fd_step, eta, spec, bg, branch)) / (2 * fd_step)
            a_eta = (explicit_A(xi, eta + fd_step, spec, bg, branch) - explicit_A(xi, eta - fd_step, spec, bg, branch)) / (2 * fd_step)
            alpha = bg.alpha(xi, eta)
            r, r2 = bg.alpha_xi(xi) / alpha, bg.alpha_eta(eta) / alpha
            rhs_xi = -r * (a + 2 * eye + 2 * np.linalg.inv(a - eye))
            rhs_eta = -r2 * a + 2 * r2 * eye - 2 * r2 * np.linalg.inv(a + eye)
        except GbdtError:
            residuals.append(None)
            continue
        residuals.append(max(fro(a_xi - rhs_xi), fro(a_eta - rhs_eta)) / scale(a))
    return CheckResult.from_residuals("explicit_A_flow", residuals, tol)


def check_mixed_partials(spec: JordanSpec, bg: Background, points: Sequence[Point], fd_step: float = GBDT_FD_STEP,
                         tol: float = 1e-5, branch: BranchChoice = PRINCIPAL) -> CheckResult:
    """A_xi_eta = 2 (alpha_xi alpha_eta / alpha^2) A^3 (A - I)^-1 (A + I)^-1 for the explicit field."""
    eye = np.eye(spec.size)
    residuals = []
    for xi, eta in points:
        try:
            corner = {(sa, sb): explicit_A(xi + sa * fd_step, eta + sb * fd_step, spec, bg, branch)
                      for sa in (-1, 1) for sb in (-1, 1)}
            a = explicit_A(xi, eta, spec, bg, branch)
        except GbdtError:
            residuals.append(None)
            continue
        mixed = (corner[1, 1] - corner[1, -1] - corner[-1, 1] + corner[-1, -1]) / (4 * fd_step ** 2)
        alpha = bg.alpha(xi, eta)
        coeff = 2 * bg.alpha_xi(xi) * bg.alpha_eta(eta) / alpha ** 2
        closed = coeff * a @ a @ a @ np.linalg.inv(a - eye) @ np.linalg.inv(a + eye)
        residuals.append(fro(mixed - closed) / scale(closed))
    return CheckResult.from_residuals("mixed_partials", residuals, tol)


def check_lambda_odes(bg: Background, samples: Sequence[Tuple[float, float, complex]], fd_step: float = 1e-5,
                      tol: float = 1e-6, branch: Tuple[int, int] = (1, 1)) -> CheckResult:
    """lambda_xi = -(alpha_xi/alpha) lam (lam+1)/(lam-1), lambda_eta = -(alpha_eta/alpha) lam (lam-1)/(lam+1)."""
    residuals = []
    for xi, eta, z in samples:
        try:
            lam = lambda_of(z, xi, eta, bg, branch)
            d_xi = (lambda_of(z, xi + fd_step, eta, bg, branch) - lambda_of(z, xi - fd_step, eta, bg, branch)) / (2 * fd_step)
            d_eta = (lambda_of(z, xi, eta + fd_step, bg, branch) - lambda_of(z, xi, eta - fd_step, bg, branch)) / (2 * fd_step)
        except GbdtError:
            residuals.append(None)
            continue
        alpha = bg.alpha(xi, eta)
        rhs_xi = -bg.alpha_xi(xi) / alpha * lam * (lam + 1) / (lam - 1)
        rhs_eta = -bg.alpha_eta(eta) / alpha * lam * (lam - 1) / (lam + 1)
        residuals.append(max(abs(d_xi - rhs_xi), abs(d_eta - rhs_eta)))
    return CheckResult.from_residuals("lambda_odes", residuals, tol)


CoefficientStencil = Tuple[Point, np.ndarray, np.ndarray]


def background_stencils(bg: Background, points: Sequence[Point], fd_step: float = GBDT_FD_STEP
                        ) -> List[CoefficientStencil]:
    out = []
    for xi, eta in points:
        q = np.array([[bg.q(xi + a * fd_step, eta + b * fd_step) for b in (-1, 0, 1)] for a in (-1, 0, 1)])
        big_q = np.array([[bg.Q(xi + a * fd_step, eta + b * fd_step) for b in (-1, 0, 1)] for a in (-1, 0, 1)])
        out.append(((xi, eta), q, big_q))
    return out


def transformed_stencils(triple: GbdtTriple, bg: Background, points: Sequence[Point],
                         fd_step: float = GBDT_FD_STEP, step: float = GBDT_ODE_STEP) -> List[Optional[CoefficientStencil]]:
    """(q^, Q^) on 3x3 stencils, by hops from the L-path state at each point."""
    flow = GbdtFlow(triple, bg, step)
    out = []
    for xi, eta in points:
        try:
            st = flow.along(PathSpec.l_path((xi, eta), step))
            q = np.empty((3, 3, triple.m, triple.m), dtype=np.complex128)
            big_q = np.empty_like(q)
            for ia, a in enumerate((-1, 0, 1)):
                for ib, b in enumerate((-1, 0, 1)):
                    hopped = st if a == b == 0 else flow.hop(st, xi + a * fd_step, eta + b * fd_step)
                    q[ia, ib], big_q[ia, ib] = transformed_coefficients(hopped, triple, bg)
        except GbdtError as e:
            logger.debug(f"transformed coefficients at {(xi, eta)} flagged: {e}")
            out.append(None)
            continue
        out.append(((xi, eta), q, big_q))
    return out


def check_zero_curvature(stencils: Sequence[Optional[CoefficientStencil]], bg: Background,
                         fd_step: float = GBDT_FD_STEP, z_samples: Sequence[complex] = (),
                         tol: float = 1e-5, name: str = "zero_curvature") -> CheckResult:
    """q_eta + Q_xi = [q, Q], (alpha q)_eta = (alpha Q)_xi and the lambda-resolved form.

    The lambda-resolved residual is G_eta - F_xi + [G, F] with G = -q/(lam - 1),
    F = -Q/(lam + 1) and lam = lambda(xi, eta, z), differenced at fixed z.
    """
    h = fd_step
    residuals = []
    for item in stencils:
        if item is None:
            residuals.append(None)
            continue
        (xi, eta), q, big_q = item
        q_eta = (q[1, 2] - q[1, 0]) / (2 * h)
        big_q_xi = (big_q[2, 1] - big_q[0, 1]) / (2 * h)
        first = fro(q_eta + big_q_xi - commutator(q[1, 1], big_q[1, 1]))
        aq_eta = (bg.alpha(xi, eta + h) * q[1, 2] - bg.alpha(xi, eta - h) * q[1, 0]) / (2 * h)
        aQ_xi = (bg.alpha(xi + h, eta) * big_q[2, 1] - bg.alpha(xi - h, eta) * big_q[0, 1]) / (2 * h)
        res = max(first, fro(aq_eta - aQ_xi))
        try:
            for z in z_samples:
                def lam(a, b):
                    return lambda_of(z, xi + a * h, eta + b * h, bg)
                g = [-q[1, 1 + b] / (lam(0, b) - 1) for b in (-1, 1)]
                f = [-big_q[1 + a, 1] / (lam(a, 0) + 1) for a in (-1, 1)]
                g0, f0 = -q[1, 1] / (lam(0, 0) - 1), -big_q[1, 1] / (lam(0, 0) + 1)
                res = max(res, fro((g[1] - g[0]) / (2 * h) - (f[1] - f[0]) / (2 * h) + commutator(g0, f0)))
        except GbdtError:
            residuals.append(None)
            continue
        residuals.append(res)
    return CheckResult.from_residuals(name, residuals, tol)


def check_transformed_flow(triple: GbdtTriple, bg: Background, points: Sequence[Point],
                           fd_step: float = GBDT_FD_STEP, tol: float = 1e-5,
                           step: float = GBDT_ODE_STEP) -> CheckResult:
    """u^_xi u^-1 = q^ and u^_eta u^-1 = -Q^ by central differences."""
    flow = GbdtFlow(triple, bg, step)
    residuals = []
    for xi, eta in points:
        try:
            st = flow.along(PathSpec.l_path((xi, eta), step))
            hat = {}
            for a, b in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                hopped = flow.hop(st, xi + a * fd_step, eta + b * fd_step)
                hat[a, b] = calU(hopped, triple) @ bg.u(hopped.xi, hopped.eta)
            u_inv = np.linalg.inv(calU(st, triple) @ bg.u(xi, eta))
            q_hat, big_q_hat = transformed_coefficients(st, triple, bg)
        except GbdtError:
            residuals.append(None)
            continue
        r_xi = (hat[1, 0] - hat[-1, 0]) / (2 * fd_step) @ u_inv - q_hat
        r_eta = (hat[0, 1] - hat[0, -1]) / (2 * fd_step) @ u_inv + big_q_hat
        residuals.append(max(fro(r_xi), fro(r_eta)))
    return CheckResult.from_residuals("transformed_flow", residuals, tol)


def check_darboux_j(states: Iterable, triple: GbdtTriple, lambdas: Sequence[complex],
                    tol: float = 1e-9) -> CheckResult:
    """w_A(conj lam)* J w_A(lam) = J."""
    jm = triple.jmat
    residuals = []
    for st in states:
        if isinstance(st, PointFlag):
            residuals.append(None)
            continue
        try:
            res = max(fro(dagger(darboux_matrix(st, triple, np.conj(lam))) @ jm @ darboux_matrix(st, triple, lam) - jm)
                      for lam in lambdas)
        except GbdtError:
            residuals.append(None)
            continue
        residuals.append(res / scale(jm))
    return CheckResult.from_residuals("darboux_j", residuals, tol)


def check_fundamental(triple: GbdtTriple, bg: Background, target: Point, z_samples: Sequence[complex],
                      fd_step: float = GBDT_FD_STEP, tol: float = 1e-5, step: float = GBDT_ODE_STEP) -> CheckResult:
    """w^ = w_A(lambda) w solves the transformed linear system at the target."""
    flow = GbdtFlow(triple, bg, step)
    st = flow.along(PathSpec.l_path(target, step))
    states = {(0, 0): st}
    for a, b in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        states[a, b] = flow.hop(st, target[0] + a * fd_step, target[1] + b * fd_step)
    q_hat, big_q_hat = transformed_coefficients(st, triple, bg)
    residuals = []
    for z in z_samples:
        try:
            fund = FundamentalFlow(bg, z, step=step)
            (w,), err = fund.integrate((np.eye(triple.m, dtype=np.complex128),),
                                       list(PathSpec.l_path(target, step).waypoints))
            if abs(np.linalg.det(w)) <= 1e-12:
                residuals.append(None)
                continue
            hat = {}
            for k, s in states.items():
                wk = w if k == (0, 0) else fund.hop(w, target, s.point)
                hat[k] = darboux_matrix(s, triple, lambda_of(z, s.xi, s.eta, bg)) @ wk
            lam = lambda_of(z, target[0], target[1], bg)
        except GbdtError:
            residuals.append(None)
            continue
        r_xi = (hat[1, 0] - hat[-1, 0]) / (2 * fd_step) + q_hat @ hat[0, 0] / (lam - 1)
        r_eta = (hat[0, 1] - hat[0, -1]) / (2 * fd_step) + big_q_hat @ hat[0, 0] / (lam + 1)
        residuals.append(max(fro(r_xi), fro(r_eta)) / scale(hat[0, 0]))
    return CheckResult.from_residuals("fundamental", residuals, tol)


def check_sqrt(spec: JordanSpec, shifts: Sequence[complex], branch: BranchChoice = PRINCIPAL,
               tol: float = 1e-10) -> CheckResult:
    """R(mu)^2 = A - mu I and pairwise commutators of the roots."""
    roots, residuals = [], []
    for mu in shifts:
        try:
            r = shifted_sqrt(spec, mu, branch)
        except GbdtError:
            residuals.append(None)
            continue
        roots.append(r)
        residuals.append(sqrt_residual(spec, mu, r))
    comm = [fro(commutator(r1, r2)) / scale(spec.matrix()) for k, r1 in enumerate(roots) for r2 in roots[k + 1:]]
    return CheckResult.from_residuals("sqrt", residuals + comm, tol)

# ============================================================================
# ERNST CHECKS
# ============================================================================

def check_ernst(hgrid: HamiltonianGrid, z_samples: Sequence[complex] = (), algebraic_tol: float = 1e-10,
                derivative_tol: float = 1e-6, floor: float = GBDT_COVERAGE_FLOOR,
                prefix: str = "ernst") -> List[CheckResult]:
    """JH - JHcal + i[JH, JHcal] = 0 pointwise; H_eta = Hcal_xi and the lambda-resolved form by FD."""
    h, hc, jm = hgrid.h, hgrid.hcal, hgrid.jmat
    algebraic, derivative, spectral = [], [], []
    ok = h.ok() & hc.ok()
    for i in range(len(h.xi)):
        for j in range(len(h.eta)):
            if not ok[i, j]:
                algebraic.append(None)
                derivative.append(None)
                spectral.append(None)
                continue
            alg = ernst_algebraic(h.values[i, j], hc.values[i, j], jm)
            algebraic.append(fro(alg))
            if h.stencils is None:
                derivative.append(None)
                spectral.append(None)
                continue
            step = h.fd_step
            diff = (h.stencils[i, j, 1, 2] - h.stencils[i, j, 1, 0] - hc.stencils[i, j, 2, 1] + hc.stencils[i, j, 0, 1]) / (2 * step)
            derivative.append(fro(diff))
            s = h.xi[i] + h.eta[j]
            spectral.append(max((fro(1j * jm @ diff / (z - s) + 1j * alg / (z - s) ** 2) for z in z_samples),
                                default=0.0))
    return [
        CheckResult.from_residuals(f"{prefix}_algebraic", algebraic, algebraic_tol, floor),
        CheckResult.from_residuals(f"{prefix}_derivative", derivative, derivative_tol, floor),
        CheckResult.from_residuals(f"{prefix}_spectral", spectral, derivative_tol, floor),
    ]


def check_ernst_transform(hgrid: HamiltonianGrid, psd_tol: float = 1e-10, spectrum_tol: float = 1e-8,
                          w0_tol: float = 1e-9, floor: float = GBDT_COVERAGE_FLOOR) -> List[CheckResult]:
    """w0* J w0 = J, positivity transport and spectral similarity JH~ ~ JH."""
    jm = hgrid.jmat
    results = []
    if hgrid.w0 is not None:
        results.append(check_j_unitarity(hgrid.w0, jm, w0_tol, floor, name="w0_j_unitarity"))
    floors, spectra = [], []
    ok = hgrid.h.ok()
    for i in range(len(hgrid.h.xi)):
        for j in range(len(hgrid.h.eta)):
            if not ok[i, j]:
                floors.append(None)
                spectra.append(None)
                continue
            ht, hct = hgrid.h.values[i, j], hgrid.hcal.values[i, j]
            floors.append(max(0.0, -min(psd_floor(ht), psd_floor(hct))))
            if hgrid.seed is None:
                spectra.append(None)
                continue
            res = 0.0
            for new, old in ((ht, hgrid.seed.h.values[i, j]), (hct, hgrid.seed.hcal.values[i, j])):
                res = max(res, float(np.max(np.abs(np.sort_complex(np.linalg.eigvals(jm @ new))
                                                   - np.sort_complex(np.linalg.eigvals(jm @ old))))))
            spectra.append(res)
    results.append(CheckResult.from_residuals("psd_floor", floors, psd_tol, floor))
    results.append(CheckResult.from_residuals("spectral_similarity", spectra, spectrum_tol, floor))
    return results


def check_w0_closed_form(triple: GbdtTriple, pair: HamiltonianPair, targets: Sequence[Point],
                         step: float = GBDT_ODE_STEP, tol: float = 1e-7) -> CheckResult:
    residuals = []
    for target in targets:
        try:
            st, w_int = integrate_w0(triple, pair, PathSpec.l_path(target, step))
            w_closed = ernst_w0(st, triple)
        except GbdtError:
            residuals.append(None)
            continue
        residuals.append(fro(w_int - w_closed) / scale(w_closed))
    return CheckResult.from_residuals("w0_closed_form", residuals, tol)


def check_w0_flow(triple: GbdtTriple, pair: HamiltonianPair, points: Sequence[Point],
                  fd_step: float = GBDT_FD_STEP, tol: float = 1e-5, step: float = GBDT_ODE_STEP) -> CheckResult:
    """Closed-form w0 against its generators: w0_xi = G0 w0, w0_eta = F0 w0 by FD."""
    flow = ErnstFlow(triple, pair, step)
    jm = triple.jmat
    residuals = []
    for xi, eta in points:
        try:
            st = ernst_propagate(triple, pair, PathSpec.l_path((xi, eta), step))
            w = {k: ernst_w0(flow.hop(st, xi + k[0] * fd_step, eta + k[1] * fd_step), triple)
                 for k in ((-1, 0), (1, 0), (0, -1), (0, 1))}
            w0 = ernst_w0(st, triple)
        except GbdtError:
            residuals.append(None)
            continue
        r_xi = (w[1, 0] - w[-1, 0]) / (2 * fd_step) - w0_rate(st.pi, st.s, pair.H(xi, eta), jm) @ w0
        r_eta = (w[0, 1] - w[0, -1]) / (2 * fd_step) - w0_rate(st.pi, st.s, pair.Hcal(xi, eta), jm) @ w0
        residuals.append(max(fro(r_xi), fro(r_eta)) / scale(w0))
    return CheckResult.from_residuals("w0_flow", residuals, tol)


def check_darboux_ernst(triple: GbdtTriple, pair: HamiltonianPair, points: Sequence[Point],
                        z_samples: Sequence[complex], fd_step: float = GBDT_FD_STEP, tol: float = 1e-5,
                        step: float = GBDT_ODE_STEP) -> CheckResult:
    """v_xi = i (z - xi - eta)^-1 (J H~ v - v J H) and the eta analogue with Hcal, by FD."""
    flow = ErnstFlow(triple, pair, step)
    jm = triple.jmat
    residuals = []
    for xi, eta in points:
        try:
            st = ernst_propagate(triple, pair, PathSpec.l_path((xi, eta), step))
            hops = {k: flow.hop(st, xi + k[0] * fd_step, eta + k[1] * fd_step)
                    for k in ((-1, 0), (1, 0), (0, -1), (0, 1))}
            h_t, hc_t = transformed_hamiltonians(st, pair, triple)
            h, hc = pair.H(xi, eta), pair.Hcal(xi, eta)
            res = 0.0
            for z in z_samples:
                zeta = 1.0 / (z - xi - eta)
                v = ernst_darboux(st, triple, z)
                vh = {k: ernst_darboux(s, triple, z) for k, s in hops.items()}
                r_xi = (vh[1, 0] - vh[-1, 0]) / (2 * fd_step) - 1j * zeta * (jm @ h_t @ v - v @ jm @ h)
                r_eta = (vh[0, 1] - vh[0, -1]) / (2 * fd_step) - 1j * zeta * (jm @ hc_t @ v - v @ jm @ hc)
                res = max(res, fro(r_xi) / scale(v), fro(r_eta) / scale(v))
        except GbdtError:
            residuals.append(None)
            continue
        residuals.append(res)
    return CheckResult.from_residuals("darboux_ernst", residuals, tol)

# ============================================================================
# CSV FIELD CODEC
# ============================================================================

def field_header(m: int) -> List[str]:
    cols = ["xi", "eta", "flag"]
    for r in range(m):
        for c in range(m):
            cols += [f"entry_{r}{c}_re", f"entry_{r}{c}_im"]
    return cols


def field_to_csv(grid: FieldGrid) -> str:
    """Rows in (xi, eta) order; floats by repr so a reload is exact; flagged rows carry no entries."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    m = grid.m
    writer.writerow(field_header(m))
    for i, xi in enumerate(grid.xi):
        for j, eta in enumerate(grid.eta):
            flag = str(grid.flags[i, j])
            row = [repr(float(xi)), repr(float(eta)), flag]
            if flag == PointFlag.OK.value:
                for z in grid.values[i, j].reshape(-1):
                    row += [repr(float(z.real)), repr(float(z.imag))]
            else:
                row += [""] * (2 * m * m)
            writer.writerow(row)
    return buf.getvalue()


def load_field_csv(path: str, alpha: Optional[Callable[[float, float], float]] = None) -> FieldGrid:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShapeError(f"{path}: empty field file")
    header = rows[0]
    m = int(round(np.sqrt((len(header) - 3) / 2)))
    if header != field_header(m):
        raise ShapeError(f"{path}: unexpected header {header[:4]}...")
    xs = sorted({float(r[0]) for r in rows[1:]})
    ys = sorted({float(r[1]) for r in rows[1:]})
    grid = FieldGrid.empty(xs, ys, m)
    ix = {x: k for k, x in enumerate(xs)}
    iy = {y: k for k, y in enumerate(ys)}
    if len(rows) - 1 != len(xs) * len(ys):
        raise ShapeError(f"{path}: {len(rows) - 1} rows do not fill a {len(xs)}x{len(ys)} grid")
    for r in rows[1:]:
        i, j = ix[float(r[0])], iy[float(r[1])]
        flag = PointFlag(r[2])
        if flag != PointFlag.OK:
            grid.flag(i, j, flag)
            continue
        nums = np.array([float(v) for v in r[3:]])
        grid.values[i, j] = (nums[0::2] + 1j * nums[1::2]).reshape(m, m)
    if alpha is not None:
        grid.alpha = np.array([[alpha(x, y) for y in ys] for x in xs])
    return grid
