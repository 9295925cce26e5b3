#!/usr/bin/env python3
"""
GBDT v1.0 - Core transformation machinery
==========================================
Triples {A, S(0,0), Pi(0,0)}, backgrounds alpha = f + h with seed u and
coefficients q, Q, the spectral function lambda(xi, eta, z), propagation of
A, Pi, S (RK4 with half-step verification), the explicit A-field through the
commuting square roots, the Darboux matrix w_A and the transformed
coefficients q^, Q^.

Grid evaluation marches along eta = 0 and then up/down every xi-column, so a
rectangle costs one pass; columns run in a thread pool.
"""

import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial

from gbdt_branchsqrt import BranchChoice, JordanSpec, PRINCIPAL, shifted_sqrt
from gbdt_matcore import (
    ConvergenceError, DomainError, GbdtError, PointFlag, PreconditionError, ResonanceError,
    ShapeError, SingularMatrixError, as_matrix, condition, dagger, fro, hermitian_part, inv,
    matrix_exp, scale, solve_sylvester, GBDT_MAX_CONDITION,
)

logger = logging.getLogger("gbdt-core")

GBDT_ODE_STEP = float(os.getenv("GBDT_ODE_STEP", "5e-3"))
GBDT_MAX_STEP = float(os.getenv("GBDT_MAX_STEP", "0.05"))
GBDT_RICHARDSON_TOL = float(os.getenv("GBDT_RICHARDSON_TOL", "1e-8"))
GBDT_FD_STEP = float(os.getenv("GBDT_FD_STEP", "1e-3"))

ALPHA_TOL = 1e-12
CUT_TOL = 1e-10
POLE_TOL = 1e-12

Point = Tuple[float, float]

# ============================================================================
# SIGNATURE MATRICES
# ============================================================================

def j_offdiag(p: int) -> np.ndarray:
    i, o = np.eye(p), np.zeros((p, p))
    return np.block([[o, i], [i, o]]).astype(np.complex128)


def j_ioffdiag(p: int) -> np.ndarray:
    i, o = np.eye(p), np.zeros((p, p))
    return np.block([[o, -1j * i], [1j * i, o]])


def pauli2() -> np.ndarray:
    return j_ioffdiag(1)


def signature_j(p: int) -> np.ndarray:
    """The diag(I_p, -I_p) of the exp-diag seed."""
    return np.diag(np.r_[np.ones(p), -np.ones(p)]).astype(np.complex128)


J_SELECTORS: Dict[str, Callable[[int], np.ndarray]] = {
    "offdiag": j_offdiag,
    "i-offdiag": j_ioffdiag,
    "pauli2": lambda p: pauli2(),
}


def check_signature(jmat: np.ndarray, tol: float = 1e-12) -> List[str]:
    problems = []
    m = jmat.shape[0]
    if jmat.shape != (m, m):
        return [f"J must be square, got {jmat.shape}"]
    if fro(jmat - dagger(jmat)) > tol:
        problems.append("J is not self-adjoint")
    if fro(jmat @ jmat - np.eye(m)) > tol:
        problems.append("J^2 != I")
    return problems

# ============================================================================
# BACKGROUND: alpha = f(xi) + h(eta), seed u, coefficients q, Q
# ============================================================================

@dataclass(frozen=True)
class ScalarProfile:
    """Real polynomial in one variable, coefficients in ascending order."""
    coeffs: Tuple[float, ...]

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs) or (0.0,)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def affine(cls, a: float, b: float) -> "ScalarProfile":
        return cls((a, b))

    @property
    def poly(self) -> Polynomial:
        return Polynomial(self.coeffs)

    def __call__(self, x: float) -> float:
        return float(self.poly(x))

    def derivative(self, x: float) -> float:
        return float(self.poly.deriv()(x))

    def is_affine(self) -> bool:
        return all(c == 0.0 for c in self.coeffs[2:])

    def slope(self) -> float:
        return self.coeffs[1] if len(self.coeffs) > 1 else 0.0


class SeedKind(str, Enum):
    EXP_DIAG = "exp-diag"
    CUSTOM = "custom"


MatrixField = Callable[[float, float], np.ndarray]


@dataclass(frozen=True, eq=False)
class Background:
    """The initial system GBDT is applied to."""
    f: ScalarProfile
    h: ScalarProfile
    p: int = 1
    seed: SeedKind = SeedKind.EXP_DIAG
    u_fn: Optional[MatrixField] = None
    q_fn: Optional[MatrixField] = None
    qcal_fn: Optional[MatrixField] = None

    @classmethod
    def exp_diag(cls, f: ScalarProfile, h: ScalarProfile, p: int = 1) -> "Background":
        return cls(f, h, p, SeedKind.EXP_DIAG)

    @classmethod
    def custom(cls, f: ScalarProfile, h: ScalarProfile, q_fn: MatrixField, qcal_fn: MatrixField,
               u_fn: Optional[MatrixField] = None) -> "Background":
        m = np.asarray(q_fn(0.0, 0.0)).shape[0]
        return cls(f, h, max(1, m // 2), SeedKind.CUSTOM, u_fn, q_fn, qcal_fn)

    @property
    def m(self) -> int:
        if self.seed == SeedKind.EXP_DIAG:
            return 2 * self.p
        return np.asarray(self.q_fn(0.0, 0.0)).shape[0]

    def alpha(self, xi: float, eta: float) -> float:
        return self.f(xi) + self.h(eta)

    def alpha_xi(self, xi: float) -> float:
        return self.f.derivative(xi)

    def alpha_eta(self, eta: float) -> float:
        return self.h.derivative(eta)

    def u(self, xi: float, eta: float) -> np.ndarray:
        """Seed solution; the exp-diag seed is normalised to u(0,0) = I."""
        if self.seed == SeedKind.EXP_DIAG:
            t = (self.f(xi) - self.h(eta)) - (self.f(0.0) - self.h(0.0))
            return np.diag(np.r_[np.full(self.p, np.exp(t)), np.full(self.p, np.exp(-t))]).astype(np.complex128)
        if self.u_fn is None:
            raise PreconditionError("custom background has no seed solution u")
        return as_matrix(self.u_fn(xi, eta), "u")

    def q(self, xi: float, eta: float) -> np.ndarray:
        if self.seed == SeedKind.EXP_DIAG:
            return self.f.derivative(xi) * signature_j(self.p)
        return as_matrix(self.q_fn(xi, eta), "q")

    def Q(self, xi: float, eta: float) -> np.ndarray:
        if self.seed == SeedKind.EXP_DIAG:
            return self.h.derivative(eta) * signature_j(self.p)
        return as_matrix(self.qcal_fn(xi, eta), "Q")

    def skew_residual(self, jmat: np.ndarray, xi: float, eta: float) -> float:
        """max of ||qJ + Jq*||, ||QJ + JQ*|| at a point."""
        q, big_q = self.q(xi, eta), self.Q(xi, eta)
        return max(fro(q @ jmat + jmat @ dagger(q)), fro(big_q @ jmat + jmat @ dagger(big_q)))

    def to_dict(self) -> Dict:
        return {"f": list(self.f.coeffs), "h": list(self.h.coeffs), "p": self.p, "seed": self.seed.value}

# ============================================================================
# TRIPLE + STATES
# ============================================================================

@dataclass(frozen=True, eq=False)
class GbdtTriple:
    """{A(0,0), S(0,0), Pi(0,0)} with A S - S A* = i Pi J Pi*."""
    curly_a: Union[np.ndarray, JordanSpec]
    s0: np.ndarray
    pi0: np.ndarray
    jmat: np.ndarray
    generator: Optional[JordanSpec] = None
    identity_tol: float = 1e-10

    def __post_init__(self):
        if isinstance(self.curly_a, JordanSpec):
            object.__setattr__(self, "generator", self.generator or self.curly_a)
            object.__setattr__(self, "curly_a", self.curly_a.matrix())
        for name in ("curly_a", "s0", "pi0", "jmat"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n, m = self.curly_a.shape[0], self.jmat.shape[0]
        if self.curly_a.shape != (n, n) or self.s0.shape != (n, n) or self.pi0.shape != (n, m):
            raise ShapeError(f"triple shapes A={self.curly_a.shape} S0={self.s0.shape} "
                             f"Pi0={self.pi0.shape} J={self.jmat.shape} do not conform")
        problems = check_signature(self.jmat)
        if fro(self.s0 - dagger(self.s0)) > 1e-10 * scale(self.s0):
            problems.append("S(0,0) is not Hermitian")
        res = self.identity_residual()
        if res > self.identity_tol:
            problems.append(f"triple identity residual {res:.3e} exceeds {self.identity_tol:.0e}")
        if problems:
            raise PreconditionError("; ".join(problems))

    @classmethod
    def from_identity(cls, curly_a, pi0, jmat, generator: Optional[JordanSpec] = None) -> "GbdtTriple":
        """Solve S(0,0) from the identity (requires sigma(A) and sigma(A*) disjoint)."""
        a = curly_a.matrix() if isinstance(curly_a, JordanSpec) else as_matrix(curly_a, "curly_a")
        if isinstance(curly_a, JordanSpec):
            generator = generator or curly_a
        pi0, jmat = as_matrix(pi0, "pi0"), as_matrix(jmat, "jmat")
        return cls(a, solve_S_identity(a, pi0, jmat), pi0, jmat, generator)

    @property
    def n(self) -> int:
        return self.curly_a.shape[0]

    @property
    def m(self) -> int:
        return self.jmat.shape[0]

    def identity_residual(self) -> float:
        return identity_residual(self.curly_a, self.s0, self.pi0, self.jmat)

    def initial_state(self) -> "GbdtState":
        return GbdtState.build(0.0, 0.0, self.curly_a, self.pi0, self.s0, self.jmat)

    def to_dict(self) -> Dict:
        def enc(m):
            return [[[z.real, z.imag] for z in row] for row in m.tolist()]
        return {"A": enc(self.curly_a), "S0": enc(self.s0), "Pi0": enc(self.pi0), "J": enc(self.jmat)}


def identity_residual(a: np.ndarray, s: np.ndarray, pi: np.ndarray, jmat: np.ndarray) -> float:
    """||A S - S A* - i Pi J Pi*||_F / max(1, ||S||_F)."""
    return fro(a @ s - s @ dagger(a) - 1j * pi @ jmat @ dagger(pi)) / scale(s)


@dataclass(frozen=True, eq=False)
class GbdtState:
    xi: float
    eta: float
    a: np.ndarray
    pi: np.ndarray
    s: np.ndarray
    identity_residual: float = 0.0
    s_condition: float = 1.0
    a_minus_condition: float = 1.0
    a_plus_condition: float = 1.0
    richardson_error: float = 0.0

    @classmethod
    def build(cls, xi, eta, a, pi, s, jmat, richardson_error: float = 0.0, resolvents: bool = True):
        n = a.shape[0]
        return cls(
            float(xi), float(eta), a, pi, s,
            identity_residual=identity_residual(a, s, pi, jmat),
            s_condition=condition(s),
            a_minus_condition=condition(a - np.eye(n)) if resolvents else 1.0,
            a_plus_condition=condition(a + np.eye(n)) if resolvents else 1.0,
            richardson_error=richardson_error,
        )

    @property
    def point(self) -> Point:
        return (self.xi, self.eta)

    def s_inverse(self) -> np.ndarray:
        if self.s_condition > GBDT_MAX_CONDITION:
            raise SingularMatrixError(
                f"outside points of invertibility of S at ({self.xi:.6g}, {self.eta:.6g})", self.s_condition)
        return np.linalg.inv(self.s)


@dataclass(frozen=True)
class SpectralPoint:
    z: complex
    lam: complex


@dataclass(frozen=True)
class PathSpec:
    """Polyline of waypoints; integration step along every segment."""
    waypoints: Tuple[Point, ...]
    step: float = GBDT_ODE_STEP

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.waypoints)
        if not pts:
            raise ShapeError("path needs at least one waypoint")
        if not (0.0 < self.step <= GBDT_MAX_STEP):
            raise ShapeError(f"path step {self.step} outside (0, {GBDT_MAX_STEP}]")
        object.__setattr__(self, "waypoints", pts)

    @classmethod
    def l_path(cls, target: Point, step: float = GBDT_ODE_STEP, origin: Point = (0.0, 0.0)) -> "PathSpec":
        """origin -> (xi, origin_eta) -> (xi, eta)."""
        return cls((origin, (target[0], origin[1]), target), step)

    @classmethod
    def staircase(cls, target: Point, step: float = GBDT_ODE_STEP, stairs: int = 4,
                  origin: Point = (0.0, 0.0)) -> "PathSpec":
        """eta-first staircase of `stairs` steps; used for path-independence checks."""
        x0, y0 = origin
        dx, dy = (target[0] - x0) / stairs, (target[1] - y0) / stairs
        pts = [origin]
        for k in range(1, stairs + 1):
            pts.append((x0 + (k - 1) * dx, y0 + k * dy))
            pts.append((x0 + k * dx, y0 + k * dy))
        return cls(tuple(pts), step)

    @property
    def start(self) -> Point:
        return self.waypoints[0]

    @property
    def end(self) -> Point:
        return self.waypoints[-1]

    def length(self) -> float:
        return sum(math.dist(a, b) for a, b in zip(self.waypoints, self.waypoints[1:]))

# ============================================================================
# SPECTRAL PARAMETER lambda(xi, eta, z)
# ============================================================================

def _off_cut(w: complex, what: str, point: Point) -> complex:
    w = complex(w)
    if abs(w) <= POLE_TOL:
        raise DomainError(f"{what} vanishes", PointFlag.POLE, point)
    if w.real < 0 and abs(w.imag) <= CUT_TOL * abs(w):
        raise DomainError(f"{what} = {w:.6g} on the branch cut", PointFlag.BRANCH_CUT, point)
    return w


def lambda_of(z: complex, xi: float, eta: float, bg: Background, branch: Tuple[int, int] = (1, 1)) -> complex:
    """lambda = (sqrt(z-2h) - sqrt(z+2f)) / (sqrt(z-2h) + sqrt(z+2f))."""
    point = (xi, eta)
    r1 = branch[0] * np.sqrt(_off_cut(z - 2.0 * bg.h(eta), "z - 2h(eta)", point))
    r2 = branch[1] * np.sqrt(_off_cut(z + 2.0 * bg.f(xi), "z + 2f(xi)", point))
    if abs(r1 + r2) <= POLE_TOL * max(1.0, abs(r1)):
        raise DomainError("lambda denominator vanishes", PointFlag.POLE, point)
    return complex((r1 - r2) / (r1 + r2))


def lambda_radical(z: complex, xi: float, eta: float, bg: Background) -> complex:
    """Unfactored form (h - f - z + sqrt((z-2h)(z+2f))) / (f + h)."""
    f, h = bg.f(xi), bg.h(eta)
    if abs(f + h) <= ALPHA_TOL:
        raise DomainError("alpha vanishes", PointFlag.ALPHA_ZERO, (xi, eta))
    root = np.sqrt(complex(z - 2 * h)) * np.sqrt(complex(z + 2 * f))
    return complex((h - f - z + root) / (f + h))


def spectral_point(z: complex, xi: float, eta: float, bg: Background,
                   branch: Tuple[int, int] = (1, 1)) -> SpectralPoint:
    return SpectralPoint(complex(z), lambda_of(z, xi, eta, bg, branch))


def z_ring(spectrum: Sequence[complex], count: int = 8) -> List[complex]:
    """Sample ring of hidden spectral parameters, off the real axis, plus |z| = 1e8."""
    radius = 5.0 * max([1.0] + [abs(v) for v in spectrum])
    ring = [radius * np.exp(1j * (k + 0.5) * 2 * np.pi / count) for k in range(count)]
    return [complex(z) for z in ring] + [complex(1e8 * np.exp(0.25j * np.pi))]

# ============================================================================
# EXPLICIT A-FIELD (commuting square roots)
# ============================================================================

def explicit_A(xi: float, eta: float, spec: JordanSpec, bg: Background,
               branch: BranchChoice = PRINCIPAL) -> np.ndarray:
    """A = (R(2h) - R(-2f)) (R(2h) + R(-2f))^-1."""
    point = (xi, eta)
    mu_h, mu_f = 2.0 * bg.h(eta), -2.0 * bg.f(xi)
    for lam in spec.eigenvalues():
        _off_cut(lam - mu_h, "lambda_k - 2h(eta)", point)
        _off_cut(lam - mu_f, "lambda_k + 2f(xi)", point)
    r_h = shifted_sqrt(spec, mu_h, branch)
    r_f = shifted_sqrt(spec, mu_f, branch)
    total = r_h + r_f
    cond = condition(total)
    if cond > GBDT_MAX_CONDITION:
        raise SingularMatrixError(f"root sum R(2h) + R(-2f) not invertible at ({xi:.6g}, {eta:.6g})", cond)
    return (r_h - r_f) @ np.linalg.inv(total)


def explicit_a_origin(spec: JordanSpec, bg: Background, branch: BranchChoice = PRINCIPAL) -> np.ndarray:
    """A(0,0) of the explicit field; build the triple identity against this matrix."""
    return explicit_A(0.0, 0.0, spec, bg, branch)

# ============================================================================
# CLOSED FORMS FOR A 2x2 JORDAN BLOCK (q = -j, Q = j)
# ============================================================================

def _jordan2_roots(xi: float, eta: float, c: complex, bg: Optional[Background]) -> Tuple[complex, complex]:
    """nu = sqrt(c + 2 f(xi)), omega = sqrt(c - 2 h(eta)); default f = -xi, h = eta."""
    if bg is None:
        f, h = -xi, eta
    else:
        if not (bg.f.is_affine() and bg.h.is_affine() and bg.f.slope() == -1.0 and bg.h.slope() == 1.0):
            raise PreconditionError("Jordan closed forms need affine f, h with f' = -1, h' = 1")
        f, h = bg.f(xi), bg.h(eta)
    point = (xi, eta)
    nu = np.sqrt(_off_cut(c + 2.0 * f, "c + 2f(xi)", point))
    omega = np.sqrt(_off_cut(c - 2.0 * h, "c - 2h(eta)", point))
    return complex(nu), complex(omega)


def jordan2_A(xi: float, eta: float, c: complex, bg: Optional[Background] = None) -> np.ndarray:
    nu, omega = _jordan2_roots(xi, eta, c, bg)
    a = (omega - nu) / (omega + nu)
    return np.array([[a, -a / (nu * omega)], [0, a]], dtype=np.complex128)


def jordan2_resolvents(xi: float, eta: float, c: complex,
                       bg: Optional[Background] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(A - I)^-1 and (A + I)^-1 in closed form."""
    nu, omega = _jordan2_roots(xi, eta, c, bg)
    minus = -(omega + nu) / (2 * nu) * np.array([[1, (nu - omega) / (2 * omega * nu ** 2)], [0, 1]])
    plus = (omega + nu) / (2 * omega) * np.array([[1, (omega - nu) / (2 * nu * omega ** 2)], [0, 1]])
    return minus.astype(np.complex128), plus.astype(np.complex128)


def jordan2_pi_factors(xi: float, eta: float, c: complex,
                       bg: Optional[Background] = None) -> Tuple[np.ndarray, np.ndarray]:
    t, g = _jordan2_exponents(xi, eta, c, bg)
    e1 = np.exp(-t) * np.array([[1, -g], [0, 1]], dtype=np.complex128)
    e2 = np.exp(t) * np.array([[1, g], [0, 1]], dtype=np.complex128)
    return e1, e2


def jordan2_pi_factors_exp(xi: float, eta: float, c: complex,
                           bg: Optional[Background] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Same factors through the matrix exponential of the unsimplified exponent."""
    t, g = _jordan2_exponents(xi, eta, c, bg)
    m = np.array([[t, g], [0, t]], dtype=np.complex128)
    return matrix_exp(-m), matrix_exp(m)


def _jordan2_exponents(xi, eta, c, bg):
    nu, omega = _jordan2_roots(xi, eta, c, bg)
    return (nu + omega) ** 2 / 4.0, (nu / omega + omega / nu) / 4.0


def explicit_pi_jordan2(point: Point, c: complex, pi0: np.ndarray, p: int,
                        bg: Optional[Background] = None, anchored: bool = False) -> np.ndarray:
    """Pi = [Lambda_1 Lambda_2] for the 2x2 Jordan example.

    With anchored=True the factors are normalised by their value at the origin
    so that Pi(0,0) = pi0.
    """
    pi0 = as_matrix(pi0, "pi0")
    if pi0.shape != (2, 2 * p):
        raise ShapeError(f"pi0 must be 2x{2 * p}, got {pi0.shape}")
    e1, e2 = jordan2_pi_factors(point[0], point[1], c, bg)
    if anchored:
        o1, o2 = jordan2_pi_factors(0.0, 0.0, c, bg)
        e1, e2 = e1 @ np.linalg.inv(o1), e2 @ np.linalg.inv(o2)
    return np.hstack([e1 @ pi0[:, :p], e2 @ pi0[:, p:]])


def recover_S_jordan2(a: complex, b: complex, k: np.ndarray) -> np.ndarray:
    """Successive recovery of S from A S - S A* = K for A = [[a, b], [0, a]]."""
    d = a - np.conj(a)
    if abs(d) <= POLE_TOL * max(1.0, abs(a)):
        raise ResonanceError("a is real: identity does not determine S")
    s22 = k[1, 1] / d
    s21 = (k[1, 0] + np.conj(b) * s22) / d
    s12 = (k[0, 1] - b * s22) / d
    s11 = (k[0, 0] + np.conj(b) * s12 - b * s21) / d
    return np.array([[s11, s12], [s21, s22]], dtype=np.complex128)


def solve_S_identity(a: np.ndarray, pi: np.ndarray, jmat: np.ndarray) -> np.ndarray:
    """S with A S - S A* = i Pi J Pi*."""
    s = solve_sylvester(a, dagger(a), 1j * pi @ jmat @ dagger(pi))
    herm = fro(s - dagger(s)) / scale(s)
    if herm > 1e-9:
        logger.warning(f"identity solution not Hermitian to 1e-9 (residual {herm:.2e})")
    return hermitian_part(s)

# ============================================================================
# RK4 PATH INTEGRATION
# ============================================================================

Vec = Tuple[np.ndarray, ...]


def _axpy(y: Vec, k: Vec, h: float) -> Vec:
    return tuple(a + h * b for a, b in zip(y, k))


def _rel_diff(a: Vec, b: Vec) -> float:
    return max(fro(x - y) / scale(y) for x, y in zip(a, b))


class PathIntegrator:
    """Classical RK4 over polylines for a system y' = rates(xi, eta, y, dxi, deta)."""

    def __init__(self, step: float = GBDT_ODE_STEP, richardson_tol: float = GBDT_RICHARDSON_TOL):
        if not (0.0 < step <= GBDT_MAX_STEP):
            raise ShapeError(f"integration step {step} outside (0, {GBDT_MAX_STEP}]")
        self.step = step
        self.richardson_tol = richardson_tol

    def rates(self, xi: float, eta: float, y: Vec, dxi: float, deta: float) -> Vec:
        raise NotImplementedError

    def _segment(self, start: Point, end: Point, y: Vec, nsteps: int) -> Vec:
        p0 = np.array(start, dtype=float)
        delta = np.array(end, dtype=float) - p0
        h = 1.0 / nsteps

        def f(s, yy):
            xi, eta = p0 + s * delta
            return self.rates(float(xi), float(eta), yy, float(delta[0]), float(delta[1]))

        for k in range(nsteps):
            s = k * h
            k1 = f(s, y)
            k2 = f(s + h / 2, _axpy(y, k1, h / 2))
            k3 = f(s + h / 2, _axpy(y, k2, h / 2))
            k4 = f(s + h, _axpy(y, k3, h))
            y = tuple(yi + (h / 6) * (a + 2 * b + 2 * c + d) for yi, a, b, c, d in zip(y, k1, k2, k3, k4))
        return y

    def integrate(self, y: Vec, waypoints: Sequence[Point], verify: bool = True) -> Tuple[Vec, float]:
        """Returns (y at the last waypoint, max half-step disagreement)."""
        err, arc = 0.0, 0.0
        for start, end in zip(waypoints, waypoints[1:]):
            length = math.dist(start, end)
            if length == 0.0:
                continue
            n = max(1, math.ceil(length / self.step - 1e-9))
            try:
                if verify:
                    coarse = self._segment(start, end, y, n)
                    fine = self._segment(start, end, y, 2 * n)
                    err = max(err, _rel_diff(coarse, fine))
                    y = fine
                else:
                    y = self._segment(start, end, y, n)
            except GbdtError as e:
                e.add_note(f"segment {start} -> {end}, arc length {arc:.6g} to {arc + length:.6g}")
                raise
            arc += length
        return y, err

    def march(self, y0: Vec, start: Point, axis: int, targets: Sequence[float]) -> Dict[int, object]:
        """Walk outward from start along one axis; a failure flags its target and all beyond."""
        out: Dict[int, object] = {}
        order = np.argsort(targets, kind="stable")
        up = [int(i) for i in order if targets[i] >= start[axis]]
        down = [int(i) for i in order[::-1] if targets[i] < start[axis]]
        for side in (up, down):
            y, pt, broken = y0, start, None
            for i in side:
                if broken is not None:
                    out[i] = PointFlag.UNREACHED
                    continue
                target = (targets[i], pt[1]) if axis == 0 else (pt[0], targets[i])
                try:
                    y, err = self.integrate(y, [pt, target])
                except GbdtError as e:
                    logger.debug(f"march stopped: {e}")
                    out[i], broken = e.flag, e.flag
                    continue
                pt = target
                out[i] = (y, err)
        return out

    def sweep(self, y0: Vec, xs: Sequence[float], ys: Sequence[float], threads: int = 1,
              origin: Point = (0.0, 0.0)) -> Dict[Tuple[int, int], object]:
        """L-path evaluation of a whole grid: along eta = origin_eta, then each column."""
        base = self.march(y0, origin, 0, list(xs))

        def column(i):
            b = base[i]
            if isinstance(b, PointFlag):
                return {j: b for j in range(len(ys))}
            y, err = b
            col = self.march(y, (xs[i], origin[1]), 1, list(ys))
            return {j: (v if isinstance(v, PointFlag) else (v[0], max(err, v[1]))) for j, v in col.items()}

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                cols = list(pool.map(column, range(len(xs))))
        else:
            cols = [column(i) for i in range(len(xs))]
        return {(i, j): v for i, col in enumerate(cols) for j, v in col.items()}

# ============================================================================
# GBDT FLOW: A, Pi, S along paths
# ============================================================================

def _inv_at(m: np.ndarray, what: str, xi: float, eta: float) -> np.ndarray:
    return inv(m, f"{what} at ({xi:.6g}, {eta:.6g})")


class StateField(Protocol):
    def initial_state(self) -> GbdtState: ...

    def sweep_states(self, xs: Sequence[float], ys: Sequence[float],
                     threads: int = 1) -> Dict[Tuple[int, int], object]: ...

    def hop(self, state: GbdtState, xi: float, eta: float) -> GbdtState: ...


class GbdtFlow(PathIntegrator):
    """Propagation of A, Pi, S for one triple over one background."""

    def __init__(self, triple: GbdtTriple, bg: Background, step: float = GBDT_ODE_STEP,
                 richardson_tol: float = GBDT_RICHARDSON_TOL):
        super().__init__(step, richardson_tol)
        if bg.m != triple.m:
            raise ShapeError(f"background is {bg.m}x{bg.m} but J is {triple.m}x{triple.m}")
        self.triple = triple
        self.bg = bg
        self.eye = np.eye(triple.n, dtype=np.complex128)

    def rates(self, xi, eta, y, dxi, deta):
        a, pi, s = y
        alpha = self.bg.alpha(xi, eta)
        if abs(alpha) <= ALPHA_TOL:
            raise DomainError("alpha vanishes on path", PointFlag.ALPHA_ZERO, (xi, eta))
        jm, eye = self.triple.jmat, self.eye
        da, dpi, ds = np.zeros_like(a), np.zeros_like(pi), np.zeros_like(s)
        if dxi:
            r = self.bg.alpha_xi(xi) / alpha
            bm = _inv_at(a - eye, "A - I", xi, eta)
            pq = pi @ self.bg.q(xi, eta)
            da = da + dxi * (-r * (a + 2 * eye + 2 * bm))
            dpi = dpi + dxi * (bm @ pq)
            ds = ds + dxi * (r * (s - 2 * bm @ s @ dagger(bm)) - 1j * bm @ pq @ jm @ dagger(pi) @ dagger(bm))
        if deta:
            r = self.bg.alpha_eta(eta) / alpha
            bp = _inv_at(a + eye, "A + I", xi, eta)
            pq = pi @ self.bg.Q(xi, eta)
            da = da + deta * (-r * a + 2 * r * eye - 2 * r * bp)
            dpi = dpi + deta * (bp @ pq)
            ds = ds + deta * (r * (s - 2 * bp @ s @ dagger(bp)) - 1j * bp @ pq @ jm @ dagger(pi) @ dagger(bp))
        return (da, dpi, ds)

    def initial_state(self) -> GbdtState:
        return self.triple.initial_state()

    def _state(self, pt: Point, y: Vec, err: float) -> GbdtState:
        return GbdtState.build(pt[0], pt[1], y[0], y[1], y[2], self.triple.jmat, err)

    def run(self, state: GbdtState, waypoints: Sequence[Point], verify: bool = True) -> GbdtState:
        y, err = self.integrate((state.a, state.pi, state.s), [state.point, *waypoints], verify)
        return self._state(waypoints[-1] if waypoints else state.point, y, max(err, state.richardson_error))

    def along(self, path: PathSpec) -> GbdtState:
        if path.start != (0.0, 0.0):
            raise ShapeError(f"paths start at the origin, got {path.start}")
        flow = self if path.step == self.step else GbdtFlow(self.triple, self.bg, path.step, self.richardson_tol)
        state = flow.run(self.initial_state(), list(path.waypoints[1:]))
        if state.richardson_error > self.richardson_tol:
            raise ConvergenceError(f"half-step disagreement {state.richardson_error:.2e} "
                                   f"exceeds {self.richardson_tol:.0e}; reduce the path step")
        return state

    def hop(self, state: GbdtState, xi: float, eta: float) -> GbdtState:
        """Short L-hop (xi first) without half-step verification."""
        return self.run(state, [(xi, state.eta), (xi, eta)], verify=False)

    def sweep_states(self, xs, ys, threads: int = 1) -> Dict[Tuple[int, int], object]:
        raw = self.sweep((self.triple.curly_a, self.triple.pi0, self.triple.s0), xs, ys, threads)
        out = {}
        for (i, j), v in raw.items():
            if isinstance(v, PointFlag):
                out[(i, j)] = v
            else:
                out[(i, j)] = self._state((xs[i], ys[j]), v[0], v[1])
        return out


def propagate(triple: GbdtTriple, bg: Background, path: PathSpec) -> GbdtState:
    return GbdtFlow(triple, bg, path.step).along(path)


def propagate_pi(triple: GbdtTriple, bg: Background, path: PathSpec) -> np.ndarray:
    return propagate(triple, bg, path).pi


def propagate_S(triple: GbdtTriple, bg: Background, path: PathSpec) -> np.ndarray:
    state = propagate(triple, bg, path)
    if fro(state.s - dagger(state.s)) > 1e-9 * scale(state.s):
        logger.warning(f"propagated S lost Hermiticity at {state.point}")
    return state.s

# ============================================================================
# EXPLICIT STATE FIELD FOR THE 2x2 JORDAN EXAMPLE
# ============================================================================

class Jordan2Field:
    """A by the square roots, Pi in closed form (anchored at Pi(0,0)), S from the identity."""

    def __init__(self, c: complex, pi0: np.ndarray, jmat: np.ndarray, bg: Background):
        if bg.seed != SeedKind.EXP_DIAG:
            raise PreconditionError("Jordan closed forms need the exp-diag seed")
        self.c = complex(c)
        self.bg = bg
        self.jmat = as_matrix(jmat, "jmat")
        self.pi0 = as_matrix(pi0, "pi0")
        self.spec = JordanSpec.jordan_block(self.c, 2)
        a00 = explicit_a_origin(self.spec, bg)
        self.triple = GbdtTriple(a00, solve_S_identity(a00, self.pi0, self.jmat), self.pi0, self.jmat, self.spec)

    def state_at(self, xi: float, eta: float) -> GbdtState:
        a = explicit_A(xi, eta, self.spec, self.bg)
        pi = explicit_pi_jordan2((xi, eta), self.c, self.pi0, self.bg.p, self.bg, anchored=True)
        return GbdtState.build(xi, eta, a, pi, solve_S_identity(a, pi, self.jmat), self.jmat)

    def initial_state(self) -> GbdtState:
        return self.triple.initial_state()

    def hop(self, state: GbdtState, xi: float, eta: float) -> GbdtState:
        return self.state_at(xi, eta)

    def sweep_states(self, xs, ys, threads: int = 1) -> Dict[Tuple[int, int], object]:
        def column(i):
            col = {}
            for j, eta in enumerate(ys):
                try:
                    col[j] = self.state_at(xs[i], eta)
                except GbdtError as e:
                    col[j] = e.flag
            return col

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                cols = list(pool.map(column, range(len(xs))))
        else:
            cols = [column(i) for i in range(len(xs))]
        return {(i, j): v for i, col in enumerate(cols) for j, v in col.items()}

# ============================================================================
# DARBOUX MATRIX + TRANSFORMED COEFFICIENTS
# ============================================================================

def darboux_matrix(state: GbdtState, triple: GbdtTriple, lam: complex) -> np.ndarray:
    """w_A = I - i J Pi* S^-1 (A - lam I)^-1 Pi."""
    n, jm = state.a.shape[0], triple.jmat
    shifted = state.a - lam * np.eye(n)
    cond = condition(shifted)
    if cond > GBDT_MAX_CONDITION:
        raise DomainError(f"lambda = {lam:.6g} is a pole of w_A (in the spectrum of A)", PointFlag.POLE, state.point)
    return np.eye(jm.shape[0]) - 1j * jm @ dagger(state.pi) @ state.s_inverse() @ np.linalg.inv(shifted) @ state.pi


def transformed_coefficients(state: GbdtState, triple: GbdtTriple, bg: Background) -> Tuple[np.ndarray, np.ndarray]:
    """q^ and Q^ of the transformed system."""
    xi, eta = state.point
    a, pi, s, jm = state.a, state.pi, state.s, triple.jmat
    eye_n, eye_m = np.eye(a.shape[0]), np.eye(jm.shape[0])
    alpha = bg.alpha(xi, eta)
    if abs(alpha) <= ALPHA_TOL:
        raise DomainError("alpha vanishes", PointFlag.ALPHA_ZERO, state.point)
    s_inv = state.s_inverse()
    out = []
    for sign, coeff, rate in ((-1, bg.q(xi, eta), bg.alpha_xi(xi)), (1, bg.Q(xi, eta), bg.alpha_eta(eta))):
        b = _inv_at(a + sign * eye_n, "A -+ I", xi, eta)
        left = eye_m - 1j * jm @ dagger(pi) @ s_inv @ b @ pi
        right = eye_m + 1j * jm @ dagger(pi) @ dagger(b) @ s_inv @ pi
        extra = -2j * (rate / alpha) * jm @ dagger(pi) @ s_inv @ b @ s @ dagger(b) @ s_inv @ pi
        out.append(left @ coeff @ right + extra)
    return out[0], out[1]

# ============================================================================
# FUNDAMENTAL SOLUTIONS
# ============================================================================

CoefficientField = Callable[[float, float], Tuple[np.ndarray, np.ndarray]]


class FundamentalFlow(PathIntegrator):
    """w_xi = -(lambda - 1)^-1 q w, w_eta = -(lambda + 1)^-1 Q w at fixed z."""

    def __init__(self, bg: Background, z: complex, coefficients: Optional[CoefficientField] = None,
                 step: float = GBDT_ODE_STEP, branch: Tuple[int, int] = (1, 1)):
        super().__init__(step)
        self.bg, self.z, self.branch = bg, complex(z), branch
        self.coefficients = coefficients or (lambda xi, eta: (bg.q(xi, eta), bg.Q(xi, eta)))

    def rates(self, xi, eta, y, dxi, deta):
        (w,) = y
        lam = lambda_of(self.z, xi, eta, self.bg, self.branch)
        if abs(lam - 1) <= POLE_TOL or abs(lam + 1) <= POLE_TOL:
            raise DomainError(f"lambda = {lam:.6g} hits a pole", PointFlag.POLE, (xi, eta))
        q, big_q = self.coefficients(xi, eta)
        dw = np.zeros_like(w)
        if dxi:
            dw = dw + dxi * (-(q @ w) / (lam - 1))
        if deta:
            dw = dw + deta * (-(big_q @ w) / (lam + 1))
        return (dw,)

    def hop(self, w: np.ndarray, start: Point, target: Point) -> np.ndarray:
        (w,), _ = self.integrate((w,), [start, (target[0], start[1]), target], verify=False)
        return w


def fundamental_solution(bg: Background, z: complex, path: PathSpec,
                         transformed: Optional[CoefficientField] = None,
                         branch: Tuple[int, int] = (1, 1)) -> np.ndarray:
    """w along the path from w(path start) = I; `transformed` swaps in q^, Q^."""
    flow = FundamentalFlow(bg, z, transformed, path.step, branch)
    (w,), err = flow.integrate((np.eye(bg.m, dtype=np.complex128),), list(path.waypoints))
    if err > flow.richardson_tol:
        raise ConvergenceError(f"half-step disagreement {err:.2e} for w; reduce the path step")
    if abs(np.linalg.det(w)) <= POLE_TOL:
        raise SingularMatrixError("fundamental solution degenerated", condition(w))
    return w

# ============================================================================
# GRIDS
# ============================================================================

@dataclass(frozen=True)
class GridSpec:
    xi_min: float
    xi_max: float
    eta_min: float
    eta_max: float
    step: float

    def axis(self, lo: float, hi: float) -> np.ndarray:
        if hi < lo or self.step <= 0:
            raise ShapeError(f"bad grid axis [{lo}, {hi}] step {self.step}")
        return np.linspace(lo, hi, int(round((hi - lo) / self.step)) + 1)

    @property
    def xs(self) -> np.ndarray:
        return self.axis(self.xi_min, self.xi_max)

    @property
    def ys(self) -> np.ndarray:
        return self.axis(self.eta_min, self.eta_max)

    @property
    def scale(self) -> float:
        return max(self.xi_max - self.xi_min, self.eta_max - self.eta_min, 1e-300)


STENCIL = (-1, 0, 1)


@dataclass
class FieldGrid:
    """Matrix values on an (xi, eta) lattice with per-point status flags.

    `stencils[i, j, a, b]` holds the value at (xi_i + (a-1) fd_step, eta_j + (b-1) fd_step)
    when FD stencils were sampled.
    """
    xi: np.ndarray
    eta: np.ndarray
    values: np.ndarray
    flags: np.ndarray
    alpha: Optional[np.ndarray] = None
    stencils: Optional[np.ndarray] = None
    fd_step: Optional[float] = None
    alpha_stencils: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, xs, ys, m: int, with_stencils: bool = False, fd_step: Optional[float] = None) -> "FieldGrid":
        nx, ny = len(xs), len(ys)
        values = np.full((nx, ny, m, m), np.nan, dtype=np.complex128)
        flags = np.full((nx, ny), PointFlag.OK.value, dtype="<U16")
        stencils = np.full((nx, ny, 3, 3, m, m), np.nan, dtype=np.complex128) if with_stencils else None
        return cls(np.asarray(xs, float), np.asarray(ys, float), values, flags, None, stencils, fd_step)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def ok(self) -> np.ndarray:
        return self.flags == PointFlag.OK.value

    def coverage(self) -> float:
        return float(self.ok().mean()) if self.flags.size else 0.0

    def flag(self, i: int, j: int, flag: PointFlag):
        self.flags[i, j] = PointFlag(flag).value
        self.values[i, j] = np.nan
        if self.stencils is not None:
            self.stencils[i, j] = np.nan

    def flag_counts(self) -> Dict[str, int]:
        names, counts = np.unique(self.flags, return_counts=True)
        return {str(k): int(v) for k, v in zip(names, counts)}


StateValue = Callable[[GbdtState], np.ndarray]


def sample_grid(source: StateField, xs: Sequence[float], ys: Sequence[float], values: Sequence[StateValue],
                m: int, threads: int = 1, fd_step: Optional[float] = None,
                alpha: Optional[Callable[[float, float], float]] = None,
                richardson_tol: float = GBDT_RICHARDSON_TOL) -> List[FieldGrid]:
    """Evaluate matrix-valued functions of the state on a lattice, sharing one sweep.

    With an FD step, each point also gets its 3x3 stencil by short hops from
    the grid state. A failure anywhere in a point's evaluation flags the point
    in every returned grid.
    """
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    states = source.sweep_states(xs, ys, threads)
    grids = [FieldGrid.empty(xs, ys, m, fd_step is not None, fd_step) for _ in values]
    if alpha is not None:
        a = np.array([[alpha(x, y) for y in ys] for x in xs])
        a_st = None
        if fd_step is not None:
            a_st = np.array([[[[alpha(x + da * fd_step, y + db * fd_step) for db in STENCIL] for da in STENCIL]
                              for y in ys] for x in xs])
        for g in grids:
            g.alpha, g.alpha_stencils = a, a_st

    def column(i):
        for j in range(len(ys)):
            st = states[(i, j)]
            if not isinstance(st, PointFlag) and st.richardson_error > richardson_tol:
                st = PointFlag.UNCONVERGED
            if isinstance(st, PointFlag):
                for g in grids:
                    g.flag(i, j, st)
                continue
            try:
                vals = [fn(st) for fn in values]
                stencils = None
                if fd_step is not None:
                    stencils = [np.empty((3, 3, m, m), dtype=np.complex128) for _ in values]
                    for ia, da in enumerate(STENCIL):
                        for ib, db in enumerate(STENCIL):
                            if da == 0 and db == 0:
                                nb = vals
                            else:
                                hopped = source.hop(st, st.xi + da * fd_step, st.eta + db * fd_step)
                                nb = [fn(hopped) for fn in values]
                            for k in range(len(values)):
                                stencils[k][ia, ib] = nb[k]
            except GbdtError as e:
                logger.debug(f"point ({xs[i]:.6g}, {ys[j]:.6g}) flagged: {e}")
                for g in grids:
                    g.flag(i, j, e.flag)
                continue
            for k, g in enumerate(grids):
                g.values[i, j] = vals[k]
                if stencils is not None:
                    g.stencils[i, j] = stencils[k]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(column, range(len(xs))))
    else:
        for i in range(len(xs)):
            column(i)
    for g in grids:
        bad = {k: v for k, v in g.flag_counts().items() if k != PointFlag.OK.value}
        if bad:
            logger.warning(f"{len(xs)}x{len(ys)} grid: flagged points {bad}")
    return grids
