#!/usr/bin/env python3
"""
GBDT v1.0 - Ernst-type systems
===============================
Hamiltonian pairs (H, Hcal) with
    JH - JHcal + i[JH, JHcal] = 0,   H_eta = Hcal_xi,
their GBDT with A = (A_gen - (xi + eta) I)^-1, the normalizing solution
w0 = w_A(xi, eta, 0), the Darboux matrix v = w0^-1 w_A(xi, eta, (z - xi - eta)^-1)
and the transformed Hamiltonians w0* H w0, w0* Hcal w0.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from gbdt_branchsqrt import JordanSpec
from gbdt_core import (
    ALPHA_TOL, GBDT_FD_STEP, GBDT_ODE_STEP, GBDT_RICHARDSON_TOL, FieldGrid, GbdtState, GbdtTriple,
    GridSpec, PathIntegrator, PathSpec, STENCIL, ScalarProfile, darboux_matrix, sample_grid,
)
from gbdt_matcore import (
    ConvergenceError, DomainError, PointFlag, PreconditionError, ShapeError,
    as_matrix, commutator, condition, dagger, fro, inv, GBDT_MAX_CONDITION,
)

logger = logging.getLogger("gbdt-ernst")

HERMITIAN_TOL = 1e-12
PSD_FLOOR = -1e-10
ERNST_ALGEBRAIC_TOL = 1e-10

MatrixField = Callable[[float, float], np.ndarray]

# ============================================================================
# HAMILTONIAN PAIRS
# ============================================================================

class HamiltonianFamily(str, Enum):
    CONSTANT = "constant"
    SHIFT_PROFILE = "shift-profile"
    CUSTOM = "custom"


def ernst_algebraic(h: np.ndarray, hcal: np.ndarray, jmat: np.ndarray) -> np.ndarray:
    """JH - JHcal + i[JH, JHcal]."""
    jh, jhc = jmat @ h, jmat @ hcal
    return jh - jhc + 1j * commutator(jh, jhc)


def psd_floor(m: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(0.5 * (m + dagger(m)))))


@dataclass(frozen=True, eq=False)
class HamiltonianPair:
    h_fn: MatrixField
    hcal_fn: MatrixField
    jmat: np.ndarray
    family: HamiltonianFamily = HamiltonianFamily.CUSTOM

    @property
    def m(self) -> int:
        return self.jmat.shape[0]

    def H(self, xi: float, eta: float) -> np.ndarray:
        return as_matrix(self.h_fn(xi, eta), "H")

    def Hcal(self, xi: float, eta: float) -> np.ndarray:
        return as_matrix(self.hcal_fn(xi, eta), "Hcal")

    def certify(self, points: Sequence[Tuple[float, float]], fd_step: float = GBDT_FD_STEP,
                fd_tol: float = 1e-6) -> Dict[str, float]:
        """Worst Hermitian, PSD and Ernst residuals at the points; raises if any fails."""
        worst = {"hermitian": 0.0, "psd_floor": np.inf, "algebraic": 0.0, "derivative": 0.0}
        for xi, eta in points:
            h, hc = self.H(xi, eta), self.Hcal(xi, eta)
            worst["hermitian"] = max(worst["hermitian"], fro(h - dagger(h)), fro(hc - dagger(hc)))
            worst["psd_floor"] = min(worst["psd_floor"], psd_floor(h), psd_floor(hc))
            worst["algebraic"] = max(worst["algebraic"], fro(ernst_algebraic(h, hc, self.jmat)))
            h_eta = (self.H(xi, eta + fd_step) - self.H(xi, eta - fd_step)) / (2 * fd_step)
            hc_xi = (self.Hcal(xi + fd_step, eta) - self.Hcal(xi - fd_step, eta)) / (2 * fd_step)
            worst["derivative"] = max(worst["derivative"], fro(h_eta - hc_xi))
        problems = []
        if worst["hermitian"] > HERMITIAN_TOL:
            problems.append(f"not Hermitian (residual {worst['hermitian']:.2e})")
        if worst["psd_floor"] < PSD_FLOOR:
            problems.append(f"not positive semidefinite (min eigenvalue {worst['psd_floor']:.2e})")
        if worst["algebraic"] > ERNST_ALGEBRAIC_TOL:
            problems.append(f"JH - JHcal + i[JH, JHcal] = {worst['algebraic']:.2e}")
        if worst["derivative"] > fd_tol:
            problems.append(f"H_eta - Hcal_xi = {worst['derivative']:.2e}")
        if problems:
            raise PreconditionError("Hamiltonian pair rejected: " + "; ".join(problems))
        return worst


def _check_psd(g: np.ndarray, name: str):
    if fro(g - dagger(g)) > HERMITIAN_TOL:
        raise PreconditionError(f"{name} is not Hermitian")
    if psd_floor(g) < PSD_FLOOR:
        raise PreconditionError(f"{name} is indefinite (min eigenvalue {psd_floor(g):.3e})")


def seed_hamiltonians(family: Union[HamiltonianFamily, str], m: int, jmat: np.ndarray,
                      h: Optional[np.ndarray] = None, hcal: Optional[np.ndarray] = None,
                      profile: Optional[ScalarProfile] = None,
                      check_points: Sequence[Tuple[float, float]] = ((0.0, 0.0), (0.1, -0.2), (-0.2, 0.1))
                      ) -> HamiltonianPair:
    """Closed-form seed pairs.

    constant: H = h (default I), Hcal = hcal (default h).
    shift-profile: H = Hcal = g(xi + eta) P with P = h (default I) and
    g = profile (default 1 + s^2).
    """
    family = HamiltonianFamily(family)
    jmat = as_matrix(jmat, "jmat")
    if jmat.shape != (m, m):
        raise ShapeError(f"J must be {m}x{m}, got {jmat.shape}")
    base = np.eye(m, dtype=np.complex128) if h is None else as_matrix(h, "H")
    _check_psd(base, "H")
    if family == HamiltonianFamily.CONSTANT:
        other = base if hcal is None else as_matrix(hcal, "Hcal")
        _check_psd(other, "Hcal")
        pair = HamiltonianPair(lambda xi, eta: base, lambda xi, eta: other, jmat, family)
    elif family == HamiltonianFamily.SHIFT_PROFILE:
        g = profile or ScalarProfile((1.0, 0.0, 1.0))

        def shifted(xi, eta):
            return g(xi + eta) * base

        pair = HamiltonianPair(shifted, shifted, jmat, family)
    else:
        raise PreconditionError("custom pairs are built directly and certified with HamiltonianPair.certify")
    pair.certify(check_points)
    return pair

# ============================================================================
# ERNST GBDT
# ============================================================================

class ErnstState(GbdtState):
    """A = (A_gen - (xi + eta) I)^-1, Pi, S at a point."""


def _generator(spec) -> np.ndarray:
    return spec.matrix() if isinstance(spec, JordanSpec) else as_matrix(spec, "generator")


def ernst_A(spec: Union[JordanSpec, np.ndarray], xi: float, eta: float) -> np.ndarray:
    gen = _generator(spec)
    shifted = gen - (xi + eta) * np.eye(gen.shape[0])
    cond = condition(shifted)
    if cond > GBDT_MAX_CONDITION:
        raise DomainError(f"xi + eta = {xi + eta:.6g} collides with the spectrum of the generator",
                          PointFlag.POLE, (xi, eta))
    return np.linalg.inv(shifted)


def ernst_triple(generator: Union[JordanSpec, np.ndarray], pi0, jmat,
                 s0: Optional[np.ndarray] = None) -> GbdtTriple:
    """Triple whose identity holds for A(0,0) = generator^-1."""
    gen = _generator(generator)
    a00 = inv(gen, "generator")
    spec = generator if isinstance(generator, JordanSpec) else None
    if s0 is None:
        return GbdtTriple.from_identity(a00, pi0, jmat, spec)
    return GbdtTriple(a00, s0, pi0, jmat, spec)


def w0_rate(pi: np.ndarray, s: np.ndarray, h: np.ndarray, jmat: np.ndarray) -> np.ndarray:
    """-i J X0 - [J X0, J H] with X0 = Pi* S^-1 Pi."""
    jx = jmat @ dagger(pi) @ np.linalg.solve(s, pi)
    return -1j * jx - commutator(jx, jmat @ h)


class ErnstFlow(PathIntegrator):
    """Pi, S (and optionally an integrated w0) along paths; A is explicit."""

    def __init__(self, triple: GbdtTriple, pair: HamiltonianPair, step: float = GBDT_ODE_STEP,
                 richardson_tol: float = GBDT_RICHARDSON_TOL, with_w0: bool = False):
        super().__init__(step, richardson_tol)
        if pair.m != triple.m:
            raise ShapeError(f"Hamiltonians are {pair.m}x{pair.m} but J is {triple.m}x{triple.m}")
        self.triple, self.pair, self.with_w0 = triple, pair, with_w0
        self.generator = inv(triple.curly_a, "A(0,0)")

    def rates(self, xi, eta, y, dxi, deta):
        pi, s = y[0], y[1]
        a, jm = ernst_A(self.generator, xi, eta), self.triple.jmat
        drift = -(a @ s + s @ dagger(a))
        dpi, ds = np.zeros_like(pi), np.zeros_like(s)
        dw = np.zeros_like(y[2]) if self.with_w0 else None
        for d, ham in ((dxi, self.pair.H), (deta, self.pair.Hcal)):
            if not d:
                continue
            h = ham(xi, eta)
            pjh = pi @ jm @ h
            dpi = dpi + d * (-1j * a @ pjh)
            ds = ds + d * (pjh @ jm @ dagger(pi) + drift)
            if self.with_w0:
                dw = dw + d * (w0_rate(pi, s, h, jm) @ y[2])
        return (dpi, ds, dw) if self.with_w0 else (dpi, ds)

    def _y0(self):
        base = (self.triple.pi0, self.triple.s0)
        if self.with_w0:
            return base + (closed_form_w0(self.triple.curly_a, self.triple.pi0, self.triple.s0, self.triple.jmat),)
        return base

    def _state(self, pt, y, err) -> ErnstState:
        a = ernst_A(self.generator, pt[0], pt[1])
        return ErnstState.build(pt[0], pt[1], a, y[0], y[1], self.triple.jmat, err, resolvents=False)

    def initial_state(self) -> ErnstState:
        return self._state((0.0, 0.0), self._y0(), 0.0)

    def run(self, state: ErnstState, waypoints, verify: bool = True) -> ErnstState:
        y, err = self.integrate((state.pi, state.s), [state.point, *waypoints], verify)
        return self._state(waypoints[-1] if waypoints else state.point, y, max(err, state.richardson_error))

    def hop(self, state: ErnstState, xi: float, eta: float) -> ErnstState:
        return self.run(state, [(xi, state.eta), (xi, eta)], verify=False)

    def sweep_states(self, xs, ys, threads: int = 1):
        raw = self.sweep((self.triple.pi0, self.triple.s0), xs, ys, threads)
        return {k: (v if isinstance(v, PointFlag) else self._state((xs[k[0]], ys[k[1]]), v[0], v[1]))
                for k, v in raw.items()}


def ernst_propagate(triple: GbdtTriple, pair: HamiltonianPair, path: PathSpec) -> ErnstState:
    flow = ErnstFlow(triple, pair, path.step)
    state = flow.run(flow.initial_state(), list(path.waypoints[1:]))
    if state.richardson_error > flow.richardson_tol:
        raise ConvergenceError(f"half-step disagreement {state.richardson_error:.2e} on the Ernst flow")
    return state


def integrate_w0(triple: GbdtTriple, pair: HamiltonianPair, path: PathSpec) -> Tuple[ErnstState, np.ndarray]:
    """State and w0 at the path end, w0 integrated from w_A(0, 0, 0)."""
    flow = ErnstFlow(triple, pair, path.step, with_w0=True)
    y, err = flow.integrate(flow._y0(), list(path.waypoints))
    if err > flow.richardson_tol:
        raise ConvergenceError(f"half-step disagreement {err:.2e} on the w0 flow")
    return flow._state(path.end, y, err), y[2]

# ============================================================================
# w0, v, TRANSFORMED HAMILTONIANS
# ============================================================================

def closed_form_w0(a: np.ndarray, pi: np.ndarray, s: np.ndarray, jmat: np.ndarray) -> np.ndarray:
    """I - i J Pi* S^-1 A^-1 Pi."""
    return np.eye(jmat.shape[0]) - 1j * jmat @ dagger(pi) @ np.linalg.solve(s, np.linalg.solve(a, pi))


def ernst_w0(state: GbdtState, triple: GbdtTriple) -> np.ndarray:
    cond = condition(state.a)
    if cond > GBDT_MAX_CONDITION:
        raise DomainError("A is not invertible", PointFlag.SINGULAR, state.point)
    state.s_inverse()
    return closed_form_w0(state.a, state.pi, state.s, triple.jmat)


def ernst_darboux(state: GbdtState, triple: GbdtTriple, z: complex,
                  w0: Optional[np.ndarray] = None) -> np.ndarray:
    """v = w0^-1 w_A(xi, eta, (z - xi - eta)^-1)."""
    gap = complex(z) - state.xi - state.eta
    if abs(gap) <= ALPHA_TOL:
        raise DomainError(f"z = {z:.6g} on the line xi + eta = z", PointFlag.POLE, state.point)
    w0 = ernst_w0(state, triple) if w0 is None else w0
    return np.linalg.solve(w0, darboux_matrix(state, triple, 1.0 / gap))


def transformed_hamiltonians(state: GbdtState, pair: HamiltonianPair,
                             triple: GbdtTriple) -> Tuple[np.ndarray, np.ndarray]:
    """(w0* H w0, w0* Hcal w0) at the state's point."""
    w0 = ernst_w0(state, triple)
    xi, eta = state.point
    return dagger(w0) @ pair.H(xi, eta) @ w0, dagger(w0) @ pair.Hcal(xi, eta) @ w0

# ============================================================================
# GRIDS
# ============================================================================

@dataclass
class HamiltonianGrid:
    """H and Hcal tabulated with FD stencils; w0 kept for transformed grids."""
    h: FieldGrid
    hcal: FieldGrid
    jmat: np.ndarray
    w0: Optional[FieldGrid] = None
    seed: Optional["HamiltonianGrid"] = None

    def coverage(self) -> float:
        return self.h.coverage()


def hamiltonian_grid(pair: HamiltonianPair, grid: GridSpec, fd_step: Optional[float] = GBDT_FD_STEP) -> HamiltonianGrid:
    xs, ys, m = grid.xs, grid.ys, pair.m
    out = HamiltonianGrid(FieldGrid.empty(xs, ys, m, fd_step is not None, fd_step),
                          FieldGrid.empty(xs, ys, m, fd_step is not None, fd_step), pair.jmat)
    for i, xi in enumerate(xs):
        for j, eta in enumerate(ys):
            out.h.values[i, j] = pair.H(xi, eta)
            out.hcal.values[i, j] = pair.Hcal(xi, eta)
            if fd_step is None:
                continue
            for ia, da in enumerate(STENCIL):
                for ib, db in enumerate(STENCIL):
                    out.h.stencils[i, j, ia, ib] = pair.H(xi + da * fd_step, eta + db * fd_step)
                    out.hcal.stencils[i, j, ia, ib] = pair.Hcal(xi + da * fd_step, eta + db * fd_step)
    return out


def transform_ernst(triple: GbdtTriple, pair: HamiltonianPair, grid: GridSpec, threads: int = 1,
                    fd_step: Optional[float] = GBDT_FD_STEP) -> HamiltonianGrid:
    """Transformed pair (and w0) over the grid, flagged where w0 is undefined."""
    flow = ErnstFlow(triple, pair)
    logger.info(f"ernst transform: {len(grid.xs)}x{len(grid.ys)} grid, n={triple.n}, m={triple.m}")

    def h_tilde(st):
        return transformed_hamiltonians(st, pair, triple)[0]

    def hcal_tilde(st):
        return transformed_hamiltonians(st, pair, triple)[1]

    h, hcal, w0 = sample_grid(flow, grid.xs, grid.ys, [h_tilde, hcal_tilde, lambda st: ernst_w0(st, triple)],
                              triple.m, threads, fd_step)
    out = HamiltonianGrid(h, hcal, triple.jmat, w0, hamiltonian_grid(pair, grid, fd_step))
    logger.info(f"ernst transform: coverage {out.coverage():.3f}")
    return out
