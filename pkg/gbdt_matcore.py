#!/usr/bin/env python3
"""
GBDT v1.0 - Dense complex matrix kernels
=========================================
Small dense complex matrices (n <= 32) and the linear-algebra kernels every
other module consumes:
  - multiply / inverse with condition estimate
  - Sylvester solve A X - X B = C through the Kronecker system
  - matrix exponential (Pade scaling-and-squaring)
  - error hierarchy and per-point status flags shared by the whole package
"""

import os
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
import scipy.linalg

logger = logging.getLogger("gbdt-matcore")

GBDT_MAX_CONDITION = float(os.getenv("GBDT_MAX_CONDITION", "1e8"))
GBDT_SYLVESTER_CONDITION = float(os.getenv("GBDT_SYLVESTER_CONDITION", "1e12"))

# ============================================================================
# STATUS FLAGS + ERRORS
# ============================================================================

class PointFlag(str, Enum):
    OK = "ok"
    ALPHA_ZERO = "alpha_zero"
    SINGULAR = "singular"
    RESONANT = "resonant"
    BRANCH_CUT = "branch_cut"
    POLE = "pole"
    UNCONVERGED = "unconverged"
    PRECONDITION = "precondition"
    UNREACHED = "unreached"


class GbdtError(Exception):
    flag = PointFlag.PRECONDITION


class ShapeError(GbdtError, ValueError):
    pass


class SingularMatrixError(GbdtError):
    flag = PointFlag.SINGULAR

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class ResonanceError(GbdtError):
    flag = PointFlag.RESONANT


class DomainError(GbdtError):
    """Branch cut, pole, alpha = 0 or spectral collision at a point."""

    def __init__(self, message: str, flag: PointFlag = PointFlag.BRANCH_CUT, point=None):
        where = f" at (xi, eta) = ({point[0]:.6g}, {point[1]:.6g})" if point is not None else ""
        super().__init__(message + where)
        self.flag = flag
        self.point = point


class ConvergenceError(GbdtError):
    flag = PointFlag.UNCONVERGED


class PreconditionError(GbdtError):
    flag = PointFlag.PRECONDITION


class ConfigError(GbdtError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))

# ============================================================================
# CONSTRUCTION + NORMS
# ============================================================================

def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D complex128 array."""
    m = np.array(value, dtype=np.complex128)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} has non-finite entries")
    return m


def fro(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def scale(a: np.ndarray) -> float:
    """Tolerance scale max(1, ||a||_F)."""
    return max(1.0, fro(a))


def dagger(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def condition(a: np.ndarray) -> float:
    if a.size == 0:
        return 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.linalg.cond(a)
    return float(c) if np.isfinite(c) else float("inf")


@dataclass(frozen=True)
class HermitianFlag:
    """Passes M iff ||M - M*||_F <= tolerance * max(1, ||M||_F)."""
    tolerance: float = 1e-10

    def residual(self, m: np.ndarray) -> float:
        return fro(m - dagger(m)) / scale(m)

    def check(self, m: np.ndarray) -> bool:
        return self.residual(m) <= self.tolerance


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))

# ============================================================================
# KERNELS
# ============================================================================

def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def inverse(a: np.ndarray, max_condition: float = GBDT_MAX_CONDITION) -> Tuple[np.ndarray, float]:
    """Inverse and its 2-norm condition estimate."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inverse needs a square matrix, got {a.shape}")
    cond = condition(a)
    if cond > max_condition:
        raise SingularMatrixError("matrix singular to tolerance", cond)
    return np.linalg.inv(a), cond


def inv(a: np.ndarray, what: str = "matrix", max_condition: float = GBDT_MAX_CONDITION) -> np.ndarray:
    """inverse() without the estimate; the error names what was inverted."""
    try:
        return inverse(a, max_condition)[0]
    except SingularMatrixError as e:
        raise SingularMatrixError(f"{what} is not invertible", e.condition) from None


def solve_sylvester(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                    max_condition: float = GBDT_SYLVESTER_CONDITION) -> np.ndarray:
    """Solve a X - X b = c via the Kronecker system (I ⊗ a - b^T ⊗ I) vec X = vec c."""
    n, m = a.shape[0], b.shape[0]
    if a.shape != (n, n) or b.shape != (m, m) or c.shape != (n, m):
        raise ShapeError(f"Sylvester shapes a={a.shape} b={b.shape} c={c.shape} do not conform")
    kron = np.kron(np.eye(m), a) - np.kron(b.T, np.eye(n))
    cond = condition(kron)
    if cond > max_condition:
        raise ResonanceError(f"resonant Sylvester: spectra nearly coincide (condition {cond:.3e})")
    lu = scipy.linalg.lu_factor(kron)
    x = scipy.linalg.lu_solve(lu, c.reshape(-1, order="F")).reshape((n, m), order="F")
    res = fro(a @ x - x @ b - c)
    if res > 1e-9 * scale(c):
        logger.warning(f"Sylvester residual {res:.3e} above 1e-9 relative (condition {cond:.3e})")
    return x


def matrix_exp(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix_exp needs a square matrix, got {a.shape}")
    return scipy.linalg.expm(a)
