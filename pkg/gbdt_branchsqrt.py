#!/usr/bin/env python3
"""
GBDT v1.0 - Commuting square roots of shifted Jordan matrices
=============================================================
R(mu) = E D(mu) E^-1 with R(mu)^2 = A - mu I, where D(mu) is block diagonal
with upper triangular Toeplitz blocks built coefficient by coefficient.
Jordan data (eigenvalues, block sizes, similarity E) is always supplied by
the caller, never computed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
import scipy.linalg

from gbdt_matcore import DomainError, PointFlag, ShapeError, as_matrix, condition, fro, scale

logger = logging.getLogger("gbdt-branchsqrt")

SIMILARITY_MAX_CONDITION = 1e8
SHIFT_LOCUS_TOL = 1e-12

# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True, eq=False)
class JordanSpec:
    """A matrix given as E · blockdiag(Jordan blocks) · E^-1."""
    blocks: Tuple[Tuple[complex, int], ...]
    similarity: np.ndarray

    def __post_init__(self):
        blocks = tuple((complex(lam), int(size)) for lam, size in self.blocks)
        if not blocks or any(size < 1 for _, size in blocks):
            raise ShapeError(f"Jordan blocks need positive sizes, got {self.blocks}")
        object.__setattr__(self, "blocks", blocks)
        n = sum(size for _, size in blocks)
        e = as_matrix(self.similarity, "similarity")
        if e.shape != (n, n):
            raise ShapeError(f"similarity must be {n}x{n}, got {e.shape}")
        cond = condition(e)
        if cond > SIMILARITY_MAX_CONDITION:
            raise ShapeError(f"similarity ill-conditioned ({cond:.3e} > {SIMILARITY_MAX_CONDITION:.0e})")
        object.__setattr__(self, "similarity", e)
        object.__setattr__(self, "_e_inv", np.linalg.inv(e))

    @classmethod
    def jordan_block(cls, lam: complex, n: int) -> "JordanSpec":
        return cls(((lam, n),), np.eye(n))

    @classmethod
    def diagonal(cls, values: Sequence[complex], similarity=None) -> "JordanSpec":
        n = len(values)
        return cls(tuple((v, 1) for v in values), np.eye(n) if similarity is None else similarity)

    @property
    def size(self) -> int:
        return sum(size for _, size in self.blocks)

    @property
    def e_inv(self) -> np.ndarray:
        return self._e_inv

    def eigenvalues(self) -> np.ndarray:
        return np.array([lam for lam, _ in self.blocks], dtype=np.complex128)

    def jordan_matrix(self) -> np.ndarray:
        return scipy.linalg.block_diag(*[
            lam * np.eye(size, dtype=np.complex128) + np.eye(size, k=1) for lam, size in self.blocks
        ]).astype(np.complex128)

    def matrix(self) -> np.ndarray:
        """Reconstructed A = E J E^-1."""
        return self.similarity @ self.jordan_matrix() @ self._e_inv

    def to_dict(self) -> Dict:
        return {
            "blocks": [[lam.real, lam.imag, size] for lam, size in self.blocks],
            "similarity": [[[z.real, z.imag] for z in row] for row in self.similarity.tolist()],
        }


@dataclass(frozen=True)
class BranchChoice:
    """Per-block sign (+1/-1) applied to the principal square root."""
    signs: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        bad = {k: s for k, s in self.signs.items() if s not in (1, -1)}
        if bad:
            raise ShapeError(f"branch signs must be +1 or -1, got {bad}")

    def sign(self, block: int) -> int:
        return self.signs.get(block, 1)


PRINCIPAL = BranchChoice()

# ============================================================================
# TOEPLITZ BLOCK ROOTS
# ============================================================================

def toeplitz_block_sqrt(lam: complex, mu: complex, n: int, branch: int = 1) -> np.ndarray:
    """Diagonals c_0..c_{n-1} of the upper triangular Toeplitz root of (lam-mu) I + S_1."""
    shift = complex(lam) - complex(mu)
    if abs(shift) <= SHIFT_LOCUS_TOL * max(1.0, abs(lam)):
        raise DomainError(f"eigenvalue on shift locus: lambda = {lam}, mu = {mu}", PointFlag.POLE)
    c = np.zeros(n, dtype=np.complex128)
    c[0] = branch * np.sqrt(shift)
    if n > 1:
        c[1] = 1.0 / (2.0 * c[0])
    # coefficient of S_i in R^2 is sum_k c_k c_{i-k}; forced to zero for i >= 2
    for i in range(2, n):
        c[i] = -np.dot(c[1:i], c[i - 1:0:-1]) / (2.0 * c[0])
    return c


def toeplitz_upper(coeffs: np.ndarray) -> np.ndarray:
    first_col = np.zeros_like(coeffs)
    first_col[0] = coeffs[0]
    return scipy.linalg.toeplitz(first_col, coeffs)


def jordan_root(spec: JordanSpec, mu: complex, branch: BranchChoice = PRINCIPAL) -> np.ndarray:
    """D(mu): the block-diagonal Toeplitz root of J - mu I."""
    blocks = [toeplitz_upper(toeplitz_block_sqrt(lam, mu, size, branch.sign(k)))
              for k, (lam, size) in enumerate(spec.blocks)]
    return scipy.linalg.block_diag(*blocks).astype(np.complex128)


def shifted_sqrt(spec: JordanSpec, mu: complex, branch: BranchChoice = PRINCIPAL) -> np.ndarray:
    """R(mu) = E D(mu) E^-1 with R(mu)^2 = A - mu I."""
    r = spec.similarity @ jordan_root(spec, mu, branch) @ spec.e_inv
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(f"R({mu}) residual {sqrt_residual(spec, mu, r):.2e}")
    return r


def sqrt_residual(spec: JordanSpec, mu: complex, r: np.ndarray) -> float:
    a = spec.matrix()
    return fro(r @ r - (a - mu * np.eye(spec.size))) / scale(a)
