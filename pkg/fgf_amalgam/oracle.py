from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .algebra import ZERO, format_ratio, ratio
from .errors import DomainError
from .kernel import SIDE_A, SIDE_B, BlockEntry, CompressedBlock, block_product

log = logging.getLogger("fgf_amalgam.oracle")

DEFAULT_DIM = 2000
TOLERANCE = 0.02


def haar_isometry(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First k columns of a Haar orthogonal n x n matrix (QR of a Gaussian matrix, signs fixed)."""
    g = rng.standard_normal((n, k))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def simulated_mass(alpha: Fraction, beta: Fraction, dim: int = DEFAULT_DIM, seed: Optional[int] = 0, eps: float = 1e-6) -> float:
    """
    Normalized dimension of P ^ Q for a coordinate projection P of trace alpha and a Haar
    rotated projection Q of trace beta: the spectral mass of PQP at 1.
    """
    a = int(alpha * dim)
    b = int(beta * dim)
    if a == 0 or b == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    w = haar_isometry(dim, b, rng)
    # PQP restricted to the range of P is W_a W_a^T, with eigenvalues the squared singular values of W_a
    sv = np.linalg.svd(w[:a, :], compute_uv=False)
    return float(np.count_nonzero(sv * sv > 1.0 - eps)) / dim


def exact_mass(alpha: Fraction, beta: Fraction) -> Fraction:
    """Trace of P ^ Q from the block product of C(alpha) + C(1 - alpha) with C(beta) + C(1 - beta)."""
    alpha, beta = ratio(alpha), ratio(beta)
    for x in (alpha, beta):
        if not 0 < x < 1:
            raise DomainError(f"projection trace must lie in (0, 1), got {format_ratio(x)}")
    ca = CompressedBlock(atom=0, side=SIDE_A, entries=(BlockEntry.matrix(0, 1, alpha), BlockEntry.matrix(1, 1, 1 - alpha)))
    cb = CompressedBlock(atom=0, side=SIDE_B, entries=(BlockEntry.matrix(0, 1, beta), BlockEntry.matrix(1, 1, 1 - beta)))
    bp = block_product(ca, cb, Fraction(1))
    for p in bp.matrix_summands:
        if p.pair == (0, 0):
            return p.min_trace
    return ZERO


@dataclass(frozen=True)
class OracleCheck:
    alpha: Fraction
    beta: Fraction
    exact: Fraction
    simulated: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(float(self.exact) - self.simulated) <= self.tolerance


def check_two_projections(
    alpha: Fraction, beta: Fraction, dim: int = DEFAULT_DIM, seed: Optional[int] = 0, tolerance: float = TOLERANCE
) -> OracleCheck:
    exact = exact_mass(alpha, beta)
    got = simulated_mass(ratio(alpha), ratio(beta), dim=dim, seed=seed)
    res = OracleCheck(alpha=ratio(alpha), beta=ratio(beta), exact=exact, simulated=got, tolerance=tolerance)
    log.debug("two projections %s, %s: exact %s simulated %.4f", format_ratio(res.alpha), format_ratio(res.beta), format_ratio(exact), got)
    return res
