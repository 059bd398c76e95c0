"""Delannoy numbers and the Soft-DTW temporal-shift bounds built on them.

``D[m, n]`` counts the monotone lattice paths from (1, 1) to (m, n) using
right, down and diagonal steps, i.e. the number of DTW alignments between
series of lengths ``m`` and ``n``. Central numbers ``D[m, m]`` overflow
doubles near ``m = 520``, so everything here is carried in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

C = 1.0 + math.sqrt(2.0)
SIGMA = 21.0 / 22.0 * C**2 - 5.0
H_FACTOR = 92.0
EXACT_LIMIT = 30


class InfeasibleHeuristicError(ValueError):
    """Raised when the beta heuristic has a non-positive denominator."""


@dataclass(frozen=True)
class BoundConstants:
    """Constants of the quadratic and Dirac lower bounds for length ``T``."""

    T: int
    c: float = field(init=False)
    sigma: float = field(init=False)
    alpha: float = field(init=False)
    rho: float = field(init=False)
    H: float = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        object.__setattr__(self, "c", C)
        object.__setattr__(self, "sigma", SIGMA)
        object.__setattr__(self, "alpha", (2.0 - math.sqrt(2.0)) / self.T)
        object.__setattr__(self, "rho", (3.0 * math.sqrt(2.0) - 4.0) / (3.0 * self.T))
        object.__setattr__(self, "H", H_FACTOR * self.T**SIGMA)


def _exact_table(n):
    D = [[1] * (n + 1) for _ in range(n + 1)]
    for i in range(2, n + 1):
        for j in range(2, n + 1):
            D[i][j] = D[i - 1][j] + D[i][j - 1] + D[i - 1][j - 1]
    return D


class DelannoyTable:
    """Immutable table of log Delannoy numbers for indices ``1..max_index``.

    The recursion is evaluated one anti-diagonal at a time with a three-term
    log-sum-exp, so no entry overflows and small off-diagonal values keep
    full relative precision. Exact integers are kept for indices <= 30 as a
    cross-check.
    """

    def __init__(self, max_index: int):
        if max_index < 1:
            raise ValueError("max_index must be positive")
        n = int(max_index)
        self.max_index = n
        L = np.zeros((n + 1, n + 1))
        L[0, :] = np.nan
        L[:, 0] = np.nan
        for s in range(4, 2 * n + 1):
            i = np.arange(max(2, s - n), min(n, s - 2) + 1)
            j = s - i
            t = np.stack([L[i - 1, j], L[i, j - 1], L[i - 1, j - 1]])
            m = t.max(axis=0)
            L[i, j] = m + np.log(np.exp(t - m).sum(axis=0))
        L.setflags(write=False)
        self.log_values = L
        self.exact_values = _exact_table(min(n, EXACT_LIMIT))

    def _check(self, m, n):
        if not (1 <= m <= self.max_index and 1 <= n <= self.max_index):
            raise IndexError(
                f"Delannoy index ({m}, {n}) outside table range [1, {self.max_index}]"
            )

    def log(self, m: int, n: int) -> float:
        self._check(m, n)
        return float(self.log_values[m, n])

    def exact(self, m: int, n: int) -> int:
        if not (1 <= m <= EXACT_LIMIT and 1 <= n <= EXACT_LIMIT):
            raise IndexError(f"exact Delannoy values only kept for indices <= {EXACT_LIMIT}")
        self._check(m, n)
        return self.exact_values[m][n]


@lru_cache(maxsize=8)
def _shared_table(capacity):
    return DelannoyTable(capacity)


def get_table(min_capacity: int = 256) -> DelannoyTable:
    """Return a cached table holding at least ``min_capacity`` indices."""
    cap = 256
    while cap < min_capacity:
        cap *= 2
    return _shared_table(cap)


def delannoy_log(m: int, n: int, table: DelannoyTable | None = None) -> float:
    """Natural log of ``D[m, n]``.

    Without an explicit ``table`` a shared cached table is grown to fit.
    """
    if m < 1 or n < 1:
        raise IndexError(f"Delannoy indices must be >= 1, got ({m}, {n})")
    if table is None:
        table = get_table(max(m, n))
    return table.log(m, n)


def central_ratios(M: int) -> np.ndarray:
    """Ratios ``D[m+1]/D[m]`` for ``m = 1..M`` of the central sequence.

    Uses ``r_m = (6 - 3/m) - (1 - 1/m) / r_{m-1}`` with ``r_1 = 3``; the map is a
    strong contraction near ``c**2`` so the recursion is stable.
    """
    r = np.empty(M)
    if M == 0:
        return r
    r[0] = 3.0
    for m in range(2, M + 1):
        r[m - 1] = (6.0 - 3.0 / m) - (1.0 - 1.0 / m) / r[m - 2]
    return r


def central_delannoy_log(m: int) -> float:
    """Natural log of the central Delannoy number ``D[m, m]``."""
    if m < 1:
        raise IndexError(f"central Delannoy index must be >= 1, got {m}")
    return float(np.log(central_ratios(m - 1)).sum())


def central_delannoy_logs(M: int) -> np.ndarray:
    """``log D[m, m]`` for ``m = 1..M`` as an array (index 0 holds m = 1)."""
    out = np.zeros(M)
    out[1:] = np.cumsum(np.log(central_ratios(M - 1)))
    return out


def quad_lower_bound(k, T: int):
    """Quadratic shift bound ``P(k) = alpha k (k-1) + rho k + 1/(3T)``.

    Accepts scalar or array ``k``.
    """
    bc = BoundConstants(T)
    k = np.asarray(k, dtype=float)
    out = bc.alpha * k * (k - 1.0) + bc.rho * k + 1.0 / (3.0 * T)
    return float(out) if out.ndim == 0 else out


def _log_lambda_h(beta, r, T):
    return -r / beta + math.log(BoundConstants(T).H)


def dirac_lower_bound(k, beta: float, r: float, T: int):
    """Lower bound on ``sdtw(x, y_k) - sdtw(x, x)`` for Dirac series.

    ``LB(k) = -beta * log(exp(-P(k)) * (1 - lam) + lam * H)`` with
    ``lam = exp(-r / beta)`` and ``H = 92 T**sigma``. Evaluated with
    ``logaddexp`` so tiny ``beta`` does not underflow.
    """
    if T < 6:
        raise ValueError(f"Dirac lower bound requires T >= 6, got {T}")
    if beta <= 0 or r <= 0:
        raise ValueError("beta and r must be positive")
    P = quad_lower_bound(k, T)
    log1m_lam = math.log1p(-math.exp(-r / beta)) if r / beta < 700 else 0.0
    out = -beta * np.logaddexp(-np.asarray(P) + log1m_lam, _log_lambda_h(beta, r, T))
    return float(out) if np.ndim(out) == 0 else out


def dirac_lower_bound_limit(beta: float, r: float, T: int) -> float:
    """``lim_{k -> inf} LB(k) = -beta log(lam H) = r - beta log H``."""
    return -beta * _log_lambda_h(beta, r, T)


def beta_heuristic(k_max: int, eta: float, r: float, T: int) -> float:
    """Smallest ``beta`` for which the Dirac bound saturates by shift ``k_max``.

    Returns ``r / (P(k_max) + log((exp(eta) - 1) H))``; with this ``beta`` the
    bound at ``k_max`` sits within ``eta * beta`` of its asymptote.
    """
    if T < 6:
        raise ValueError(f"beta heuristic requires T >= 6, got {T}")
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if r <= 0:
        raise ValueError("r must be positive")
    denom = quad_lower_bound(k_max, T) + math.log(math.expm1(eta) * BoundConstants(T).H)
    if denom <= 0:
        raise InfeasibleHeuristicError(
            f"non-positive denominator {denom:.4g} for k_max={k_max}, eta={eta}; "
            "increase k_max or eta"
        )
    return r / denom


def shift_scale(delta: np.ndarray, mode: str = "max") -> float:
    """The ``r`` used by the beta heuristic for a cost matrix.

    ``mode="max"`` takes the largest entry (the practical choice);
    ``mode="min_positive"`` takes the smallest strictly positive entry.
    """
    delta = np.asarray(delta, dtype=float)
    if mode == "max":
        r = float(delta.max())
    elif mode == "min_positive":
        pos = delta[delta > 0]
        r = float(pos.min()) if pos.size else 0.0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if r <= 0:
        raise ValueError("cost matrix has no positive entry")
    return r
