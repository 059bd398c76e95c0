"""Soft-DTW value and its gradient with respect to the cost matrix.

The forward and backward dynamic programs are evaluated one anti-diagonal
at a time: every cell on diagonal ``i + j = s`` only depends on diagonals
``s - 1`` and ``s - 2``, which lets numpy process a whole diagonal at once.
Brute-force enumeration over all alignments is provided as an oracle for
small sizes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .delannoy import delannoy_log

ENUMERATION_GUARD = 10**6


@dataclass(frozen=True)
class ForwardTable:
    """Padded table of intermediate soft costs, ``r[0, 0] = 0`` and ``+inf`` borders."""

    r: np.ndarray
    beta: float

    @property
    def value(self) -> float:
        return float(self.r[-1, -1])


def as_cost_matrix(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.ndim != 2 or min(delta.shape) < 1:
        raise ValueError(f"cost matrix must be a non-empty 2D array, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("cost matrix has non-finite entries")
    return delta


def softmin(values, beta: float) -> float:
    """``-beta * log(sum(exp(-v / beta)))``, or ``min(v)`` when ``beta == 0``."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("softmin of an empty set")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    vmin = v.min()
    if beta == 0 or not np.isfinite(vmin):
        return float(vmin)
    return float(vmin - beta * np.log(np.exp(-(v - vmin) / beta).sum()))


def _softmin3(a, b, c, beta):
    m = np.minimum(np.minimum(a, b), c)
    if beta == 0:
        return m
    with np.errstate(invalid="ignore"):
        s = np.exp(-(a - m) / beta) + np.exp(-(b - m) / beta) + np.exp(-(c - m) / beta)
    return m - beta * np.log(s)


def _diagonal(s, T1, T2):
    i = np.arange(max(1, s - T2), min(T1, s - 1) + 1)
    return i, s - i


def sdtw_forward(delta, beta: float) -> tuple[float, ForwardTable]:
    """Soft-DTW value of a cost matrix and the forward table.

    ``r[i, j] = delta[i, j] + softmin(r[i-1, j-1], r[i-1, j], r[i, j-1])``;
    ``beta = 0`` gives classic DTW.
    """
    delta = as_cost_matrix(delta)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    T1, T2 = delta.shape
    r = np.full((T1 + 1, T2 + 1), np.inf)
    r[0, 0] = 0.0
    for s in range(2, T1 + T2 + 1):
        i, j = _diagonal(s, T1, T2)
        r[i, j] = delta[i - 1, j - 1] + _softmin3(r[i - 1, j - 1], r[i - 1, j], r[i, j - 1], beta)
    table = ForwardTable(r, float(beta))
    return table.value, table


def sdtw(delta, beta: float) -> float:
    return sdtw_forward(delta, beta)[0]


def sdtw_backward(delta, table: ForwardTable, beta: float) -> np.ndarray:
    """Expected alignment ``E = d sdtw / d delta`` by back-propagating the forward DP.

    The recursion consumes ``e[i+1, .]`` and ``e[., j+1]``, so cells are visited
    from the bottom-right corner backwards.
    """
    delta = as_cost_matrix(delta)
    if beta <= 0:
        raise ValueError("sdtw_backward requires beta > 0 (DTW is not differentiable)")
    if abs(beta - table.beta) > 0:
        raise ValueError("forward table was computed with a different beta")
    T1, T2 = delta.shape
    if table.r.shape != (T1 + 1, T2 + 1):
        raise ValueError("forward table does not match the cost matrix")
    # 1-based with an extra -inf border after the last row / column
    R = np.full((T1 + 2, T2 + 2), -np.inf)
    R[1:T1 + 1, 1:T2 + 1] = table.r[1:, 1:]
    R[T1 + 1, T2 + 1] = R[T1, T2]
    D = np.zeros((T1 + 2, T2 + 2))
    D[1:T1 + 1, 1:T2 + 1] = delta
    E = np.zeros((T1 + 2, T2 + 2))
    E[T1 + 1, T2 + 1] = 1.0
    for s in range(T1 + T2, 1, -1):
        i, j = _diagonal(s, T1, T2)
        rij = R[i, j]
        a = np.exp((R[i + 1, j] - rij - D[i + 1, j]) / beta)
        b = np.exp((R[i, j + 1] - rij - D[i, j + 1]) / beta)
        c = np.exp((R[i + 1, j + 1] - rij - D[i + 1, j + 1]) / beta)
        E[i, j] = a * E[i + 1, j] + b * E[i, j + 1] + c * E[i + 1, j + 1]
    return E[1:T1 + 1, 1:T2 + 1]


def sdtw_value_and_grad(delta, beta: float) -> tuple[float, np.ndarray]:
    value, table = sdtw_forward(delta, beta)
    return value, sdtw_backward(delta, table, beta)


def sdtw_batch(deltas, beta: float, grad: bool = False, threads: int = 1) -> list:
    """Evaluate many independent Soft-DTW problems, results in input order."""
    fn = (lambda d: sdtw_value_and_grad(d, beta)) if grad else (lambda d: sdtw(d, beta))
    if threads <= 1:
        return [fn(d) for d in deltas]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, deltas))


def _paths(T1, T2):
    # paths as lists of cells, built by extending from (0, 0)
    def rec(i, j):
        if i == T1 - 1 and j == T2 - 1:
            yield ((i, j),)
            return
        for di, dj in ((0, 1), (1, 0), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < T1 and nj < T2:
                for tail in rec(ni, nj):
                    yield ((i, j),) + tail

    return rec(0, 0)


def enumerate_alignments(T1: int, T2: int) -> np.ndarray:
    """All binary alignment matrices between lengths ``T1`` and ``T2``.

    Returns an array of shape ``(D[T1, T2], T1, T2)``.
    """
    if T1 < 1 or T2 < 1:
        raise ValueError("lengths must be positive")
    if delannoy_log(T1, T2) > np.log(ENUMERATION_GUARD):
        raise ValueError(f"D[{T1}, {T2}] exceeds the enumeration guard {ENUMERATION_GUARD}")
    paths = list(_paths(T1, T2))
    A = np.zeros((len(paths), T1, T2), dtype=np.uint8)
    for k, path in enumerate(paths):
        rows, cols = zip(*path)
        A[k, rows, cols] = 1
    return A


def sdtw_bruteforce(delta, beta: float, alignments: np.ndarray | None = None):
    """Soft-DTW and expected alignment by summing over every alignment.

    Returns ``(value, E)``. For ``beta == 0`` ``E`` is the uniform average over
    the minimizing alignments.
    """
    delta = as_cost_matrix(delta)
    A = enumerate_alignments(*delta.shape) if alignments is None else alignments
    costs = np.tensordot(A, delta, axes=([1, 2], [0, 1]))
    cmin = costs.min()
    if beta == 0:
        w = (costs == cmin).astype(float)
        value = float(cmin)
    else:
        w = np.exp(-(costs - cmin) / beta)
        value = float(cmin - beta * np.log(w.sum()))
    E = np.tensordot(w / w.sum(), A, axes=(0, 0))
    return value, E


def dirac_series(T: int, t: int, height: float = 1.0) -> np.ndarray:
    """Length-``T`` series equal to ``height`` at 1-based time ``t`` and zero elsewhere."""
    if not 1 <= t <= T:
        raise ValueError(f"time {t} outside [1, {T}]")
    x = np.zeros(T)
    x[t - 1] = height
    return x


def dirac_shift_gaps(T: int, t_star: int, shifts, beta: float, height: float = 1.0) -> np.ndarray:
    """``sdtw(x, y_k) - sdtw(x, x)`` for Dirac series ``x`` at ``t_star`` and ``y_k`` at ``t_star + k``.

    The frame cost is the squared difference, so the largest cost is ``height**2``.
    """
    x = dirac_series(T, t_star, height)
    base = sdtw((x[:, None] - x[None, :]) ** 2, beta)
    out = []
    for k in np.atleast_1d(shifts):
        y = dirac_series(T, t_star + int(k), height)
        out.append(sdtw((x[:, None] - y[None, :]) ** 2, beta) - base)
    return np.array(out)
