"""Barycenters: debiased UOT barycenters and Soft-DTW / STA barycenters.

The debiased barycenter of ``x_1..x_K`` minimizes
``J(x) = sum_k w_k UOT~(x_k, x)``. It is computed with a Sinkhorn-like sweep
over per-input scalings ``a_k, b_k`` plus one symmetric scaling ``c``:

    a_k  = (x_k / K b_k)**omega
    xbar = c**(1/omega) * (sum_k w_k (K a_k)**(1 - omega))**(1 / (1 - omega))
    b_k  = (xbar / K a_k)**omega
    c    = (xbar / K c)**omega

Freezing ``c = 1`` gives the usual (biased) UOT barycenter. Many barycenter
problems sharing the same input frames but different weights are solved
together, which is how the STA barycenter updates all output frames at once.

The Soft-DTW barycenter alternates between soft alignments
``Z_i = w_i dsdtw/dDelta`` and per-frame weighted barycenters of the cost.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .align import sdtw, sdtw_backward, sdtw_forward
from .anderson import DEFAULT_REG, AndersonHistory
from .geometry import GroundGeometry
from .uot import (
    ConvergenceError,
    UotParams,
    debiased_uot_matrix,
    log_measure,
    sinkhorn_uot,
    symmetric_sinkhorn,
)

logger = logging.getLogger(__name__)

DEGENERATE_WEIGHT = 1e-12
PRUNE_WEIGHT = 1e-12
# Anderson memory for barycenter sweeps; 10 slots stagnate near 1e-7 at small eps
BARY_MEMORY = 20
# cap on the Anderson history buffers of one batched solve
HISTORY_BYTES = 1 << 27


def _history_memory(memory, B, n):
    # two buffers of (memory, B, n) float64
    fit = HISTORY_BYTES // (16 * B * n)
    return int(max(1, min(memory, fit)))


def normalize_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w / w.sum()


@dataclass
class BaryState:
    """Scalings of a batch of barycenter problems; ``log_b`` is dense ``(B, M, p)``."""

    log_b: np.ndarray
    log_c: np.ndarray
    log_xbar: np.ndarray | None = None


def init_state(B: int, M: int, p: int) -> BaryState:
    return BaryState(np.zeros((B, M, p)), np.zeros((B, p)))


def bary_sweep(log_X, W, geom, params, state, debiased=True, pairs=None):
    """One sweep of the barycenter fixed point. Updates ``state`` in place.

    ``log_X`` is ``(M, p)``, ``W`` is ``(B, M)`` with rows on the simplex.
    Only pairs with positive weight are touched.
    """
    omega = params.omega
    if pairs is None:
        pairs = np.nonzero(W > 0)
    bi, mi = pairs
    B, M = W.shape
    la = omega * (log_X[mi] - geom.log_apply(state.log_b[bi, mi]))
    lKa = geom.log_apply(la)
    dense = np.full((B, M, log_X.shape[1]), -np.inf)
    dense[bi, mi] = np.log(W[bi, mi])[:, None] + (1.0 - omega) * lKa
    log_xbar = logsumexp(dense, axis=1) / (1.0 - omega)
    if debiased:
        log_xbar = log_xbar + state.log_c / omega
    state.log_b[bi, mi] = omega * (log_xbar[bi] - lKa)
    if debiased:
        state.log_c = omega * (log_xbar - geom.log_apply(state.log_c))
    state.log_xbar = log_xbar
    return log_xbar


def _solve_batch(log_X, W, geom, params, debiased, state=None, accelerate=None, quiet=False,
                 memory=BARY_MEMORY, reg=DEFAULT_REG):
    """Run sweeps on a batch of problems until convergence.

    Plain mode iterates the sweep and stops when the sup-norm change of
    ``log xbar`` is below ``tol``. Accelerated mode applies Anderson
    extrapolation to the scalings ``(log b, log c)`` and stops when one exact
    sweep changes them by at most ``tol`` (sup norm); the returned state is
    always the output of an exact sweep. The Anderson ``memory`` is reduced
    when the history of a large batch would exceed ``HISTORY_BYTES``.
    """
    B, M = W.shape
    p = log_X.shape[1]
    if state is None:
        state = init_state(B, M, p)
    pairs = np.nonzero(W > 0)
    err = np.full(B, np.inf)
    it = 0
    if accelerate is None:
        accelerate = params.accelerate
    if not accelerate:
        prev = None
        for it in range(1, params.max_iter + 1):
            lx = bary_sweep(log_X, W, geom, params, state, debiased, pairs)
            if prev is not None:
                with np.errstate(invalid="ignore"):
                    d = np.abs(lx - prev)
                err = np.where(np.isfinite(d), d, 0.0).max(axis=1)
                if np.all(err <= params.tol):
                    break
            prev = lx
    else:
        # extrapolate over the scalings of active pairs only, packed per row
        bi, mi = pairs
        counts = np.bincount(bi, minlength=B)
        slot = np.arange(len(bi)) - np.concatenate([[0], np.cumsum(counts)[:-1]])[bi]
        width = int(counts.max()) * p

        def pack(st):
            zb = np.zeros((B, width // p, p))
            zb[bi, slot] = st.log_b[bi, mi]
            return np.concatenate([zb.reshape(B, -1), st.log_c], axis=1)

        z = pack(state)
        hist = AndersonHistory(_history_memory(memory, B, z.shape[1]), reg)
        for it in range(1, params.max_iter + 1):
            state.log_b[bi, mi] = z[:, :width].reshape(B, -1, p)[bi, slot]
            state.log_c = z[:, width:].copy()
            bary_sweep(log_X, W, geom, params, state, debiased, pairs)
            gz = pack(state)
            f = gz - z
            err = np.abs(f).max(axis=1)
            if np.all(err <= params.tol):
                break
            z = hist.step(gz, f)
    converged = bool(np.all(err <= params.tol))
    if not converged:
        logger.log(logging.DEBUG if quiet else logging.WARNING,
                   "barycenter: not converged after %d sweeps (max change %.3g)",
                   params.max_iter, float(err.max()))
    return state, converged, it, err


@dataclass
class BarycenterResult:
    barycenter: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float | None = None
    state: BaryState | None = field(default=None, repr=False)


def _prepare(inputs, weights):
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("barycenter needs at least one input measure")
    w = normalize_weights(weights, X.shape[0])
    return X, log_measure(X), w


def debiased_uot_barycenter(inputs, geom: GroundGeometry, params: UotParams, weights=None,
                            state: BaryState | None = None, diagnostics: bool = True,
                            strict: bool = False, accelerate: bool | None = None) -> BarycenterResult:
    """Debiased UOT barycenter of the rows of ``inputs`` (K, p).

    With ``accelerate=False`` (default: ``params.accelerate``) the plain sweep
    is iterated until the sup-norm change of ``log xbar`` is below ``params.tol``. Far from the data the
    barycenter carries vanishing mass and its log-values drift very slowly
    under the plain sweep, so by default the sweep is Anderson-accelerated
    and convergence is declared when one exact sweep moves the scalings by
    at most ``params.tol``. With ``diagnostics`` the gradient of ``J`` is re-solved at the output and
    its sup norm reported as ``grad_norm``.
    """
    X, lX, w = _prepare(inputs, weights)
    state, conv, it, _ = _solve_batch(lX, w[None, :], geom, params, True, state, accelerate)
    if strict and not conv:
        raise ConvergenceError("debiased barycenter did not converge")
    xbar = np.exp(state.log_xbar[0])
    g = None
    if diagnostics:
        g = float(np.abs(grad_J(xbar, X, geom, params, w)).max())
    return BarycenterResult(xbar, conv, it, g, state)


def uot_barycenter_biased(inputs, geom: GroundGeometry, params: UotParams, weights=None,
                          state: BaryState | None = None, strict: bool = False,
                          accelerate: bool | None = None) -> BarycenterResult:
    """UOT barycenter with the usual (entropy-biased) Sinkhorn iterations, ``c = 1``."""
    X, lX, w = _prepare(inputs, weights)
    state, conv, it, _ = _solve_batch(lX, w[None, :], geom, params, False, state, accelerate)
    if strict and not conv:
        raise ConvergenceError("biased barycenter did not converge")
    return BarycenterResult(np.exp(state.log_xbar[0]), conv, it, None, state)


def barycenter_batch(frames, W, geom, params, debiased=True, state=None, accelerate=None,
                     prune: float = PRUNE_WEIGHT):
    """Solve ``B`` barycenter problems over shared ``frames`` (M, p) with weight rows ``W`` (B, M).

    Rows of ``W`` are normalized to the simplex after dropping weights below
    ``prune`` times the row maximum, which removes numerically irrelevant
    input frames from the sweep. Returns ``(xbar (B, p), state, converged)``.
    """
    frames = np.asarray(frames, dtype=float)
    W = np.array(W, dtype=float)
    if prune > 0:
        W[W < prune * W.max(axis=1, keepdims=True)] = 0.0
    W = W / W.sum(axis=1, keepdims=True)
    # callers warm-start these solves repeatedly and report convergence themselves
    state, conv, _, _ = _solve_batch(log_measure(frames), W, geom, params, debiased, state,
                                     accelerate, quiet=True)
    return np.exp(state.log_xbar), state, conv


def barycenter_objective(x, inputs, geom, params, weights=None) -> float:
    """``J(x) = sum_k w_k UOT~(x_k, x)``."""
    X, _, w = _prepare(inputs, weights)
    x = np.asarray(x, dtype=float)
    return float(w @ debiased_uot_matrix(X, x[None, :], geom, params)[:, 0])


def grad_J(x, inputs, geom: GroundGeometry, params: UotParams, weights=None, strict=False):
    """Gradient ``gamma (c**(-eps/gamma) - sum_k w_k b_k**(-eps/gamma))`` of ``J`` at ``x``.

    ``(a_k, b_k)`` solve UOT(x_k, x) and ``c`` solves the symmetric problem of ``x``.
    """
    X, _, w = _prepare(inputs, weights)
    x = np.asarray(x, dtype=float)
    duals, _ = sinkhorn_uot(X, np.broadcast_to(x, X.shape), geom, params)
    lc, _, info = symmetric_sinkhorn(x, geom, params)
    if strict and not (np.all(duals.converged) and info["converged"]):
        raise ConvergenceError("inner solves for grad_J did not converge")
    e = -params.epsilon / params.gamma
    return params.gamma * (np.exp(e * lc) - w @ np.exp(e * duals.log_b))


# --------------------------------------------------------------------------
# Soft-DTW barycenter by alternating minimization


@dataclass
class SdtwBarycenterResult:
    barycenter: np.ndarray
    objective: list
    alignments: list
    n_outer: int
    converged: bool
    inner_converged: bool | None = None


def _check_series(inputs):
    series = [np.asarray(s, dtype=float) for s in inputs]
    if not series:
        raise ValueError("need at least one input series")
    tail = series[0].shape[1:]
    for s in series:
        if s.ndim < 1 or s.shape[1:] != tail:
            raise ValueError("input series must share their frame shape")
    return series


def sdtw_barycenter(inputs, beta: float, cost: Callable, inner: Callable, x0,
                    weights=None, max_outer: int = 50, rel_tol: float = 1e-5,
                    fixed=None, callback=None) -> SdtwBarycenterResult:
    """Soft-DTW barycenter by alternating alignments and per-frame barycenters.

    Parameters
    ----------
    inputs : list of arrays
        Series ``x_i`` of shape ``(T_i, ...)``.
    beta : float
        Soft-DTW smoothing, must be positive.
    cost : callable
        ``cost(i, x_i, x)`` returns the ``(T_i, T)`` cost matrix.
    inner : callable
        ``inner(frames, W, x_prev)`` with ``frames`` the stacked input frames
        ``(M, ...)``, ``W`` a ``(B, M)`` row-stochastic weight matrix and
        ``x_prev`` the current values of the ``B`` frames being updated,
        ``rows`` their output indices (for warm starts). Called as
        ``inner(frames, W, x_prev, rows)``; returns the ``B`` new frames.
    x0 : array
        Initial barycenter ``(T, ...)``.
    fixed : array of bool, optional
        Output frames that are never updated (e.g. an observed prefix).

    The outer loop stops when the objective ``sum_i w_i sdtw(x_i, x)``
    decreases by at most ``rel_tol`` relative, or after ``max_outer`` rounds.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    series = _check_series(inputs)
    N = len(series)
    w = normalize_weights(weights, N)
    x = np.array(x0, dtype=float)
    T = x.shape[0]
    free = np.ones(T, dtype=bool) if fixed is None else ~np.asarray(fixed, dtype=bool)
    frames = np.concatenate(series, axis=0)

    deltas = [cost(i, s, x) for i, s in enumerate(series)]
    fwd = [sdtw_forward(d, beta) for d in deltas]
    history = [float(sum(wi * f[0] for wi, f in zip(w, fwd)))]
    Zs = []
    converged = False
    n_outer = 0
    for n_outer in range(1, max_outer + 1):
        Zs = [w[i] * sdtw_backward(deltas[i], fwd[i][1], beta) for i in range(N)]
        # column t of the stacked Z gives the weights of all input frames for output t
        W = np.concatenate(Zs, axis=0).T
        mass = W.sum(axis=1)
        degenerate = free & (mass < DEGENERATE_WEIGHT)
        if degenerate.any():
            warnings.warn(f"output frames {np.nonzero(degenerate)[0].tolist()} have no "
                          "alignment weight; keeping previous values", RuntimeWarning)
        upd = free & ~degenerate
        if upd.any():
            Wu = W[upd] / mass[upd, None]
            x[upd] = inner(frames, Wu, x[upd], np.nonzero(upd)[0])
        deltas = [cost(i, s, x) for i, s in enumerate(series)]
        fwd = [sdtw_forward(d, beta) for d in deltas]
        history.append(float(sum(wi * f[0] for wi, f in zip(w, fwd))))
        if callback is not None:
            callback(n_outer, x, history[-1])
        prev, cur = history[-2], history[-1]
        if prev - cur <= rel_tol * abs(prev):
            converged = True
            break
    return SdtwBarycenterResult(x, history, Zs, n_outer, converged)


def squared_euclidean_cost(i, xi, x):
    a = xi.reshape(xi.shape[0], -1)
    b = x.reshape(x.shape[0], -1)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def weighted_mean_inner(frames, W, x_prev, rows=None):
    return np.tensordot(W, frames, axes=(1, 0))


# --------------------------------------------------------------------------
# STA: Soft-DTW on top of the debiased UOT cost


def sta_cost_matrix(x, y, geom, params, self_x=None, self_y=None) -> np.ndarray:
    """``T1 x T2`` matrix of debiased UOT divergences between the frames of ``x`` and ``y``."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    return debiased_uot_matrix(x, y, geom, params, self_x, self_y)


def sta_distance(x, y, geom: GroundGeometry, params: UotParams, beta: float) -> float:
    """STA loss: Soft-DTW with the debiased UOT divergence as frame cost."""
    return sdtw(sta_cost_matrix(x, y, geom, params), beta)


def uniform_init(inputs, T_out, p):
    mass = np.mean([np.asarray(s).reshape(len(s), -1).sum(axis=1).mean() for s in inputs])
    return np.full((T_out, p), mass / p)


class _StaInner:
    """Warm-started batched debiased barycenter over the output frames."""

    def __init__(self, geom, params, T_out, M):
        self.geom, self.params = geom, params
        self.state = init_state(T_out, M, geom.p)
        self.last_converged = True

    def __call__(self, frames, W, x_prev, rows):
        sub = BaryState(self.state.log_b[rows], self.state.log_c[rows])
        xb, sub, conv = barycenter_batch(frames, W, self.geom, self.params, True, sub)
        self.state.log_b[rows] = sub.log_b
        self.state.log_c[rows] = sub.log_c
        self.last_converged = conv
        return xb


def sta_barycenter(inputs, geom: GroundGeometry, params: UotParams, beta: float, T_out: int | None = None,
                   weights=None, x0=None, fixed=None, max_outer: int = 50, rel_tol: float = 1e-5,
                   callback=None, inner_params: UotParams | None = None) -> SdtwBarycenterResult:
    """Spatio-temporal barycenter of measure series ``(T_i, p)`` under the STA loss.

    ``x0`` defaults to uniform frames carrying the average input frame mass.
    Frames flagged in ``fixed`` keep their ``x0`` value. ``inner_params``
    (default ``params``) controls the per-frame barycenter sweeps; their
    scalings are carried over between outer iterations, so a moderate
    ``max_iter`` there still lets the inner problems converge over the run.
    ``result.inner_converged`` reports whether the last inner solve converged.
    """
    series = [np.asarray(s, dtype=float).reshape(len(s), -1) for s in inputs]
    if T_out is None:
        T_out = series[0].shape[0] if x0 is None else len(x0)
    if x0 is None:
        x0 = uniform_init(series, T_out, geom.p)
    x0 = np.asarray(x0, dtype=float).reshape(T_out, -1)
    self_inputs = [symmetric_sinkhorn(s, geom, params)[0] for s in series]
    inner = _StaInner(geom, inner_params or params, T_out, sum(s.shape[0] for s in series))
    cache = {}

    def cost(i, xi, x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = symmetric_sinkhorn(x, geom, params)[0]
        return debiased_uot_matrix(xi, x, geom, params, self_inputs[i], cache[key])

    res = sdtw_barycenter(series, beta, cost, inner, x0, weights, max_outer, rel_tol,
                          fixed, callback)
    res.inner_converged = inner.last_converged
    return res


def framewise_barycenter(inputs, geom: GroundGeometry, params: UotParams, weights=None,
                         debiased: bool = True, return_converged: bool = False):
    """Independent per-time-step UOT barycenters of equal-length series.

    Returns the ``(T, p)`` barycenter, and also the convergence flag when
    ``return_converged`` is set.
    """
    series = np.stack([np.asarray(s, dtype=float).reshape(len(s), -1) for s in inputs])
    N, T, p = series.shape
    w = normalize_weights(weights, N)
    # one batched problem per time step with its own frames: solve jointly over (T, N)
    frames = series.transpose(1, 0, 2).reshape(T * N, p)
    W = np.zeros((T, T * N))
    for t in range(T):
        W[t, t * N:(t + 1) * N] = w
    out, _, conv = barycenter_batch(frames, W, geom, params, debiased)
    return (out, conv) if return_converged else out


def euclidean_mean(inputs, weights=None) -> np.ndarray:
    series = np.stack([np.asarray(s, dtype=float) for s in inputs])
    w = normalize_weights(weights, len(series))
    return np.tensordot(w, series, axes=(0, 0))
