"""Entropic unbalanced optimal transport with KL marginal penalties.

    UOT(x, y) = min_P  eps KL(P | K) + gamma KL(P 1 | x) + gamma KL(P^T 1 | y),
    K = exp(-C / eps).

Dual scalings ``a = exp(u / eps)``, ``b = exp(v / eps)`` solve
``a = (x / K b)**omega``, ``b = (y / K^T a)**omega`` with
``omega = gamma / (gamma + eps)``. All iterations are carried out on
``log a`` and ``log b``. Solvers work on batches of independent pairs run in
lockstep; a pair stops being updated once it has converged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .anderson import AndersonHistory
from .geometry import GroundGeometry

logger = logging.getLogger(__name__)

PAIR_CHUNK = 512


class ConvergenceError(RuntimeError):
    """A solver did not reach its tolerance and the caller asked for strictness."""


@dataclass(frozen=True)
class UotParams:
    epsilon: float
    gamma: float = 1.0
    tol: float = 1e-7
    max_iter: int = 5000
    accelerate: bool = True

    def __post_init__(self):
        if self.epsilon <= 0 or self.gamma <= 0:
            raise ValueError("epsilon and gamma must be positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")

    @property
    def omega(self) -> float:
        return self.gamma / (self.gamma + self.epsilon)

    def replace(self, **kw) -> "UotParams":
        d = dict(epsilon=self.epsilon, gamma=self.gamma, tol=self.tol, max_iter=self.max_iter,
                 accelerate=self.accelerate)
        d.update(kw)
        return UotParams(**d)


@dataclass
class DualState:
    """Log-domain Sinkhorn scalings of one (or a batch of) UOT problem(s)."""

    log_a: np.ndarray
    log_b: np.ndarray
    converged: bool | np.ndarray
    iterations: int | np.ndarray
    marginal_gap: float | np.ndarray


def kl_divergence(x, y) -> float:
    """Generalized KL ``<x, log(x / y)> + <y - x, 1>`` between non-negative vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("KL expects non-negative vectors")
    if np.any((x > 0) & (y == 0)):
        return float("inf")
    pos = x > 0
    return float(np.sum(x[pos] * np.log(x[pos] / y[pos])) + np.sum(y) - np.sum(x))


def log_measure(x) -> np.ndarray:
    """Validate non-negative weights (last axis = support) and return their log."""
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("measures must have finite non-negative weights")
    if np.any(x.reshape(-1, x.shape[-1]).sum(axis=1) <= 0):
        raise ValueError("measures must carry positive mass")
    with np.errstate(divide="ignore"):
        return np.log(x)


def _sup_change(new, old):
    with np.errstate(invalid="ignore"):
        d = np.abs(new - old)
    return np.where(np.isfinite(d), d, 0.0).max(axis=-1)


def _sinkhorn_batch(log_x, log_y, geom, params, log_b0=None, callback=None):
    B, p = log_x.shape
    omega = params.omega
    log_b = np.zeros((B, p)) if log_b0 is None else np.array(log_b0, dtype=float)
    log_a = np.zeros((B, p))
    iters = np.zeros(B, dtype=int)
    gap = np.full(B, np.inf)
    active = np.arange(B)
    # the next point to sweep from; differs from log_b when extrapolating
    z = log_b.copy()
    hist = AndersonHistory() if params.accelerate else None
    for it in range(1, params.max_iter + 1):
        lb = z
        la = omega * (log_x[active] - geom.log_apply(lb))
        lb_new = omega * (log_y[active] - geom.log_apply(la))
        err = _sup_change(lb_new, lb)
        log_a[active] = la
        log_b[active] = lb_new
        iters[active] = it
        gap[active] = err
        if callback is not None:
            callback(it, log_a, log_b)
        keep = err > params.tol
        active = active[keep]
        if active.size == 0:
            break
        lb_new = lb_new[keep]
        if hist is None:
            z = lb_new
        else:
            if not keep.all():
                hist.restrict(keep)
            # zero-weight coordinates stay at -inf; extrapolate the rest
            dead = ~np.isfinite(lb_new)
            gz = np.where(dead, 0.0, lb_new)
            z = hist.step(gz, gz - np.where(dead, 0.0, lb[keep]))
            z[dead] = -np.inf
    return log_a, log_b, gap <= params.tol, iters, gap


def _symmetric_batch(log_x, geom, params, log_c0=None):
    B, p = log_x.shape
    omega = params.omega
    log_c = np.zeros((B, p)) if log_c0 is None else np.array(log_c0, dtype=float)
    iters = np.zeros(B, dtype=int)
    res = np.full(B, np.inf)
    active = np.arange(B)
    for it in range(1, params.max_iter + 1):
        lc = log_c[active]
        target = omega * (log_x[active] - geom.log_apply(lc))
        r = _sup_change(target, lc)
        log_c[active] = 0.5 * (lc + target)
        iters[active] = it
        res[active] = r
        active = active[r > params.tol]
        if active.size == 0:
            break
    # final residual at the returned point
    return log_c, res <= params.tol, iters, res


def _dot_a_Kb(log_a, log_b, geom):
    with np.errstate(invalid="ignore"):
        return np.exp(logsumexp(log_a + geom.log_apply(log_b), axis=-1))


def _weighted_pow(x, log_s, expo):
    # <x, s**expo> with the convention 0 * inf = 0 on empty support
    with np.errstate(invalid="ignore", over="ignore"):
        t = x * np.exp(expo * log_s)
    return np.where(x > 0, t, 0.0).sum(axis=-1)


def dual_objective(x, y, log_a, log_b, geom: GroundGeometry, params: UotParams):
    """Dual function at scalings ``(a, b)``; a lower bound on UOT, tight at the optimum."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    eps, gam = params.epsilon, params.gamma
    e = -eps / gam
    return (
        -gam * (_weighted_pow(x, log_a, e) - x.sum(axis=-1))
        - gam * (_weighted_pow(y, log_b, e) - y.sum(axis=-1))
        - eps * (_dot_a_Kb(log_a, log_b, geom) - geom.kernel_mass)
    )


def uot_value_closed_form(x, y, log_a, log_b, geom, params):
    """``-(eps + 2 gamma) <a, K b> + eps sum(K) + gamma (|x| + |y|)``, valid at the fixed point."""
    eps, gam = params.epsilon, params.gamma
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return (
        -(eps + 2 * gam) * _dot_a_Kb(log_a, log_b, geom)
        + eps * geom.kernel_mass
        + gam * (x.sum(axis=-1) + y.sum(axis=-1))
    )


def sinkhorn_uot(x, y, geom: GroundGeometry, params: UotParams, init=None, callback=None):
    """Solve UOT between ``x`` and ``y`` (vectors or batches of shape ``(B, p)``).

    Parameters
    ----------
    x, y : array-like
        Non-negative weights on the support of ``geom``.
    geom : GroundGeometry
    params : UotParams
    init : array-like, optional
        Warm start for ``log b``.
    callback : callable, optional
        Called as ``callback(iteration, log_a, log_b)`` after every sweep.

    Returns
    -------
    duals : DualState
    value : float or ndarray
        UOT value, evaluated as the dual objective at the final scalings.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    single = x.ndim == 1
    X, Y = np.atleast_2d(x), np.atleast_2d(y)
    X, Y = np.broadcast_arrays(X, Y)
    lx, ly = log_measure(X), log_measure(Y)
    init2 = None if init is None else np.broadcast_to(np.atleast_2d(init), X.shape)
    la, lb, conv, iters, gap = _sinkhorn_batch(lx, ly, geom, params, init2, callback)
    if not conv.all():
        logger.warning("sinkhorn_uot: %d/%d problems did not converge in %d iterations",
                       (~conv).sum(), conv.size, params.max_iter)
    value = dual_objective(X, Y, la, lb, geom, params)
    if single:
        return DualState(la[0], lb[0], bool(conv[0]), int(iters[0]), float(gap[0])), float(value[0])
    return DualState(la, lb, conv, iters, gap), value


def symmetric_sinkhorn(x, geom: GroundGeometry, params: UotParams, init=None):
    """Symmetric scaling ``c = (x / K c)**omega`` of ``UOT(x, x)``.

    Iterates the averaged map ``log c <- (log c + omega (log x - log K c)) / 2``;
    the undamped map oscillates when ``omega`` is close to 1.

    Returns ``(log_c, value, info)`` where ``info`` holds ``converged``,
    ``iterations`` and ``residual``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    lx = log_measure(X)
    init2 = None if init is None else np.broadcast_to(np.atleast_2d(init), X.shape)
    lc, conv, iters, res = _symmetric_batch(lx, geom, params, init2)
    if not conv.all():
        logger.warning("symmetric_sinkhorn: %d/%d problems did not converge", (~conv).sum(), conv.size)
    value = dual_objective(X, X, lc, lc, geom, params)
    info = dict(converged=conv, iterations=iters, residual=res)
    if single:
        return lc[0], float(value[0]), {k: v[0] for k, v in info.items()}
    return lc, value, info


def symmetric_residual(x, log_c, geom, params) -> float:
    """``max |c - (x / K c)**omega|`` in the linear domain."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        target = params.omega * (np.log(x) - geom.log_apply(log_c))
    return float(np.max(np.abs(np.exp(log_c) - np.exp(target))))


def transport_plan(duals: DualState, geom: GroundGeometry) -> np.ndarray:
    """Primal plan ``P_ij = a_i K_ij b_j``."""
    return np.exp(duals.log_a[:, None] + geom.log_kernel + duals.log_b[None, :])


def transported_mass_fraction(duals: DualState, x, y, geom: GroundGeometry) -> float:
    """``<P, 1> / min(|x|, |y|)``: how much mass the plan actually moves."""
    mass = float(np.exp(logsumexp(duals.log_a + geom.log_apply(duals.log_b))))
    return mass / min(float(np.sum(x)), float(np.sum(y)))


def _debiased_from_parts(x, y, la, lb, lcx, lcy, geom, params):
    eps, gam = params.epsilon, params.gamma
    e = -eps / gam
    cross = (
        -gam * _weighted_pow(x, la, e)
        - gam * _weighted_pow(y, lb, e)
        - eps * _dot_a_Kb(la, lb, geom)
    )
    self_x = -2 * gam * _weighted_pow(x, lcx, e) - eps * _dot_a_Kb(lcx, lcx, geom)
    self_y = -2 * gam * _weighted_pow(y, lcy, e) - eps * _dot_a_Kb(lcy, lcy, geom)
    # kernel-mass and total-mass constants cancel exactly
    return cross - 0.5 * (self_x + self_y)


def debiased_uot(x, y, geom: GroundGeometry, params: UotParams) -> float:
    """``UOT(x, y) - (UOT(x, x) + UOT(y, y)) / 2``; non-negative for PSD kernels."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    duals, _ = sinkhorn_uot(x, y, geom, params)
    lc, _, _ = symmetric_sinkhorn(np.stack([x, y]), geom, params)
    return float(_debiased_from_parts(x, y, duals.log_a, duals.log_b, lc[0], lc[1], geom, params))


def debiased_uot_matrix(X, Y, geom: GroundGeometry, params: UotParams,
                        self_x=None, self_y=None, symmetric: bool = False,
                        threads: int = 1) -> np.ndarray:
    """Pairwise debiased divergences between the rows of ``X`` (n, p) and ``Y`` (m, p).

    ``self_x`` / ``self_y`` are optional precomputed symmetric log-scalings.
    With ``symmetric=True`` (``X is Y``) only the upper triangle is solved.
    Pairs are solved in fixed-size chunks, optionally on ``threads`` workers;
    chunking does not depend on ``threads`` so results are identical.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, m = X.shape[0], Y.shape[0]
    if self_x is None:
        self_x = symmetric_sinkhorn(X, geom, params)[0]
    if self_y is None:
        self_y = self_x if symmetric else symmetric_sinkhorn(Y, geom, params)[0]
    if symmetric:
        I, J = np.triu_indices(n, k=1)
    else:
        I, J = np.divmod(np.arange(n * m), m)
    out = np.zeros((n, m))

    def solve(sl):
        i, j = I[sl], J[sl]
        duals, _ = sinkhorn_uot(X[i], Y[j], geom, params, init=self_y[j])
        return _debiased_from_parts(X[i], Y[j], duals.log_a, duals.log_b,
                                    self_x[i], self_y[j], geom, params)

    chunks = [slice(s, s + PAIR_CHUNK) for s in range(0, I.size, PAIR_CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(solve, chunks))
    else:
        parts = [solve(sl) for sl in chunks]
    if parts:
        vals = np.concatenate(parts)
        out[I, J] = vals
        if symmetric:
            out[J, I] = vals
    return out


def uot_grad(x, y, duals: DualState, params: UotParams, strict: bool = True):
    """Gradient of UOT in ``(x, y)``: ``gamma (1 - a**(-eps/gamma), 1 - b**(-eps/gamma))``."""
    if strict and not np.all(duals.converged):
        raise ConvergenceError("uot_grad needs converged dual scalings")
    e = -params.epsilon / params.gamma
    with np.errstate(over="ignore"):
        ga = params.gamma * (1.0 - np.exp(e * duals.log_a))
        gb = params.gamma * (1.0 - np.exp(e * duals.log_b))
    return ga, gb
