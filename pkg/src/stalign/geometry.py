"""Ground costs, Gibbs kernels and log-domain kernel application.

Kernel products are always taken in log space, ``log(K @ exp(f))``. When the
smallest kernel entry is representable (``min(-C / eps) > -LOG_SAFE``) the
product is computed as a max-shifted matrix product, which is exact to
rounding because the term carrying the shift is bounded away from underflow.
Otherwise a chunked log-sum-exp is used. On 2D grids with squared Euclidean
cost the kernel factorizes over axes and is applied as two 1D products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

LOG_SAFE = 650.0
_CHUNK = 1 << 24


def default_epsilon(p: int) -> float:
    """Entropic regularization ``1 / p``."""
    if p < 1:
        raise ValueError("p must be positive")
    return 1.0 / p


def grid_cost_2d(h: int, w: int, normalize: bool = True) -> np.ndarray:
    """Squared Euclidean cost between the pixels of an ``h x w`` grid (row-major)."""
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be positive")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ii, jj = ii.ravel().astype(float), jj.ravel().astype(float)
    C = (ii[:, None] - ii[None, :]) ** 2 + (jj[:, None] - jj[None, :]) ** 2
    if normalize and C.max() > 0:
        C /= C.max()
    return C


def line_cost(p: int, normalize: bool = True) -> np.ndarray:
    x = np.arange(p, dtype=float)
    C = (x[:, None] - x[None, :]) ** 2
    if normalize and p > 1:
        C /= C.max()
    return C


def _check_cost(C):
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.allclose(C, C.T):
        raise ValueError("cost matrix must be symmetric")
    if np.any(np.diag(C) != 0):
        raise ValueError("cost matrix must have a zero diagonal")
    if np.any(C < 0):
        raise ValueError("cost matrix must be non-negative")
    return C


def _log_matvec(logK, F):
    """``log(exp(logK) @ exp(F.T)).T`` for ``F`` of shape ``(B, n)``; ``logK`` is ``(m, n)``."""
    if np.min(logK) > -LOG_SAFE:
        M = np.max(F, axis=1, keepdims=True)
        M = np.where(np.isfinite(M), M, 0.0)
        with np.errstate(divide="ignore"):
            return np.log(np.exp(F - M) @ np.exp(logK).T) + M
    B, n = F.shape
    m = logK.shape[0]
    step = max(1, _CHUNK // max(1, m * n))
    out = np.empty((B, m))
    for s in range(0, B, step):
        out[s:s + step] = logsumexp(logK[None, :, :] + F[s:s + step, None, :], axis=2)
    return out


@dataclass(frozen=True)
class GroundGeometry:
    """Support geometry shared by all measures: cost ``C`` and regularization ``epsilon``.

    ``grid=(h, w)`` declares that ``C`` is the (normalized) squared Euclidean
    grid cost, enabling the separable kernel path.
    """

    C: np.ndarray
    epsilon: float
    grid: tuple[int, int] | None = None
    log_kernel: np.ndarray = field(init=False, repr=False)
    axis_log_kernels: tuple | None = field(init=False, repr=False)

    def __post_init__(self):
        C = _check_cost(self.C)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)
        logK = -C / self.epsilon
        logK.setflags(write=False)
        object.__setattr__(self, "log_kernel", logK)
        axes = None
        if self.grid is not None:
            h, w = self.grid
            if h * w != C.shape[0]:
                raise ValueError(f"grid {self.grid} does not match p={C.shape[0]}")
            scale = C.max() / ((h - 1) ** 2 + (w - 1) ** 2) if C.max() > 0 else 1.0
            ih, iw = np.arange(h, dtype=float), np.arange(w, dtype=float)
            K1 = -scale * (ih[:, None] - ih[None, :]) ** 2 / self.epsilon
            K2 = -scale * (iw[:, None] - iw[None, :]) ** 2 / self.epsilon
            sep = K1[:, None, :, None] + K2[None, :, None, :]
            if not np.allclose(sep.reshape(h * w, h * w), logK, rtol=1e-12, atol=1e-9):
                raise ValueError("cost matrix is not the squared Euclidean cost of the grid")
            axes = (K1, K2)
        object.__setattr__(self, "axis_log_kernels", axes)

    @classmethod
    def from_grid(cls, h: int, w: int, epsilon: float | None = None, normalize: bool = True):
        C = grid_cost_2d(h, w, normalize)
        return cls(C, default_epsilon(h * w) if epsilon is None else epsilon, grid=(h, w))

    @classmethod
    def from_line(cls, p: int, epsilon: float | None = None, normalize: bool = True):
        return cls(line_cost(p, normalize), default_epsilon(p) if epsilon is None else epsilon)

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def kernel(self) -> np.ndarray:
        return np.exp(self.log_kernel)

    def log_apply(self, logv: np.ndarray, separable: bool = True) -> np.ndarray:
        """``log(K @ exp(logv))`` for a vector or a batch ``(..., p)`` of log-vectors."""
        logv = np.asarray(logv, dtype=float)
        if logv.shape[-1] != self.p:
            raise ValueError(f"expected last dimension {self.p}, got {logv.shape[-1]}")
        lead = logv.shape[:-1]
        F = logv.reshape(-1, self.p)
        if separable and self.axis_log_kernels is not None:
            h, w = self.grid
            K1, K2 = self.axis_log_kernels
            B = F.shape[0]
            # contract columns then rows
            G = _log_matvec(K2, F.reshape(B * h, w)).reshape(B, h, w)
            G = _log_matvec(K1, G.transpose(0, 2, 1).reshape(B * w, h))
            out = G.reshape(B, w, h).transpose(0, 2, 1).reshape(B, self.p)
        else:
            out = _log_matvec(self.log_kernel, F)
        return out.reshape(lead + (self.p,))

    def apply(self, v: np.ndarray, separable: bool = True) -> np.ndarray:
        """``K @ v`` for non-negative ``v`` (vector or batch)."""
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise ValueError("kernel_apply expects non-negative vectors")
        with np.errstate(divide="ignore"):
            return np.exp(self.log_apply(np.log(v), separable))

    @property
    def kernel_mass(self) -> float:
        """Entrywise sum of the kernel."""
        return float(np.exp(logsumexp(self.log_kernel)))


def kernel_apply(geometry: GroundGeometry, v, log_domain: bool = False, separable: bool = True):
    if log_domain:
        return geometry.log_apply(v, separable)
    return geometry.apply(v, separable)


def min_kernel_eigenvalue(geometry: GroundGeometry) -> float:
    return float(np.linalg.eigvalsh(geometry.kernel).min())


def is_psd_kernel(geometry: GroundGeometry, tol: float = 1e-8, max_p: int = 2000) -> bool | None:
    """Numerical PSD check of the Gibbs kernel, ``None`` when ``p`` is too large to check."""
    if geometry.p > max_p:
        return None
    return min_kernel_eigenvalue(geometry) >= -tol
