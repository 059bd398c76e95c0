"""Batched Anderson extrapolation for fixed-point iterations ``z <- F(z)``."""

from __future__ import annotations

import numpy as np

DEFAULT_MEMORY = 10
DEFAULT_REG = 1e-10


class AndersonHistory:
    """Regularized Anderson (type II) acceleration, one independent problem per row.

    Differences of successive map outputs and residuals are kept in ring
    buffers of ``memory`` slots, together with the Gram matrix of residual
    differences, which is updated one row per step.

    Call :meth:`step` with the map output ``F(z)`` and residual ``F(z) - z``
    at the current point; it returns the next point. Rows for which the
    least-squares system is degenerate fall back to the plain step.
    """

    def __init__(self, memory: int = DEFAULT_MEMORY, reg: float = DEFAULT_REG):
        if memory < 1:
            raise ValueError("memory must be positive")
        self.memory, self.reg = memory, reg
        self.dG = self.dF = self.gram = None
        self.last_g = self.last_f = None
        self.count = 0
        self.pos = 0

    def restrict(self, keep):
        """Drop rows that left the active set (``keep`` indexes the current rows)."""
        if self.last_g is None:
            return
        self.last_g, self.last_f = self.last_g[keep], self.last_f[keep]
        if self.dG is not None:
            self.dG, self.dF, self.gram = self.dG[:, keep], self.dF[:, keep], self.gram[keep]

    def step(self, gz: np.ndarray, f: np.ndarray) -> np.ndarray:
        if self.last_g is None:
            self.last_g, self.last_f = gz.copy(), f.copy()
            return gz
        m = self.memory
        if self.dG is None:
            B, n = gz.shape
            self.dG = np.zeros((m, B, n))
            self.dF = np.zeros((m, B, n))
            self.gram = np.zeros((B, m, m))
        k = self.pos
        np.subtract(gz, self.last_g, out=self.dG[k])
        np.subtract(f, self.last_f, out=self.dF[k])
        self.last_g[...] = gz
        self.last_f[...] = f
        self.count = min(self.count + 1, m)
        self.pos = (k + 1) % m
        row = np.einsum("bn,jbn->bj", self.dF[k], self.dF)
        self.gram[:, k, :] = row
        self.gram[:, :, k] = row
        used = self.count
        A = self.gram[:, :used, :used]
        scale = np.trace(A, axis1=1, axis2=2)[:, None, None]
        A = A + (self.reg * scale + 1e-300) * np.eye(used)
        rhs = np.einsum("jbn,bn->bj", self.dF[:used], f)
        with np.errstate(all="ignore"):
            try:
                theta = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                return gz.copy()
            z = gz - np.einsum("bj,jbn->bn", theta, self.dG[:used])
        bad = ~np.all(np.isfinite(z), axis=1)
        if bad.any():
            z[bad] = gz[bad]
        return z
