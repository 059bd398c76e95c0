"""Synthetic moving-blob data and forecasting by nearest-neighbor barycenters.

A query series is known on its first ``t0`` frames. Its ``k`` nearest
neighbors are found by comparing prefixes under one of four losses, and the
forecast is the barycenter of the neighbors with the observed prefix held
fixed. The remaining frames are the prediction.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .align import sdtw
from .barycenter import euclidean_mean, framewise_barycenter, sta_barycenter
from .geometry import GroundGeometry
from .uot import UotParams, debiased_uot_matrix, symmetric_sinkhorn

logger = logging.getLogger(__name__)

LOSSES = ("sta", "uot", "l2", "flat_l2")
TEMPLATES = ("line", "arc", "zigzag", "loop")


@dataclass
class Dataset:
    """``samples`` has shape ``(N, T, h, w)``; ``labels`` holds class ids."""

    samples: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.samples.ndim != 4:
            raise ValueError("samples must have shape (N, T, h, w)")
        if len(self.labels) != len(self.samples):
            raise ValueError("one label per sample")
        if np.any(self.samples < 0):
            raise ValueError("frames must be non-negative")

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self):
        return self.samples.shape

    @property
    def grid(self):
        return self.samples.shape[2:]

    def flat(self) -> np.ndarray:
        """Samples as ``(N, T, p)`` series of measures."""
        N, T, h, w = self.samples.shape
        return self.samples.reshape(N, T, h * w)


@dataclass(frozen=True)
class ForecastTask:
    query: np.ndarray
    t0: int
    k: int = 5
    loss: str = "sta"

    def __post_init__(self):
        q = np.asarray(self.query, dtype=float)
        object.__setattr__(self, "query", q)
        if not 1 <= self.t0 < len(q):
            raise ValueError(f"t0 must satisfy 1 <= t0 < T={len(q)}, got {self.t0}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}, expected one of {LOSSES}")


@dataclass(frozen=True)
class ForecastConfig:
    """Solver settings shared by the OT-based losses."""

    params: UotParams
    beta: float = 1.0
    max_outer: int = 50
    rel_tol: float = 1e-5
    threads: int = 1
    inner_max_iter: int = 50

    @property
    def inner_params(self) -> UotParams:
        return self.params.replace(max_iter=self.inner_max_iter)


def _template(name, s, lo, hi):
    # positions in [lo, hi]^2 along the trajectory, s in [0, 1]
    mid, rad = (lo + hi) / 2, (hi - lo) / 2
    if name == "line":
        return lo + s * (hi - lo), lo + s * (hi - lo)
    if name == "arc":
        a = np.pi * s
        return mid - rad * np.cos(a), lo + rad * np.sin(a) * 2
    if name == "zigzag":
        tri = 1 - np.abs(2 * ((2 * s) % 1) - 1)
        return lo + s * (hi - lo), lo + tri * (hi - lo)
    if name == "loop":
        a = 2 * np.pi * s
        return mid + rad * np.sin(a), mid - rad * np.cos(a)
    raise ValueError(f"unknown template {name!r}")


def _blob(h, w, ci, cj, sigma):
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    g = np.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2 * sigma**2))
    return g / g.sum()


def generate_moving_blobs(classes: int = 4, per_class: int = 20, T: int = 13, h: int = 30,
                          w: int = 30, spatial_shift_max: int = 10, temporal_crop_min: int = 5,
                          seed: int = 0, sigma: float = 1.5) -> Dataset:
    """Gaussian blobs of unit mass moving along class-specific trajectories.

    Class ``c`` follows template ``TEMPLATES[c % 4]`` (mirrored for ``c >= 4``)
    inside the ``(h - shift) x (w - shift)`` box. Each sample is translated by
    a uniform integer shift in ``[0, spatial_shift_max]^2``, and its motion is
    played over a random window of ``L`` frames, ``temporal_crop_min <= L <= T``,
    at a random onset; the blob rests at the trajectory ends outside the window.
    """
    if classes < 0 or per_class < 0:
        raise ValueError("classes and per_class must be non-negative")
    if T < 1 or h < 1 or w < 1:
        raise ValueError("T, h and w must be positive")
    if not 0 <= spatial_shift_max < min(h, w) - 2:
        raise ValueError(f"spatial shift {spatial_shift_max} does not fit a {h}x{w} grid")
    if not 1 <= temporal_crop_min <= T:
        raise ValueError(f"temporal_crop_min must lie in [1, T={T}]")
    rng = np.random.default_rng(seed)
    box = min(h, w) - 1 - spatial_shift_max
    lo, hi = 1.0 + sigma, box - 1.0 - sigma
    if hi <= lo:
        raise ValueError("grid too small for the requested shift and blob width")
    samples = np.empty((classes * per_class, T, h, w))
    labels = np.repeat(np.arange(classes), per_class)
    shifts, windows = [], []
    for n, c in enumerate(labels):
        di, dj = rng.integers(0, spatial_shift_max + 1, size=2)
        L = int(rng.integers(temporal_crop_min, T + 1))
        onset = int(rng.integers(0, T - L + 1))
        s = np.clip((np.arange(T) - onset) / max(L - 1, 1), 0.0, 1.0)
        pi, pj = _template(TEMPLATES[c % len(TEMPLATES)], s, lo, hi)
        if c >= len(TEMPLATES):
            pi, pj = pj, pi
        for t in range(T):
            samples[n, t] = _blob(h, w, pi[t] + di, pj[t] + dj, sigma)
        shifts.append([int(di), int(dj)])
        windows.append([onset, L])
    prov = dict(seed=seed, classes=classes, per_class=per_class, T=T, grid=[h, w],
                spatial_shift_max=spatial_shift_max, temporal_crop_min=temporal_crop_min,
                sigma=sigma, shifts=shifts, windows=windows)
    return Dataset(samples, labels, prov)


# --------------------------------------------------------------------------
# distances on prefixes


def _flat_l2(a, b):
    return float(np.linalg.norm((a - b).ravel()))


def _framewise_l2(a, b):
    return float(np.linalg.norm((a - b).reshape(len(a), -1), axis=1).sum())


class PrefixDistances:
    """Distances between series prefixes, caching per-frame OT quantities.

    For the OT losses all frame-to-frame debiased divergences between the
    query prefixes and candidate prefixes are computed in one batch.
    """

    def __init__(self, series, geom: GroundGeometry | None = None,
                 config: ForecastConfig | None = None):
        self.series = np.asarray(series, dtype=float)
        self.geom, self.config = geom, config
        self._self = {}

    def _self_scalings(self, t0):
        if t0 not in self._self:
            frames = self.series[:, :t0].reshape(-1, self.series.shape[-1])
            self._self[t0] = symmetric_sinkhorn(frames, self.geom, self.config.params)[0]
        return self._self[t0]

    def frame_costs(self, q_index, t0, query=None):
        """``(N, t0, t0)`` debiased divergences between query and candidate prefix frames."""
        N, _, p = self.series.shape
        sc = self._self_scalings(t0).reshape(N, t0, p)
        if query is None:
            qf, qs = self.series[q_index, :t0], sc[q_index]
        else:
            qf = np.asarray(query, dtype=float)[:t0].reshape(t0, p)
            qs = symmetric_sinkhorn(qf, self.geom, self.config.params)[0]
        cand = self.series[:, :t0].reshape(N * t0, p)
        D = debiased_uot_matrix(qf, cand, self.geom, self.config.params, qs,
                                sc.reshape(N * t0, p), threads=self.config.threads)
        return D.reshape(t0, N, t0).transpose(1, 0, 2)

    def distances(self, loss, t0, q_index=None, query=None):
        q = self.series[q_index] if query is None else np.asarray(query, dtype=float)
        q = q.reshape(len(q), -1)[:t0]
        if loss == "flat_l2":
            return np.array([_flat_l2(q, s[:t0]) for s in self.series])
        if loss == "l2":
            return np.array([_framewise_l2(q, s[:t0]) for s in self.series])
        if self.geom is None or self.config is None:
            raise ValueError(f"loss {loss!r} needs a geometry and a solver config")
        D = self.frame_costs(q_index, t0, None if query is None else q)
        if loss == "uot":
            return np.einsum("ntt->n", D)
        return np.array([sdtw(d, self.config.beta) for d in D])


def rank_neighbors(dist, k, exclude=None):
    """Indices of the ``k`` smallest distances, ties broken by lower index."""
    dist = np.asarray(dist, dtype=float)
    idx = np.arange(len(dist))
    if exclude is not None:
        keep = np.ones(len(dist), dtype=bool)
        keep[np.atleast_1d(exclude)] = False
        idx = idx[keep]
    if k > len(idx):
        raise ValueError(f"k={k} exceeds the {len(idx)} available samples")
    order = np.lexsort((idx, dist[idx]))
    return idx[order[:k]]


def knn(task: ForecastTask, dataset: Dataset, geom: GroundGeometry | None = None,
        config: ForecastConfig | None = None, exclude=None, distances=None) -> np.ndarray:
    """Indices of the ``task.k`` nearest samples, comparing the first ``t0`` frames only.

    ``exclude`` removes indices (e.g. the query itself) from the candidates.
    A :class:`PrefixDistances` instance may be passed to reuse cached work.
    """
    N, T, h, w = dataset.shape
    if task.query.size != T * h * w:
        raise ValueError("query shape does not match the dataset")
    pd = distances if distances is not None else PrefixDistances(dataset.flat(), geom, config)
    d = pd.distances(task.loss, task.t0, query=task.query)
    return rank_neighbors(d, task.k, exclude)


def forecast(task: ForecastTask, dataset: Dataset, neighbors, geom: GroundGeometry | None = None,
             config: ForecastConfig | None = None) -> np.ndarray:
    """Barycenter of the neighbor series with the first ``t0`` frames clamped to the query.

    Returns a series shaped like ``task.query``.
    """
    shape = task.query.shape
    T = shape[0]
    q = task.query.reshape(T, -1)
    nb = dataset.flat()[np.asarray(neighbors)]
    t0 = task.t0
    if task.loss in ("l2", "flat_l2"):
        out = euclidean_mean(nb)
        out[:t0] = q[:t0]
        return out.reshape(shape)
    if geom is None or config is None:
        raise ValueError(f"loss {task.loss!r} needs a geometry and a solver config")
    if task.loss == "uot":
        out = np.empty_like(q)
        out[:t0] = q[:t0]
        out[t0:] = framewise_barycenter(nb[:, t0:], geom, config.inner_params)
        return out.reshape(shape)
    # free frames start from the neighbors' mean, the prefix is the query's
    x0 = euclidean_mean(nb)
    x0[:t0] = q[:t0]
    fixed = np.zeros(T, dtype=bool)
    fixed[:t0] = True
    res = sta_barycenter(list(nb), geom, config.params, config.beta, T_out=T, x0=x0,
                         fixed=fixed, max_outer=config.max_outer, rel_tol=config.rel_tol,
                         inner_params=config.inner_params)
    return res.barycenter.reshape(shape)


def score(prediction, truth, geom: GroundGeometry, params: UotParams | None = None):
    """Mean per-frame scores ``(l2, ot)`` of a predicted series.

    ``l2`` is the mean Euclidean distance between frames. ``ot`` is the mean
    debiased UOT divergence between frames normalized to unit mass, computed
    at small ``epsilon`` and large ``gamma`` as a proxy for the exact
    transport distance. Frames with zero mass are skipped with a warning.
    """
    P = np.asarray(prediction, dtype=float)
    Y = np.asarray(truth, dtype=float)
    if P.shape != Y.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Y.shape}")
    P = P.reshape(len(P), -1)
    Y = Y.reshape(len(Y), -1)
    l2 = float(np.linalg.norm(P - Y, axis=1).mean())
    if params is None:
        params = proxy_params(geom)
    mp, my = P.sum(axis=1), Y.sum(axis=1)
    ok = (mp > 0) & (my > 0)
    if not ok.all():
        warnings.warn(f"skipping {int((~ok).sum())} zero-mass frames in the OT score", RuntimeWarning)
    if not ok.any():
        return l2, float("nan")
    Pn, Yn = P[ok] / mp[ok, None], Y[ok] / my[ok, None]
    lc, _, _ = symmetric_sinkhorn(np.concatenate([Pn, Yn]), geom, params)
    n = len(Pn)
    vals = [debiased_uot_matrix(Pn[t:t + 1], Yn[t:t + 1], geom, params, lc[t:t + 1],
                                lc[n + t:n + t + 1])[0, 0] for t in range(n)]
    return l2, float(np.mean(vals))


def proxy_params(geom: GroundGeometry) -> UotParams:
    """Near-balanced small-``epsilon`` settings for the OT score."""
    return UotParams(epsilon=geom.epsilon, gamma=10.0, tol=1e-5, max_iter=5000)


def centroids(series, grid) -> np.ndarray:
    """Per-frame centers of mass ``(T, 2)`` on an ``h x w`` grid."""
    h, w = grid
    S = np.asarray(series, dtype=float).reshape(-1, h, w)
    m = S.sum(axis=(1, 2))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(S * ii).sum(axis=(1, 2)) / m, (S * jj).sum(axis=(1, 2)) / m], axis=1)


# --------------------------------------------------------------------------
# evaluation harness


@dataclass
class Evaluation:
    queries: np.ndarray
    neighbors: dict
    same_class: dict
    scores: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)


def evaluate(dataset: Dataset, queries, t0: int, losses=LOSSES, k: int = 5,
             geom: GroundGeometry | None = None, config: ForecastConfig | None = None,
             forecast_losses=None, threads: int = 1) -> Evaluation:
    """Leave-one-out retrieval and forecasting for the given query indices.

    For each query and loss, the query itself is excluded from the candidates.
    ``same_class[loss]`` holds the fraction of neighbors sharing the query
    label. Forecasts are computed for ``forecast_losses`` (default: all) and
    scored against the true series. Queries run on ``threads`` workers; each
    query's result does not depend on the worker count.
    """
    queries = np.asarray(queries, dtype=int)
    forecast_losses = losses if forecast_losses is None else forecast_losses
    pd = PrefixDistances(dataset.flat(), geom, config)
    if geom is not None and config is not None:
        pd._self_scalings(t0)
    labels = dataset.labels
    ev = Evaluation(queries, {l: [] for l in losses}, {l: [] for l in losses},
                    {l: [] for l in forecast_losses}, {l: [] for l in forecast_losses})

    def run(q):
        out = {}
        D = None
        for loss in losses:
            if loss in ("sta", "uot"):
                if D is None:
                    D = pd.frame_costs(q, t0)
                d = np.einsum("ntt->n", D) if loss == "uot" else \
                    np.array([sdtw(m, config.beta) for m in D])
            else:
                d = pd.distances(loss, t0, q_index=q)
            nb = rank_neighbors(d, k, exclude=q)
            pred = sc = None
            if loss in forecast_losses:
                task = ForecastTask(dataset.samples[q], t0, k, loss)
                pred = forecast(task, dataset, nb, geom, config)
                sc = score(pred[t0:], dataset.samples[q][t0:], geom) if geom is not None else None
            out[loss] = (nb, pred, sc)
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, queries))
    else:
        results = [run(q) for q in queries]
    for q, res in zip(queries, results):
        for loss in losses:
            nb, pred, sc = res[loss]
            ev.neighbors[loss].append(nb)
            ev.same_class[loss].append(float(np.mean(labels[nb] == labels[q])))
            if loss in forecast_losses:
                ev.predictions[loss].append(pred)
                ev.scores[loss].append(sc)
    return ev
