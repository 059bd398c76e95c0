"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary)
before asserting. Criterion 9 re-runs the computations of criteria 1 to 8
with other thread counts and compares the results bit for bit.
"""

import functools
import math
import time

import numpy as np
import pytest
from oracles import debiased_closed_form_1d, gaussian, spatial_variance, uot_primal

from stalign.align import (dirac_shift_gaps, enumerate_alignments, sdtw, sdtw_batch,
                           sdtw_bruteforce)
from stalign.barycenter import (debiased_uot_barycenter, euclidean_mean, framewise_barycenter,
                                sta_barycenter, sta_cost_matrix, uot_barycenter_biased)
from stalign.delannoy import (C, SIGMA, beta_heuristic, central_delannoy_logs,
                              dirac_lower_bound, dirac_lower_bound_limit, get_table)
from stalign.forecast import (ForecastConfig, PrefixDistances, _blob, evaluate,
                              generate_moving_blobs)
from stalign.geometry import GroundGeometry
from stalign.uot import UotParams, debiased_uot, debiased_uot_matrix, sinkhorn_uot

pytestmark = pytest.mark.acceptance

# regression constants frozen from the first verified runs
STA_PEAK_TO_MEAN_MIN = 3.9       # measured 4.011
FRAMEWISE_PEAK_TO_MEAN_MAX = 2.3  # measured 2.244
STA_PEAK_DOMINANCE_MIN = 2.4     # largest over second largest frame norm, measured 2.51
# mean same-class fraction among 5 neighbors, measured sta 0.5125, uot 0.495
FORECAST_SAME_CLASS = {"sta": 0.50, "uot": 0.48}
# mean over classes of the OT-proxy forecast score, measured sta 0.02199 (l2: 0.03497)
FORECAST_OT = {"sta": 0.0225}


def check(number, title, checks, detail, report):
    ok, failed = report(number, title, checks, detail)
    assert ok, f"criterion {number} failed checks: {failed}"


# ---------------------------------------------------------------- criterion 1

@functools.lru_cache(maxsize=None)
def soft_dtw_oracle(threads=1):
    rng = np.random.default_rng(1)
    beta = 0.5
    rel_err = grad_err = 0.0
    values = []
    start = time.perf_counter()
    for T1 in range(1, 7):
        for T2 in range(1, 7):
            A = enumerate_alignments(T1, T2)
            deltas = [rng.random((T1, T2)) * 3 for _ in range(100)]
            fast = sdtw_batch(deltas, beta, grad=True, threads=threads)
            for d, (v, E) in zip(deltas, fast):
                ref, E_ref = sdtw_bruteforce(d, beta, A)
                rel_err = max(rel_err, abs(v - ref) / max(abs(ref), 1e-300))
                grad_err = max(grad_err, np.abs(E - E_ref).max())
                values.append(v)
                values.extend(E.ravel())
    return dict(rel_err=rel_err, grad_err=grad_err, elapsed=time.perf_counter() - start,
                outputs=[np.array(values)])


def test_criterion_1_soft_dtw_matches_bruteforce(report):
    run = soft_dtw_oracle()
    rel_err, grad_err, elapsed = run["rel_err"], run["grad_err"], run["elapsed"]
    checks = {"value": rel_err <= 1e-10, "expected alignment": grad_err <= 1e-10,
              "runtime": elapsed < 30}
    check(1, "Soft-DTW vs enumeration", checks,
          f"max value rel err {rel_err:.2e}, max E err {grad_err:.2e}, {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 2

def central_difference(delta, beta, h=1e-5):
    g = np.zeros_like(delta)
    for idx in np.ndindex(delta.shape):
        e = np.zeros_like(delta)
        e[idx] = h
        g[idx] = (sdtw(delta + e, beta) - sdtw(delta - e, beta)) / (2 * h)
    return g


@functools.lru_cache(maxsize=None)
def soft_dtw_gradients(threads=1):
    rng = np.random.default_rng(2)
    err = 0.0
    grads = []
    start = time.perf_counter()
    for beta in (0.1, 1.0, 10.0):
        deltas = [rng.random((6, 6)) for _ in range(5)]
        for d, (_, E) in zip(deltas, sdtw_batch(deltas, beta, grad=True, threads=threads)):
            err = max(err, np.abs(E - central_difference(d, beta)).max())
            grads.append(E)
    return dict(err=err, elapsed=time.perf_counter() - start, outputs=grads)


def test_criterion_2_gradient_matches_finite_differences(report):
    run = soft_dtw_gradients()
    err, elapsed = run["err"], run["elapsed"]
    checks = {"gradient": err <= 1e-6, "runtime": elapsed < 10}
    check(2, "Soft-DTW gradient", checks,
          f"max |E - FD| {err:.2e} over 15 6x6 instances, {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 3

@functools.lru_cache(maxsize=None)
def delannoy_bounds(threads=1):
    start = time.perf_counter()
    logs = central_delannoy_logs(301)
    ratio = np.diff(logs)  # log D_{m+1,m+1} / D_{m,m} for m = 1..300
    m = np.arange(1, 301)
    right = ratio - np.log(C**2 * m / (m + 0.5))
    left = (ratio - np.log(C**2 * m / (m + SIGMA)))[4:]
    lc2 = 2 * math.log(C)
    sandwich_lo = sandwich_hi = -np.inf
    for T in range(2, 301):
        ms = np.arange(1, T)
        v = lc2 * (T - ms) + logs[ms - 1] - logs[T - 1]
        sandwich_lo = max(sandwich_lo, np.max(0.5 * np.log(T / (ms * math.e)) - v))
        upper = ms >= 5
        if upper.any():
            hi = v[upper] - SIGMA * np.log((T - 1) / (ms[upper] - 1))
            sandwich_hi = max(sandwich_hi, hi.max())
    table = get_table(30)
    exact_err = max(abs(table.log(a, b) - math.log(table.exact(a, b))) / max(1.0, table.log(a, b))
                    for a in range(1, 31) for b in range(1, 31))
    return dict(bounds=(right.max(), -left.min(), sandwich_lo, sandwich_hi), exact_err=exact_err,
                elapsed=time.perf_counter() - start, outputs=[logs, right, left])


def test_criterion_3_delannoy_bounds(report):
    run = delannoy_bounds()
    (right, left, lo, hi), exact_err, elapsed = run["bounds"], run["exact_err"], run["elapsed"]
    slack = 1e-9
    checks = {"growth right": right <= slack, "growth left": left <= slack,
              "sandwich lower": lo <= slack, "sandwich upper": hi <= slack,
              "exact table": exact_err <= 1e-12, "runtime": elapsed < 5}
    check(3, "Delannoy growth and sandwich bounds", checks,
          f"worst violations {right:.2e}, {left:.2e}, {lo:.2e}, {hi:.2e}; "
          f"exact table rel err {exact_err:.1e}; {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 4

@functools.lru_cache(maxsize=None)
def dirac_gaps(threads=1):
    T, t_star, eta, r = 100, 30, 0.01, 1.0
    ks = np.arange(1, 61)
    rows = []
    start = time.perf_counter()
    for k_max in (500, 100, 80):
        beta = beta_heuristic(k_max, eta, r, T)
        gap = dirac_shift_gaps(T, t_star, ks, beta)
        lb = dirac_lower_bound(ks, beta, r, T)
        rows.append((k_max, beta, gap, lb, dirac_lower_bound_limit(beta, r, T)))
    return dict(rows=rows, elapsed=time.perf_counter() - start,
                outputs=[np.concatenate([row[2], row[3]]) for row in rows])


def test_criterion_4_dirac_gap_dominates_lower_bound(report):
    run = dirac_gaps()
    rows, elapsed = run["rows"], run["elapsed"]
    eta = 0.01
    checks = {"runtime": elapsed < 60}
    parts = []
    for k_max, beta, gap, lb, limit in rows:
        margin = (gap - lb).min()
        checks[f"gap >= LB (k_max={k_max})"] = margin >= 0
        # saturation of the measured gap is only testable for k_max <= 60
        if k_max <= 60:
            tail = gap[k_max - 1:]
            checks[f"saturation (k_max={k_max})"] = gap.max() - tail.min() <= 2 * eta * beta
        parts.append(f"k_max={k_max} beta={beta:.3e} min(gap-LB)={margin:.2e} "
                     f"LB limit gap at k=60 {limit - lb[-1]:.2e}")
    detail = "; ".join(parts) + "; saturation clause vacuous (every k_max > 60)"
    check(4, "Dirac shift gaps", checks, detail + f"; {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 5

@functools.lru_cache(maxsize=None)
def uot_correctness(threads=1):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    primal_err = 0.0
    values = []
    for p in (2, 3):
        g = GroundGeometry.from_line(p, 0.5)
        params = UotParams(0.5, 1.0, tol=1e-12)
        for _ in range(5):
            x, y = rng.random(p) + 0.1, rng.random(p) + 0.1
            _, value = sinkhorn_uot(x, y, g, params)
            ref = uot_primal(x, y, g.C, 0.5, 1.0)
            primal_err = max(primal_err, abs(value - ref) / abs(ref))
            values.append(value)
    closed_err = 0.0
    grid = np.geomspace(0.1, 10.0, 5)
    for eps in (0.1, 0.5, 2.0):
        g = GroundGeometry(np.zeros((1, 1)), eps)
        for gamma in (0.1, 1.0, 10.0):
            params = UotParams(eps, gamma, tol=1e-13)
            for x in grid:
                for y in grid:
                    val, scale = debiased_closed_form_1d(x, y, eps, gamma)
                    got = debiased_uot([x], [y], g, params)
                    closed_err = max(closed_err, abs(got - val) / scale)
                    values.append(got)
    g = GroundGeometry.from_grid(6, 6)
    params = UotParams(g.epsilon)
    X = rng.random((10, 36)) + 0.05
    X[:, ::5] *= 4
    self_vals = np.diag(debiased_uot_matrix(X, X, g, params, threads=threads))
    self_err = np.abs(self_vals).max() / params.tol
    values.extend(self_vals)
    lowest = np.inf
    for n in range(10):
        p = int(rng.integers(2, 30))
        eps = float(rng.choice([0.02, 0.1, 0.5]))
        g = GroundGeometry.from_line(p, eps) if n % 2 else GroundGeometry.from_grid(4, p // 4 + 1, eps)
        X = rng.random((4, g.p)) * rng.uniform(0.2, 3.0)
        Y = rng.random((5, g.p))
        M = debiased_uot_matrix(X, Y, g, UotParams(eps), threads=threads)
        lowest = min(lowest, M.min())
        values.extend(M.ravel())
    return dict(errors=(primal_err, closed_err, self_err, lowest),
                elapsed=time.perf_counter() - start, outputs=[np.array(values)])


def test_criterion_5_uot_correctness(report):
    run = uot_correctness()
    (primal_err, closed_err, self_err, lowest), elapsed = run["errors"], run["elapsed"]
    checks = {"primal oracle": primal_err <= 1e-5, "1D closed form": closed_err <= 1e-8,
              "self divergence": self_err <= 2, "non-negative": lowest >= -1e-8,
              "runtime": elapsed < 60}
    check(5, "UOT correctness", checks,
          f"primal rel err {primal_err:.1e}, closed form rel err {closed_err:.1e}, "
          f"max |UOT(x,x)| = {self_err:.2f} tol, min over 200 PSD pairs {lowest:.2e}, "
          f"{elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 6

@functools.lru_cache(maxsize=None)
def debiased_barycenter_checks(threads=1):
    start = time.perf_counter()
    X = np.stack([gaussian(50, 15, 4), gaussian(50, 35, 4, 1.5)])
    rows = []
    out = []
    for eps in (0.1, 0.05, 0.02):
        g = GroundGeometry.from_line(50, eps)
        params = UotParams(eps, 1.0)
        deb = debiased_uot_barycenter(X, g, params)
        bia = uot_barycenter_biased(X, g, params)
        same = debiased_uot_barycenter(np.stack([X[0]] * 3), g, params.replace(tol=1e-10))
        rows.append((eps, deb.converged, deb.grad_norm, spatial_variance(deb.barycenter),
                     spatial_variance(bia.barycenter), np.abs(same.barycenter - X[0]).max()))
        out += [deb.barycenter, bia.barycenter, same.barycenter]
    return dict(rows=rows, elapsed=time.perf_counter() - start, outputs=out)


def test_criterion_6_debiased_barycenter(report):
    run = debiased_barycenter_checks()
    rows, elapsed = run["rows"], run["elapsed"]
    tol, gamma = 1e-7, 1.0
    checks = {"runtime": elapsed < 60}
    parts = []
    for eps, conv, grad, v_deb, v_bia, rec in rows:
        checks[f"converged eps={eps}"] = conv
        checks[f"stationary eps={eps}"] = grad <= 10 * tol * gamma
        checks[f"sharper eps={eps}"] = v_deb < v_bia
        checks[f"identical inputs eps={eps}"] = rec <= 1e-6
        parts.append(f"eps={eps}: |grad J| {grad:.1e}, var {v_deb:.1f} < {v_bia:.1f}, "
                     f"recovery {rec:.1e}")
    check(6, "debiased UOT barycenter", checks, "; ".join(parts) + f"; {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 7

def pulsing_blob(h, T, dt, di, dj):
    # a blob drifting across the grid whose mass peaks once in time
    frames = []
    for t in range(T):
        amp = 0.05 + math.exp(-(t - 3 - dt) ** 2 / (2 * 0.7**2))
        frames.append(amp * _blob(h, h, 4 + 0.6 * t + di, 5 + 0.5 * t + dj, 1.3).ravel())
    return np.array(frames)


def peak_to_mean(series):
    n = np.linalg.norm(series, axis=1)
    return n.max() / n.mean()


@functools.lru_cache(maxsize=None)
def sta_barycenter_profile(threads=1):
    h, T = 16, 10
    start = time.perf_counter()
    g = GroundGeometry.from_grid(h, h)
    params = UotParams(g.epsilon)
    S = [pulsing_blob(h, T, *s) for s in ((0, 0, 0), (1, 2, 1), (2, 1, 3), (3, 3, 2))]
    r = max(sta_cost_matrix(S[0], s, g, params).max() for s in S[1:])
    beta = beta_heuristic(20, 0.01, r, T)
    framewise = framewise_barycenter(S, g, params)
    res = sta_barycenter(S, g, params, beta, x0=euclidean_mean(S), max_outer=30,
                         inner_params=params.replace(max_iter=50))
    return dict(res=res, framewise=framewise, beta=beta, tol=params.tol,
                elapsed=time.perf_counter() - start,
                outputs=[res.barycenter, np.array(res.objective), framewise])


def test_criterion_7_sta_barycenter_profile(report):
    run = sta_barycenter_profile()
    res, framewise, beta = run["res"], run["framewise"], run["beta"]
    tol, elapsed = run["tol"], run["elapsed"]
    norms = np.sort(np.linalg.norm(res.barycenter, axis=1))
    sta_ratio, fw_ratio = peak_to_mean(res.barycenter), peak_to_mean(framewise)
    dominance = norms[-1] / norms[-2]
    rise = np.diff(res.objective).max()
    checks = {"sta sharper than framewise": sta_ratio > fw_ratio,
              "sta peak-to-mean": sta_ratio >= STA_PEAK_TO_MEAN_MIN,
              "framewise peak-to-mean": fw_ratio <= FRAMEWISE_PEAK_TO_MEAN_MAX,
              "single dominant peak": dominance >= STA_PEAK_DOMINANCE_MIN,
              "objective non-increasing": rise <= 1e-8 + tol,
              "runtime": elapsed < 300}
    check(7, "STA barycenter of shifted copies", checks,
          f"beta {beta:.3e}, peak-to-mean sta {sta_ratio:.3f} vs framewise {fw_ratio:.3f}, "
          f"peak dominance {dominance:.2f}, largest objective change {rise:.1e} over "
          f"{res.n_outer} outer iterations, {elapsed:.1f} s", report)


# ---------------------------------------------------------------- criterion 8

FORECAST_QUERIES = (0, 1, 20, 21, 40, 41, 60, 61)


def forecast_setup():
    ds = generate_moving_blobs()
    g = GroundGeometry.from_grid(30, 30)
    params = UotParams(g.epsilon)
    t0 = 5
    costs = PrefixDistances(ds.flat(), g, ForecastConfig(params)).frame_costs(0, t0)
    beta = beta_heuristic(20, 0.01, costs.max(), ds.shape[1])
    return ds, g, ForecastConfig(params, beta=beta), t0


@functools.lru_cache(maxsize=None)
def forecasting_run(threads=1):
    start = time.perf_counter()
    ds, g, cfg, t0 = forecast_setup()
    retrieval = evaluate(ds, range(len(ds)), t0, losses=("sta", "uot", "l2", "flat_l2"), k=5,
                         geom=g, config=cfg, forecast_losses=(), threads=threads)
    forecasts = evaluate(ds, FORECAST_QUERIES, t0, losses=("sta", "l2"), k=5, geom=g,
                         config=cfg, threads=threads)
    return ds, cfg, retrieval, forecasts, time.perf_counter() - start


def class_means(ds, ev, loss):
    labels = ds.labels[ev.queries]
    ot = np.array([s[1] for s in ev.scores[loss]])
    return np.array([ot[labels == c].mean() for c in np.unique(labels)])


@pytest.mark.slow
def test_criterion_8_forecasting(report):
    ds, cfg, retrieval, forecasts, elapsed = forecasting_run()
    same = {l: float(np.mean(v)) for l, v in retrieval.same_class.items()}
    ot_sta, ot_l2 = class_means(ds, forecasts, "sta"), class_means(ds, forecasts, "l2")
    checks = {"sta retrieval beats flat l2": same["sta"] > same["flat_l2"],
              "retrieval order sta >= uot >= flat l2":
                  same["sta"] >= same["uot"] >= same["flat_l2"],
              "sta forecast beats l2 on every class": bool(np.all(ot_sta < ot_l2)),
              "runtime": elapsed < 900}
    for loss, floor in FORECAST_SAME_CLASS.items():
        checks[f"{loss} same-class regression"] = same[loss] >= floor
    for loss, ceiling in FORECAST_OT.items():
        value = class_means(ds, forecasts, loss).mean()
        checks[f"{loss} OT score regression"] = value <= ceiling
    check(8, "forecasting on the shifted dataset", checks,
          f"beta {cfg.beta:.3e}; same-class fraction "
          + ", ".join(f"{l} {v:.3f}" for l, v in same.items())
          + f"; class OT scores sta {np.round(ot_sta, 4).tolist()} vs l2 "
          f"{np.round(ot_l2, 4).tolist()}; {elapsed:.0f} s", report)


# ---------------------------------------------------------------- criterion 9

def rerun_matches(fn, threads):
    """Recompute ``fn`` with ``threads`` workers and compare to the cached 1-thread run."""
    first = fn(1)["outputs"]
    again = fn.__wrapped__(threads)["outputs"]
    return len(first) == len(again) and all(
        a.shape == b.shape and np.array_equal(a, b) for a, b in zip(first, again))


@pytest.mark.slow
def test_criterion_9_determinism(report):
    checks = {}
    for number, fn in ((1, soft_dtw_oracle), (2, soft_dtw_gradients), (3, delannoy_bounds),
                       (4, dirac_gaps), (5, uot_correctness), (6, debiased_barycenter_checks),
                       (7, sta_barycenter_profile)):
        checks[f"criterion {number}"] = rerun_matches(fn, threads=3)
    # forecasting: rerun two queries on two workers against the full single-thread run
    ds, cfg, retrieval, forecasts, _ = forecasting_run()
    ds2, g, cfg2, t0 = forecast_setup()
    sub = FORECAST_QUERIES[::4]
    ev = evaluate(ds2, sub, t0, losses=("sta", "l2"), k=5, geom=g, config=cfg2, threads=2)
    same = np.array_equal(ds.samples, ds2.samples) and cfg.beta == cfg2.beta
    for loss in ("sta", "l2"):
        for j, q in enumerate(sub):
            i = FORECAST_QUERIES.index(q)
            same &= np.array_equal(ev.neighbors[loss][j], forecasts.neighbors[loss][i])
            same &= np.array_equal(ev.predictions[loss][j], forecasts.predictions[loss][i])
            same &= ev.scores[loss][j] == forecasts.scores[loss][i]
            same &= np.array_equal(ev.neighbors[loss][j], retrieval.neighbors[loss][q])
    checks["criterion 8"] = bool(same)
    check(9, "determinism across threads and reruns", checks,
          "bitwise comparison of reruns with 3 threads (criteria 1-7) and a 2-thread "
          "forecast rerun (criterion 8)", report)
