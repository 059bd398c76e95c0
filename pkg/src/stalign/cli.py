"""Command-line interface: ``stalign {gen,dist,bary,bound,forecast,bench}``.

Settings are resolved as command-line flags, then a JSON ``--config`` file,
then built-in defaults. Tabular output is CSV with a header row, written to
``--output`` or standard output. Exit codes: 0 success, 1 usage error,
2 numerical failure (non-convergence or non-finite output), 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager

import numpy as np

from .align import dirac_shift_gaps, sdtw, sdtw_batch
from .barycenter import (debiased_uot_barycenter, euclidean_mean, framewise_barycenter,
                         sta_barycenter, sta_cost_matrix)
from .delannoy import (InfeasibleHeuristicError, beta_heuristic, dirac_lower_bound,
                       dirac_lower_bound_limit)
from .forecast import (LOSSES, Dataset, ForecastConfig, PrefixDistances, evaluate,
                       generate_moving_blobs)
from .geometry import GroundGeometry, default_epsilon
from .io import StsdError, read_stsd, write_stsd
from .uot import ConvergenceError, UotParams, debiased_uot_matrix, symmetric_sinkhorn

logger = logging.getLogger("stalign")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

# shared settings; None means "not given" so that config files can fill them in
DEFAULTS = dict(epsilon=None, gamma=1.0, beta=None, kmax=20, eta=0.01, tol=1e-7,
                max_iter=5000, outer_max=50, seed=0, threads=1, grid="30x30", loss="sta")
BARY_METHODS = ("euclidean", "uot", "uot-debiased", "sta")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"grid dimensions must be positive, got {text!r}")
    return h, w


def parse_indices(text: str | None, n: int) -> list[int]:
    if text is None or text == "all":
        return list(range(n))
    out = []
    for part in text.split(","):
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        elif part:
            out.append(int(part))
    for i in out:
        if not 0 <= i < n:
            raise UsageError(f"index {i} outside [0, {n})")
    return out


def resolve(args) -> argparse.Namespace:
    """Merge flags over the JSON config over the defaults."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = vars(args).copy()
    for key, default in DEFAULTS.items():
        if out.get(key) is None:
            out[key] = cfg.get(key, default)
    if cfg.get("beta") is not None and cfg.get("kmax") is not None:
        raise UsageError("config sets both beta and kmax; they are mutually exclusive")
    if args.kmax is not None and args.beta is None:
        out["beta"] = None
    if out["beta"] is not None:
        out["kmax"] = None
    if out["beta"] is not None and out["beta"] <= 0:
        raise UsageError("beta must be positive")
    if out["threads"] < 1:
        raise UsageError("threads must be positive")
    return argparse.Namespace(**out)


def uot_params(cfg, geom: GroundGeometry) -> UotParams:
    eps = cfg.epsilon if cfg.epsilon is not None else geom.epsilon
    try:
        return UotParams(epsilon=eps, gamma=cfg.gamma, tol=cfg.tol, max_iter=cfg.max_iter)
    except ValueError as e:
        raise UsageError(str(e)) from None


def make_geometry(cfg, grid) -> GroundGeometry:
    h, w = grid
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(h * w)
    return GroundGeometry.from_grid(h, w, eps)


def resolve_beta(cfg, r: float, T: int) -> float:
    """``--beta`` if given, otherwise the heuristic for ``(--kmax, --eta)`` at scale ``r``."""
    if cfg.beta is not None:
        return float(cfg.beta)
    try:
        beta = beta_heuristic(int(cfg.kmax), float(cfg.eta), r, T)
    except (InfeasibleHeuristicError, ValueError) as e:
        raise UsageError(f"cannot resolve beta: {e}") from None
    logger.info("resolved beta = %.6g from k_max=%s, eta=%s, r=%.6g, T=%d",
                beta, cfg.kmax, cfg.eta, r, T)
    return beta


@contextmanager
def open_output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def write_csv(path, header, rows):
    with open_output(path) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def fmt(v):
    return f"{v:.12g}" if isinstance(v, (float, np.floating)) else v


def load_dataset(path):
    st = read_stsd(path)
    grid = st.grid
    if grid is None:
        side = int(round(np.sqrt(st.data.shape[2])))
        if side * side != st.data.shape[2]:
            raise UsageError(f"{path}: no grid in the trailer and p={st.data.shape[2]} is not square")
        grid = (side, side)
    labels = st.meta.get("labels", [0] * st.data.shape[0])
    return st, grid, np.asarray(labels, dtype=int)


def _require_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericalFailure(f"{what} contains non-finite values")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg):
    h, w = parse_grid(cfg.grid)
    try:
        ds = generate_moving_blobs(cfg.classes, cfg.per_class, cfg.T, h, w, cfg.shift_max,
                                   cfg.crop_min, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    meta = dict(labels=ds.labels.tolist(), grid=[h, w], provenance=ds.provenance)
    write_stsd(cfg.output, ds.samples, meta)
    logger.info("wrote %s with shape %s", cfg.output, ds.shape)
    return EXIT_OK


def cmd_dist(cfg):
    st, grid, _ = load_dataset(cfg.dataset)
    N = st.data.shape[0]
    for i in (cfg.i, cfg.j):
        if not 0 <= i < N:
            raise UsageError(f"index {i} outside [0, {N})")
    geom = make_geometry(cfg, grid)
    params = uot_params(cfg, geom)
    x, y = st.data[cfg.i], st.data[cfg.j]
    sx = symmetric_sinkhorn(x, geom, params)[0]
    sy = sx if cfg.i == cfg.j else symmetric_sinkhorn(y, geom, params)[0]
    D = sta_cost_matrix(x, y, geom, params, sx, sy)
    _require_finite(D, "frame cost matrix")
    # identical series have no positive cost to scale beta with
    r = float(D.max()) if D.max() > 1e-9 else 1.0
    beta = resolve_beta(cfg, r, max(len(x), len(y)))
    uot = float(np.trace(D)) if len(x) == len(y) else float("nan")
    l2 = float(np.linalg.norm(x - y))
    row = [cfg.i, cfg.j, fmt(sdtw(D, beta)), fmt(uot), fmt(l2), fmt(beta)]
    write_csv(cfg.output, ["i", "j", "sta", "uot", "l2", "beta"], [row])
    return EXIT_OK


def cmd_bary(cfg):
    st, grid, _ = load_dataset(cfg.dataset)
    idx = parse_indices(cfg.indices, st.data.shape[0])
    if not idx:
        raise UsageError("no input series selected")
    inputs = st.data[idx]
    geom = make_geometry(cfg, grid)
    params = uot_params(cfg, geom)
    converged, beta = True, None
    if cfg.method == "euclidean":
        out = euclidean_mean(inputs)
    elif cfg.method in ("uot", "uot-debiased"):
        out, converged = framewise_barycenter(inputs, geom, params,
                                              debiased=cfg.method == "uot-debiased",
                                              return_converged=True)
    else:
        x0 = euclidean_mean(inputs)
        sx = symmetric_sinkhorn(x0, geom, params)[0]
        r = max(float(sta_cost_matrix(s, x0, geom, params, None, sx).max()) for s in inputs)
        beta = resolve_beta(cfg, r if r > 0 else 1.0, inputs.shape[1])
        res = sta_barycenter(list(inputs), geom, params, beta, x0=x0, max_outer=cfg.outer_max,
                             inner_params=params.replace(max_iter=min(cfg.max_iter, cfg.inner_max_iter)))
        out, converged = res.barycenter, res.converged
        logger.info("sta barycenter: %d outer iterations, objective %.8g", res.n_outer,
                    res.objective[-1])
    _require_finite(out, "barycenter")
    meta = dict(grid=list(grid), method=cfg.method, indices=idx)
    if beta is not None:
        meta["beta"] = beta
    write_stsd(cfg.output, out[None], meta)
    norms = np.linalg.norm(out.reshape(len(out), -1), axis=1)
    write_csv(cfg.profile, ["t", "l2_norm"], [[t, fmt(v)] for t, v in enumerate(norms)])
    if not converged:
        raise NumericalFailure(f"{cfg.method} barycenter did not converge "
                               "(output written; raise --max-iter or --outer-max)")
    return EXIT_OK


def cmd_bound(cfg):
    T, t_star, c = cfg.T, cfg.t_star, cfg.height
    r = c * c
    if T < 6:
        raise UsageError("the Dirac bound needs T >= 6")
    kmax_hi = T - t_star if cfg.max_shift is None else cfg.max_shift
    if not 1 <= t_star <= T or not 0 <= kmax_hi <= T - t_star:
        raise UsageError(f"shifts 0..{kmax_hi} from t*={t_star} do not fit in T={T}")
    if cfg.betas:
        settings = [(None, float(b)) for b in cfg.betas.split(",")]
    else:
        kms = cfg.kmax_list.split(",") if cfg.kmax_list else [str(cfg.kmax)]
        try:
            settings = [(int(k), beta_heuristic(int(k), cfg.eta, r, T)) for k in kms]
        except (InfeasibleHeuristicError, ValueError) as e:
            raise UsageError(str(e)) from None
    ks = np.arange(kmax_hi + 1)
    rows = []
    for km, beta in settings:
        if beta <= 0:
            raise UsageError("beta must be positive")
        gap = dirac_shift_gaps(T, t_star, ks, beta, c)
        lb = dirac_lower_bound(ks, beta, r, T)
        _require_finite(gap, "gap")
        sat = np.zeros(len(ks), dtype=int)
        sat[np.argmax(gap >= gap.max() - cfg.eta * beta)] = 1
        lim = dirac_lower_bound_limit(beta, r, T)
        for k in ks:
            # the bound is stated for shifts k >= 1 only
            rows.append([fmt(beta), "" if km is None else km, int(k), fmt(gap[k]),
                         fmt(lb[k]) if k >= 1 else "", fmt(lim), sat[k]])
    write_csv(cfg.output, ["beta", "k_max", "k", "gap", "lower_bound", "bound_limit",
                           "saturated"], rows)
    return EXIT_OK


def cmd_forecast(cfg):
    st, grid, labels = load_dataset(cfg.dataset)
    N, T, p = st.data.shape
    if not 1 <= cfg.t0 < T:
        raise UsageError(f"t0 must lie in [1, {T})")
    if cfg.loss not in LOSSES:
        raise UsageError(f"loss must be one of {LOSSES}")
    if not 1 <= cfg.k < N:
        raise UsageError(f"k must lie in [1, {N - 1}] (the query itself is excluded)")
    queries = parse_indices(cfg.queries, N)
    ds = Dataset(st.data.reshape(N, T, *grid), labels)
    geom = make_geometry(cfg, grid)
    params = uot_params(cfg, geom)
    beta = 1.0
    if cfg.loss == "sta":
        r = float(PrefixDistances(ds.flat(), geom, ForecastConfig(params)).frame_costs(
            queries[0], cfg.t0).max())
        beta = resolve_beta(cfg, r if r > 0 else 1.0, T)
    fc = ForecastConfig(params, beta=beta, max_outer=cfg.outer_max, threads=cfg.threads,
                        inner_max_iter=min(cfg.max_iter, cfg.inner_max_iter))
    ev = evaluate(ds, queries, cfg.t0, losses=(cfg.loss,), k=cfg.k, geom=geom, config=fc,
                  threads=cfg.threads)
    preds = np.stack(ev.predictions[cfg.loss]).reshape(len(queries), T, p)
    _require_finite(preds, "forecast")
    write_stsd(cfg.output, preds, dict(grid=list(grid), queries=queries, t0=cfg.t0,
                                        loss=cfg.loss, beta=beta,
                                        labels=labels[queries].tolist()))
    rows = []
    per_class = {}
    for q, nb, same, (l2, ot) in zip(queries, ev.neighbors[cfg.loss], ev.same_class[cfg.loss],
                                      ev.scores[cfg.loss]):
        rows.append([q, int(labels[q]), cfg.loss, " ".join(map(str, nb)), fmt(same), fmt(l2),
                     fmt(ot)])
        per_class.setdefault(int(labels[q]), []).append((same, l2, ot))
    write_csv(cfg.scores, ["query", "label", "loss", "neighbors", "same_class", "l2", "ot"], rows)
    if cfg.summary:
        summ = [[c, cfg.loss, len(v)] + [fmt(float(np.mean(col))) for col in zip(*v)]
                for c, v in sorted(per_class.items())]
        write_csv(cfg.summary, ["label", "loss", "n", "same_class", "l2", "ot"], summ)
    return EXIT_OK


def cmd_bench(cfg):
    h, w = parse_grid(cfg.grid)
    geom = make_geometry(cfg, (h, w))
    params = uot_params(cfg, geom)
    rng = np.random.default_rng(cfg.seed)
    rows = []

    def timed(name, size, fn):
        best = np.inf
        for _ in range(cfg.repeat):
            t = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t)
        rows.append([name, size, cfg.threads, f"{best:.6f}"])

    T = cfg.T
    deltas = [rng.random((T, T)) for _ in range(32)]
    timed("sdtw_value_grad", f"32x{T}x{T}", lambda: sdtw_batch(deltas, 1.0, True, cfg.threads))
    X = rng.random((cfg.frames, geom.p)) + 0.1
    X /= X.sum(axis=1, keepdims=True)
    sc = symmetric_sinkhorn(X, geom, params)[0]
    timed("symmetric_sinkhorn", f"{cfg.frames}x{geom.p}",
          lambda: symmetric_sinkhorn(X, geom, params))
    timed("debiased_uot_matrix", f"{cfg.frames}x{cfg.frames}x{geom.p}",
          lambda: debiased_uot_matrix(X, X, geom, params, sc, sc, symmetric=True,
                                      threads=cfg.threads))
    timed("debiased_barycenter", f"{cfg.frames}x{geom.p}",
          lambda: debiased_uot_barycenter(X, geom, params, diagnostics=False))
    write_csv(cfg.output, ["task", "size", "threads", "seconds"], rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p, *, output_required=False, output_help="output path (default: stdout)"):
    g = p.add_argument_group("solver settings (flag > --config > default)")
    g.add_argument("--config", help="JSON file with default settings")
    g.add_argument("--epsilon", type=float, help="entropic regularization (default: 1/p)")
    g.add_argument("--gamma", type=float, help="marginal KL penalty (default: 1)")
    b = g.add_mutually_exclusive_group()
    b.add_argument("--beta", type=float, help="Soft-DTW smoothing")
    b.add_argument("--kmax", "--beta-from-kmax", dest="kmax", type=int,
                   help="choose beta so the Dirac shift bound saturates by this shift (default: 20)")
    g.add_argument("--eta", type=float, help="saturation slack of the beta heuristic (default: 0.01)")
    g.add_argument("--tol", type=float, help="solver tolerance (default: 1e-7)")
    g.add_argument("--max-iter", dest="max_iter", type=int, help="Sinkhorn sweeps (default: 5000)")
    g.add_argument("--outer-max", dest="outer_max", type=int,
                   help="outer barycenter iterations (default: 50)")
    g.add_argument("--seed", type=int, help="random seed (default: 0)")
    g.add_argument("--threads", type=int, help="worker threads (default: 1)")
    g.add_argument("--grid", help="grid size HxW (default: 30x30)")
    g.add_argument("--loss", help=f"one of {', '.join(LOSSES)} (default: sta)")
    g.add_argument("--output", "-o", required=output_required, help=output_help)
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stalign", description="Spatio-temporal alignment of measure series.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic moving-blob dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=25)
    p.add_argument("--T", type=int, default=13, help="frames per series")
    p.add_argument("--shift-max", dest="shift_max", type=int, default=10)
    p.add_argument("--crop-min", dest="crop_min", type=int, default=5)
    _common(p, output_required=True, output_help="STSD file to write")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dist", help="STA, frame-wise UOT and l2 distances between two series")
    p.add_argument("dataset")
    p.add_argument("i", type=int)
    p.add_argument("j", type=int)
    _common(p)
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("bary", help="barycenter of selected series")
    p.add_argument("dataset")
    p.add_argument("--indices", help="comma list or a:b ranges (default: all)")
    p.add_argument("--method", choices=BARY_METHODS, default="sta")
    p.add_argument("--inner-max-iter", dest="inner_max_iter", type=int, default=50,
                   help="per-frame sweeps per outer STA iteration (default: 50)")
    p.add_argument("--profile", help="CSV of per-frame l2 norms (default: stdout)")
    _common(p, output_required=True, output_help="STSD file for the barycenter")
    p.set_defaults(func=cmd_bary)

    p = sub.add_parser("bound", help="Dirac shift gaps against their lower bound")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--t-star", dest="t_star", type=int, default=30)
    p.add_argument("--max-shift", dest="max_shift", type=int,
                   help="largest shift k (default: T - t*)")
    p.add_argument("--height", type=float, default=1.0, help="Dirac value c (r = c^2)")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--betas", help="comma list of beta values")
    grp.add_argument("--kmax-list", dest="kmax_list",
                     help="comma list of k_max values for the beta heuristic")
    _common(p)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("forecast", help="leave-one-out nearest-neighbor forecasts")
    p.add_argument("dataset")
    p.add_argument("--t0", type=int, default=5, help="observed prefix length")
    p.add_argument("--k", type=int, default=5, help="neighbors per query")
    p.add_argument("--queries", help="comma list or a:b ranges (default: all)")
    p.add_argument("--inner-max-iter", dest="inner_max_iter", type=int, default=50)
    p.add_argument("--scores", help="per-query score CSV (default: stdout)")
    p.add_argument("--summary", help="per-class mean score CSV")
    _common(p, output_required=True, output_help="STSD file for the predictions")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("bench", help="time the main kernels")
    p.add_argument("--T", type=int, default=50, help="series length for Soft-DTW")
    p.add_argument("--frames", type=int, default=16, help="measures per OT batch")
    p.add_argument("--repeat", type=int, default=3)
    _common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command == "bound" and cfg.kmax is None and not cfg.betas and not cfg.kmax_list:
            cfg.betas = str(cfg.beta)
        return cfg.func(cfg)
    except UsageError as e:
        print(f"stalign: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, ConvergenceError, FloatingPointError) as e:
        print(f"stalign: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, StsdError) as e:
        print(f"stalign: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
