"""Batch command-line interface.

Subcommands: simulate, fit, tune, predict, eval, replicate.  File formats:

* dataset: CSV with header ``group_id,y,x_1..x_{P1P2},z_1..z_{Q1Q2}`` (the
  x/z cells are the column-stacked matrix covariates) plus a JSON sidecar at
  ``<dataset>.json`` holding the dims ``{"p1","p2","q1","q2"}``;
* model: JSON with dims, row-major B/L1/L2, tau2, selected ranks, EBIC and
  fit metadata, under an explicit ``format_version``;
* traces/grids/predictions/replication tables: plain CSV.

All writes go to a temporary file first and are renamed into place, so no
partial outputs are left behind.  Outputs are byte-deterministic for fixed
flags and seed (worker count and repeat runs do not change content).

Exit codes: 0 ok, 2 bad flags, 3 I/O failure, 4 non-convergence under
--strict, 5 unknown group in conditional prediction.
"""

import argparse
import csv
import json
import logging
import os
import sys
import tempfile

import numpy as np

from . import aecm, sim
from .model import ModelParams, TraceDataset, UnknownGroup, dataset_from_stacked, predict
from .sim import EquicorrScenario, MmtrScenario

log = logging.getLogger("mmtr")

FORMAT_VERSION = 1


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write_text(path, text):
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".mmtr-tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    log.info("wrote %s", path)


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- datasets


def write_dataset(d, path):
    p1, p2, q1, q2 = d.dims
    header = (
        ["group_id", "y"]
        + ["x_%d" % (k + 1) for k in range(p1 * p2)]
        + ["z_%d" % (k + 1) for k in range(q1 * q2)]
    )
    lines = [",".join(header)]
    for g in d.groups:
        for j in range(g.y.size):
            cells = [g.group_id, repr(float(g.y[j]))]
            cells += [repr(float(v)) for v in g.x_rows[j]]
            cells += [repr(float(v)) for v in g.z_rows_1[j]]
            lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    _atomic_write_text(path + ".json", _json_text({"p1": p1, "p2": p2, "q1": q1, "q2": q2}))


def read_dataset(path):
    sidecar = path + ".json"
    with open(sidecar) as fh:
        meta = json.load(fh)
    try:
        dims = (int(meta["p1"]), int(meta["p2"]), int(meta["q1"]), int(meta["q2"]))
    except KeyError as exc:
        raise CliError("sidecar %s missing dim %s" % (sidecar, exc), 3)
    p, q = dims[0] * dims[1], dims[2] * dims[3]
    expect = (
        ["group_id", "y"]
        + ["x_%d" % (k + 1) for k in range(p)]
        + ["z_%d" % (k + 1) for k in range(q)]
    )
    gids, ys, xs, zs = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expect:
            raise CliError("dataset %s header does not match sidecar dims" % path, 3)
        for row in reader:
            if len(row) != len(expect):
                raise CliError("dataset %s has a short row" % path, 3)
            gids.append(row[0])
            ys.append(float(row[1]))
            xs.append([float(v) for v in row[2 : 2 + p]])
            zs.append([float(v) for v in row[2 + p :]])
    if not gids:
        raise CliError("dataset %s has no rows" % path, 3)
    return dataset_from_stacked(gids, ys, xs, zs, dims)


# ------------------------------------------------------------------ models


def _factor_to_lists(l):
    return [[float(v) for v in row] for row in l]


def _factor_from_lists(rows, q):
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        return np.zeros((q, 0))
    return arr.reshape(q, -1)


def model_to_obj(p, dims, fit_meta=None, ebic=None, extra=None):
    p1, p2, q1, q2 = dims
    obj = {
        "format_version": FORMAT_VERSION,
        "dims": {"p1": p1, "p2": p2, "q1": q1, "q2": q2},
        "b": _factor_to_lists(p.b_mat),
        "l1": _factor_to_lists(p.l1),
        "l2": _factor_to_lists(p.l2),
        "tau2": float(p.tau2),
        "selected_ranks": list(p.ranks),
        "ebic": None if ebic is None else float(ebic),
        "fit": fit_meta,
    }
    if extra:
        obj.update(extra)
    return obj


def read_model(path):
    with open(path) as fh:
        obj = json.load(fh)
    if "format_version" not in obj:
        raise CliError("model %s lacks format_version" % path, 3)
    dims = obj["dims"]
    dims = (int(dims["p1"]), int(dims["p2"]), int(dims["q1"]), int(dims["q2"]))
    b = np.asarray(obj["b"], dtype=float).reshape(dims[0], dims[1])
    l1 = _factor_from_lists(obj["l1"], dims[2])
    l2 = _factor_from_lists(obj["l2"], dims[3])
    params = ModelParams(b_mat=b, l1=l1, l2=l2, tau2=float(obj["tau2"]))
    return params, dims, obj


# ----------------------------------------------------------------- helpers


def _parse_grid(text, name):
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError("%s must look like lo:hi:k" % name, 2)
    try:
        lo, hi, k = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise CliError("%s must look like lo:hi:k" % name, 2)
    if lo <= 0 or hi < lo or k < 1:
        raise CliError("%s needs 0 < lo <= hi and k >= 1" % name, 2)
    return list(np.geomspace(lo, hi, k))


def _fit_config(args):
    return aecm.FitConfig(
        lambda_b=getattr(args, "lambda_b", 0.0),
        lambda_l=getattr(args, "lambda_l", 0.0),
        init_rank_factor=args.rank_factor,
        max_iter=args.max_iter,
        tol=args.tol,
        seed=args.seed,
        rank_prune=not getattr(args, "no_rank_prune", False),
        normalize_each_iter=getattr(args, "normalize_each_iter", False),
    )


def _fit_meta(cfg, report):
    return {
        "iterations": report.iterations,
        "converged": bool(report.converged),
        "seed": cfg.seed,
        "lambda_b": float(cfg.lambda_b),
        "lambda_l": float(cfg.lambda_l),
        "max_iter": cfg.max_iter,
        "tol": float(cfg.tol),
    }


def _trace_csv(report):
    lines = ["iteration,cycle,objective,loglik,rank1,rank2"]
    for it, cycle, obj, ll, r1, r2 in report.trace_rows:
        lines.append(",".join([str(it), str(cycle), repr(float(obj)), repr(float(ll)), str(r1), str(r2)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    if args.case == "mmtr":
        for name in ("q1", "q2", "s1", "s2"):
            if getattr(args, name) is None:
                raise CliError("--%s is required for --case mmtr" % name, 2)
        scen = MmtrScenario(
            dims=(args.p1, args.p2, args.q1, args.q2, args.s1, args.s2),
            n=args.n, m=args.m, tau2=args.tau2,
            sparsity_frac=args.sparsity, seed=args.seed,
        )
        d, truth = sim.gen_mmtr(scen)
        truth_obj = model_to_obj(truth.params, d.dims)
    else:
        scen = EquicorrScenario(
            dims=(args.p1, args.p2), n=args.n, m=args.m,
            alpha_range=(args.alpha_lo, args.alpha_hi), seed=args.seed,
        )
        d, truth = sim.gen_equicorr(scen)
        degenerate = ModelParams(
            b_mat=truth.b_mat,
            l1=np.zeros((args.p1, 0)),
            l2=np.zeros((args.p2, 0)),
            tau2=truth.tau2,
        )
        truth_obj = model_to_obj(
            degenerate, d.dims,
            extra={
                "alpha": float(truth.alpha),
                "lambda_block": _factor_to_lists(truth.lambda_block),
            },
        )
    base = args.out
    write_dataset(d, base + ".csv")
    _atomic_write_text(base + ".truth.json", _json_text(truth_obj))
    zeros = int(np.count_nonzero(truth.b_mat == 0.0))
    print(
        "simulated case=%s N=%d groups=%d dims=%s zero_b_entries=%d"
        % (args.case, d.n_obs, d.n_groups, "x".join(str(v) for v in d.dims), zeros)
    )
    return 0


def cmd_fit(args):
    d = read_dataset(args.data)
    cfg = _fit_config(args)
    init = None
    if args.init:
        init_params, idims, _ = read_model(args.init)
        if idims != d.dims:
            raise CliError("--init model dims do not match the dataset", 2)
        init = init_params
    report = aecm.fit(d, cfg, init=init)
    obj = model_to_obj(report.params, d.dims, fit_meta=_fit_meta(cfg, report), ebic=report.ebic)
    _atomic_write_text(args.out + ".model.json", _json_text(obj))
    _atomic_write_text(args.out + ".trace.csv", _trace_csv(report))
    print(
        "fit iterations=%d converged=%s ranks=%d,%d ebic=%s"
        % (report.iterations, report.converged, report.selected_ranks[0], report.selected_ranks[1], repr(report.ebic))
    )
    if args.strict and not report.converged:
        raise CliError("fit did not converge within --max-iter", 4)
    return 0


def cmd_tune(args):
    d = read_dataset(args.data)
    cfg = _fit_config(args)
    grid = aecm.TuneGrid(
        lambda_b_grid=_parse_grid(args.grid_b, "--grid-b"),
        lambda_l_grid=_parse_grid(args.grid_l, "--grid-l"),
        selection="kfold_cv" if args.select == "cv" else "ebic",
        cv_k=args.folds,
        fold_seed=args.fold_seed,
    )
    best, table = aecm.tune(d, grid, cfg, jobs=args.jobs)
    lines = ["lambda_b,lambda_l,ebic,loglik,df,rank1,rank2,status"]
    for row in table:
        lines.append(
            ",".join(
                [
                    repr(float(row["lambda_b"])), repr(float(row["lambda_l"])),
                    repr(float(row["ebic"])), repr(float(row["loglik"])),
                    str(row["df"]), str(row["rank1"]), str(row["rank2"]), row["status"],
                ]
            )
        )
    meta = _fit_meta(cfg, best)
    meta["lambda_b"], meta["lambda_l"] = _best_lambda(table)
    obj = model_to_obj(best.params, d.dims, fit_meta=meta, ebic=best.ebic)
    _atomic_write_text(args.out + ".model.json", _json_text(obj))
    _atomic_write_text(args.out + ".grid.csv", "\n".join(lines) + "\n")
    print(
        "tuned cells=%d best_lambda_b=%s best_lambda_l=%s ranks=%d,%d"
        % (len(table), repr(meta["lambda_b"]), repr(meta["lambda_l"]), best.selected_ranks[0], best.selected_ranks[1])
    )
    return 0


def _best_lambda(table):
    ok = [r for r in table if r["status"] == "ok"]
    score = min(row["score"] for row in ok)
    for row in reversed(ok):
        if row["score"] == score:
            return float(row["lambda_b"]), float(row["lambda_l"])
    return float("nan"), float("nan")


def cmd_predict(args):
    params, mdims, _ = read_model(args.model)
    d = read_dataset(args.data)
    if mdims != d.dims:
        raise CliError("model dims do not match the dataset", 2)
    train = read_dataset(args.train) if args.train else None
    preds = predict(d, params, args.mode, train=train)
    lines = ["group_id,obs_index,y,y_hat"]
    for g, yhat in zip(d.groups, preds):
        for j in range(g.y.size):
            lines.append(",".join([g.group_id, str(j), repr(float(g.y[j])), repr(float(yhat[j]))]))
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    print("predicted rows=%d mode=%s" % (d.n_obs, args.mode))
    return 0


def cmd_eval(args):
    params, mdims, _ = read_model(args.model)
    d = read_dataset(args.data)
    if mdims != d.dims:
        raise CliError("model dims do not match the dataset", 2)
    train = read_dataset(args.train) if args.train else None
    preds = predict(d, params, args.mode, train=train)
    y_true = [g.y for g in d.groups]
    metrics = {"mspe": float(sim.mspe(y_true, preds)), "r2": float(sim.r2(y_true, preds))}
    if args.truth:
        tparams, tdims, tobj = read_model(args.truth)
        if (tdims[0], tdims[1]) != (d.dims[0], d.dims[1]):
            raise CliError("truth model dims do not match the dataset", 2)
        metrics["err_B"] = float(sim.rel_err(params.b_mat, tparams.b_mat))
        if tparams.l1.shape[1] > 0 and tparams.l2.shape[1] > 0 and tdims == d.dims:
            e1, e2 = sim.cov_err(params, tparams)
            metrics["err_Sigma1"], metrics["err_Sigma2"] = float(e1), float(e2)
    text = _json_text(metrics)
    _atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_replicate(args):
    with open(args.scenario_file) as fh:
        spec = json.load(fh)
    case = spec.get("case")
    if case == "mmtr":
        scen = MmtrScenario(
            dims=(
                int(spec["p1"]), int(spec["p2"]), int(spec["q1"]),
                int(spec["q2"]), int(spec["s1"]), int(spec["s2"]),
            ),
            n=int(spec["n"]), m=int(spec["m"]),
            tau2=float(spec.get("tau2", 0.5)),
            sparsity_frac=float(spec.get("sparsity_frac", 0.4)),
            seed=args.seed,
        )
    elif case == "equicorr":
        scen = EquicorrScenario(
            dims=(int(spec["p1"]), int(spec["p2"])),
            n=int(spec["n"]), m=int(spec["m"]),
            alpha_range=(float(spec.get("alpha_lo", 0.2)), float(spec.get("alpha_hi", 0.8))),
            seed=args.seed,
        )
    else:
        raise CliError("scenario file must set case to 'mmtr' or 'equicorr'", 2)
    grid = aecm.TuneGrid(
        lambda_b_grid=_parse_grid(args.grid_b, "--grid-b"),
        lambda_l_grid=_parse_grid(args.grid_l, "--grid-l"),
        selection="kfold_cv" if args.select == "cv" else "ebic",
        cv_k=args.folds,
        fold_seed=args.fold_seed,
    )
    cfg = _fit_config(args)
    table = sim.run_replications(
        scen, grid, args.reps, args.seed, cfg=cfg, jobs=args.jobs, collect_timings=args.timings
    )
    _atomic_write_text(args.out, table.to_csv_text())
    means = table.summary()
    ok = sum(1 for r in table.rows if r["status"] == "ok")
    print(
        "replications=%d ok=%d mean_err_B=%s mean_err_Lambda=%s"
        % (args.reps, ok, repr(means["err_B"][0]), repr(means["err_Lambda"][0]))
    )
    return 0


# ------------------------------------------------------------------ parser


def _add_fit_opts(sp, with_lambdas):
    if with_lambdas:
        sp.add_argument("--lambda-b", type=float, required=True, dest="lambda_b")
        sp.add_argument("--lambda-l", type=float, required=True, dest="lambda_l")
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rank-factor", type=float, default=1.0)
    sp.add_argument("--no-rank-prune", action="store_true")
    sp.add_argument("--normalize-each-iter", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="mmtr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a seeded dataset plus its truth")
    sp.add_argument("--case", choices=["mmtr", "equicorr"], required=True)
    sp.add_argument("--p1", type=int, required=True)
    sp.add_argument("--p2", type=int, required=True)
    sp.add_argument("--q1", type=int)
    sp.add_argument("--q2", type=int)
    sp.add_argument("--s1", type=int)
    sp.add_argument("--s2", type=int)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--tau2", type=float, default=0.5)
    sp.add_argument("--sparsity", type=float, default=0.4)
    sp.add_argument("--alpha-lo", type=float, default=0.2)
    sp.add_argument("--alpha-hi", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit one (lambda_b, lambda_l) configuration")
    sp.add_argument("--data", required=True)
    _add_fit_opts(sp, with_lambdas=True)
    sp.add_argument("--init", help="model file to warm-start from")
    sp.add_argument("--strict", action="store_true")
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("tune", help="grid search with EBIC or k-fold CV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--grid-b", default="1e-4:0.04:10")
    sp.add_argument("--grid-l", default="1e-4:1:10")
    sp.add_argument("--select", choices=["ebic", "cv"], default="ebic")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--fold-seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=1)
    _add_fit_opts(sp, with_lambdas=False)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_tune, lambda_b=0.0, lambda_l=0.0)

    sp = sub.add_parser("predict", help="write per-observation predictions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["marginal", "conditional"], default="marginal")
    sp.add_argument("--train", help="dataset supplying conditional moments")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="score a model on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["marginal", "conditional"], default="marginal")
    sp.add_argument("--train", help="dataset supplying conditional moments")
    sp.add_argument("--truth", help="truth model file for estimation errors")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("replicate", help="run seeded tune+fit replications")
    sp.add_argument("--scenario-file", required=True)
    sp.add_argument("--reps", type=int, required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--timings", action="store_true")
    sp.add_argument("--grid-b", default="1e-4:0.04:10")
    sp.add_argument("--grid-l", default="1e-4:1:10")
    sp.add_argument("--select", choices=["ebic", "cv"], default="ebic")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--fold-seed", type=int, default=0)
    _add_fit_opts(sp, with_lambdas=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_replicate, lambda_b=0.0, lambda_l=0.0)

    return ap


def main(argv=None):
    level = os.environ.get("MMTR_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
            level, logging.ERROR
        ),
        format="%(levelname)s %(name)s: %(message)s",
    )
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except UnknownGroup as exc:
        print("error: unknown group %s in conditional prediction" % exc, file=sys.stderr)
        return 5
    except (OSError, json.JSONDecodeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
