"""Command-line experiment runner.

Verbs: generate, fit, predict, benchmark. Every run is driven by a
JSON config (schema-validated, unknown keys rejected); --seed overrides
the config seed. Outputs are a metrics CSV, a summary JSON embedding the
effective config, and a binary belief artifact. Metric evaluation is kept
out of the reported solver wall-clock. NCGP_THREADS caps benchmark
parallelism.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 stalled convergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import os
import statistics
import sys
import tempfile

import jsonschema
import numpy as np

from . import config as cfgmod
from .artifact import load_belief, save_belief
from .datagen import generate
from .exceptions import ArtifactError, ConfigError, NcgpError
from .gp import write_dataset_csv, write_sidecar_json
from .likelihoods import make_likelihood
from .outer import OUTER_STALLED, fit, sod_fit
from .posterior import (PosteriorBelief, mc_predict, metric_accuracy,
                        metric_ece, metric_nll, poisson_predictive_density,
                        posterior_marginal_var, posterior_mean, probit_predict)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_STALLED = 4

METRICS_HEADER = ["wallclock_s", "step", "inner_iter", "cum_matvecs",
                  "train_nll", "test_nll", "train_acc", "test_acc",
                  "train_ece", "test_ece"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[_fmt(x) for x in row] for row in rows])
    _atomic_write(path, buf.getvalue())


def _write_json(path, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


class _MetricEvaluator:
    """Computes MetricsRow entries for the current belief."""

    def __init__(self, cfg, train, test, likelihood):
        self.family = cfg["likelihood"]["family"]
        self.train = train
        self.test = test
        self.likelihood = likelihood
        metrics_cfg = cfg.get("metrics", {})
        self.mc_samples = metrics_cfg.get("mc_samples", 1000)
        self.seed = cfg["seed"]
        self.noise = cfg["likelihood"].get("noise_variance", 1.0)

    def columns(self, belief) -> dict:
        out = {}
        for tag, ds in (("train", self.train), ("test", self.test)):
            if ds is None:
                out.update({f"{tag}_nll": "", f"{tag}_acc": "", f"{tag}_ece": ""})
                continue
            mean = posterior_mean(belief, ds.inputs)
            var = posterior_marginal_var(belief, ds.inputs)
            if self.family in ("softmax", "bernoulli_logistic"):
                probs = probit_predict(mean, var)
                out[f"{tag}_nll"] = metric_nll(probs, ds.targets)
                out[f"{tag}_acc"] = metric_accuracy(probs, ds.targets)
                out[f"{tag}_ece"] = metric_ece(probs, ds.targets)
            elif self.family == "poisson":
                dens = poisson_predictive_density(
                    mean, var, ds.targets, self.mc_samples, self.seed)
                out[f"{tag}_nll"] = metric_nll(dens)
                out[f"{tag}_acc"] = ""
                out[f"{tag}_ece"] = ""
            else:  # gaussian
                total_var = var[:, 0] + self.noise
                y = np.asarray(ds.targets, dtype=np.float64)
                nll = 0.5 * np.mean((y - mean[:, 0]) ** 2 / total_var
                                    + np.log(2.0 * np.pi * total_var))
                out[f"{tag}_nll"] = float(nll)
                out[f"{tag}_acc"] = ""
                out[f"{tag}_ece"] = ""
        return out


def _metrics_row(wallclock, step, inner_iter, cum_matvecs, cols) -> list:
    return [wallclock, step, inner_iter, cum_matvecs,
            cols["train_nll"], cols["test_nll"], cols["train_acc"],
            cols["test_acc"], cols["train_ece"], cols["test_ece"]]


def run_fit_config(cfg, train, test, clock_mode="wall"):
    """Run one fit described by a validated config on resolved datasets.

    Returns (rows, summary, belief, trace).
    """
    C = cfgmod.latent_outputs_for(cfg, train)
    prior = cfgmod.build_prior(cfg.get("prior", {}), C)
    likelihood = cfgmod.build_likelihood(cfg, train)
    outer_cfg = cfgmod.build_outer_config(cfg)
    inner_cfg = cfgmod.build_inner_config(cfg)
    policy = cfg.get("policy", "residual")
    tile = cfg.get("tile", 256)
    metrics_cfg = cfg.get("metrics", {})
    cadence = metrics_cfg.get("cadence", "step")
    every = metrics_cfg.get("every", 1)
    evaluator = _MetricEvaluator(cfg, train, test, likelihood)
    use_wall = clock_mode == "wall"
    rows = []

    if cfg["method"] == "iterncgp":
        on_step = on_inner = None
        if cadence == "step":
            def on_step(i, belief, trace):
                rec = trace.steps[-1]
                rows.append(_metrics_row(
                    rec.wallclock_s if use_wall else 0.0, i,
                    rec.inner_iterations, rec.cum_kernel_matvecs,
                    evaluator.columns(belief)))
        elif cadence == "iter":
            def on_inner(i, j, weights, root, cum, secs):
                if j % every:
                    return
                belief = PosteriorBelief(prior=prior, train_inputs=train.inputs,
                                         weights=weights, root=root,
                                         newton_step=i, solver_iterations=j)
                rows.append(_metrics_row(
                    secs if use_wall else 0.0, i, j, cum,
                    evaluator.columns(belief)))
        belief, trace = fit(prior, train, likelihood, outer_cfg, inner_cfg,
                            policy_kind=policy, tile=tile,
                            on_step=on_step, on_inner=on_inner)
    else:
        belief, trace = sod_fit(prior, train, likelihood,
                                cfg["sod"]["subset_size"], cfg["seed"],
                                outer_cfg)
        if cadence != "never":
            rec = trace.steps[-1]
            rows.append(_metrics_row(
                rec.wallclock_s if use_wall else 0.0, rec.step, 0,
                rec.cum_kernel_matvecs, evaluator.columns(belief)))

    final_cols = evaluator.columns(belief)
    summary = {
        "config": cfg,
        "trace": trace.summary(),
        "final_metrics": {k: v for k, v in final_cols.items() if v != ""},
        "final_latent_change_norm": None,
    }
    return rows, summary, belief, trace


def cmd_generate(args) -> int:
    cfg = cfgmod.validate_fit_config(cfgmod.load_json(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "generator" not in cfg["data"]:
        raise ConfigError("generate needs data.generator in the config")
    out_dir = args.out or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (--out or config output_dir)")
    os.makedirs(out_dir, exist_ok=True)
    train, test, sidecar, test_sidecar = cfgmod.resolve_datasets(cfg)
    train_csv = os.path.join(out_dir, "dataset.csv")
    write_dataset_csv(train_csv, train)
    write_sidecar_json(os.path.join(out_dir, "dataset.json"), sidecar or {})
    print(train_csv)
    print(os.path.join(out_dir, "dataset.json"))
    if test is not None:
        test_csv = os.path.join(out_dir, "test.csv")
        write_dataset_csv(test_csv, test)
        write_sidecar_json(os.path.join(out_dir, "test.json"),
                           test_sidecar or {})
        print(test_csv)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = cfgmod.validate_fit_config(cfgmod.load_json(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.cadence is not None:
        cfg.setdefault("metrics", {})["cadence"] = args.cadence
    out_dir = args.out or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (--out or config output_dir)")
    os.makedirs(out_dir, exist_ok=True)
    train, test, _, _ = cfgmod.resolve_datasets(cfg)
    rows, summary, belief, trace = run_fit_config(cfg, train, test, args.clock)
    _write_csv(os.path.join(out_dir, "metrics.csv"), METRICS_HEADER, rows)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    save_belief(os.path.join(out_dir, "belief.ncgp"), belief, cfg)
    print(os.path.join(out_dir, "summary.json"))
    if trace.termination == OUTER_STALLED:
        print("warning: convergence stalled; partial posterior written",
              file=sys.stderr)
        return EXIT_STALLED
    return EXIT_OK


def read_inputs_csv(path) -> np.ndarray:
    """Read feature columns x_0.. from a CSV; a target column is ignored."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    if not x_cols:
        raise ConfigError(f"{path}: no x_* feature columns in header")
    if not rows:
        return np.zeros((0, len(x_cols)))
    data = np.array([[float(row[i]) for i in x_cols] for row in rows])
    return data


def cmd_predict(args) -> int:
    belief, echo = load_belief(args.artifact)
    X = read_inputs_csv(args.inputs)
    family = echo.get("likelihood", {}).get("family", "gaussian")
    metrics_cfg = echo.get("metrics", {})
    mc_samples = metrics_cfg.get("mc_samples", 1000)
    seed = args.seed if args.seed is not None else echo.get("seed", 0)
    C = belief.prior.num_outputs

    if family in ("softmax", "bernoulli_logistic"):
        n_classes = C if family == "softmax" else 2
        header = ["point_id"] + [f"prob_{c}" for c in range(n_classes)]
    elif family == "poisson":
        header = ["point_id", "rate_median", "rate_lower", "rate_upper"]
    else:
        header = ["point_id", "mean", "variance"]

    rows = []
    if X.shape[0]:
        if X.shape[1] != belief.train_inputs.shape[1]:
            raise ConfigError(
                f"{args.inputs}: {X.shape[1]} features, artifact expects "
                f"{belief.train_inputs.shape[1]}")
        mean = posterior_mean(belief, X)
        var = posterior_marginal_var(belief, X)
        if family in ("softmax", "bernoulli_logistic"):
            probs = probit_predict(mean, var)
            rows = [[i] + list(p) for i, p in enumerate(probs)]
        elif family == "poisson":
            lik_stub = make_likelihood(
                "poisson", _stub_counts_dataset(X.shape[0]))
            summary = mc_predict(mean, var, lik_stub, mc_samples, seed)
            rows = [[i, summary.rate_median[i], summary.rate_lower[i],
                     summary.rate_upper[i]] for i in range(X.shape[0])]
        else:
            rows = [[i, mean[i, 0], var[i, 0]] for i in range(X.shape[0])]
    _write_csv(args.out, header, rows)
    print(args.out)
    return EXIT_OK


def _stub_counts_dataset(n):
    from .gp import Dataset
    return Dataset(inputs=np.zeros((max(n, 1), 1)),
                   targets=np.zeros(max(n, 1), dtype=np.int64),
                   domain="counts")


def _benchmark_cell(cfg, train, test, clock_mode):
    rows, summary, _, trace = run_fit_config(cfg, train, test, clock_mode)
    finals = summary["final_metrics"]
    best = {}
    col_index = {name: METRICS_HEADER.index(name)
                 for name in ("test_nll", "train_nll", "test_acc",
                              "train_acc", "test_ece", "train_ece")}
    for name, idx in col_index.items():
        values = [row[idx] for row in rows if row[idx] != ""]
        if not values:
            continue
        best[name] = max(values) if name.endswith("_acc") else min(values)
    return {"finals": finals, "best": best,
            "steps": len(trace.steps), "termination": trace.termination,
            "peak_buffer_entries": trace.peak_buffer_entries,
            "total_kernel_matvecs": trace.total_kernel_matvecs}


def _aggregate(values):
    return {"min": min(values), "median": statistics.median(values),
            "max": max(values)}


def cmd_benchmark(args) -> int:
    cfg = cfgmod.validate_benchmark_config(cfgmod.load_json(args.config))
    base = cfg["base"]
    if args.seed is not None:
        base["seed"] = args.seed
    repeats = cfg.get("repeats", 1)
    out_dir = args.out or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (--out or config output_dir)")
    os.makedirs(out_dir, exist_ok=True)
    threads = max(1, int(os.environ.get("NCGP_THREADS", "1") or "1"))

    # one dataset per repeat, shared by every grid cell
    repeat_data = []
    for r in range(repeats):
        run_cfg = cfgmod.deep_merge(base, {})
        run_cfg["seed"] = base["seed"] + r
        gen = run_cfg["data"].get("generator")
        if gen is not None and r > 0:
            draw = gen.get("draw_seed", gen.get("seed", base["seed"]))
            gen["draw_seed"] = draw + r
        train, test, _, _ = cfgmod.resolve_datasets(run_cfg)
        repeat_data.append((run_cfg, train, test))

    tasks = []
    for cell in cfg["grid"]:
        for r in range(repeats):
            run_cfg, train, test = repeat_data[r]
            merged = cfgmod.deep_merge(run_cfg, cell.get("overrides", {}))
            tasks.append((cell["name"], r, merged, train, test))

    results = {}

    def run_task(task):
        name, r, merged, train, test = task
        try:
            return name, r, _benchmark_cell(merged, train, test, args.clock)
        except NcgpError as err:
            return name, r, {"error": str(err)}

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_task, tasks))
    else:
        outcomes = [run_task(t) for t in tasks]
    for name, r, res in outcomes:
        results.setdefault(name, {})[r] = res

    table = []
    for cell in cfg["grid"]:
        name = cell["name"]
        cell_runs = results.get(name, {})
        ok = [res for res in cell_runs.values() if "error" not in res]
        entry = {"name": name, "runs": len(cell_runs),
                 "failures": len(cell_runs) - len(ok)}
        agg = {}
        if ok:
            metric_names = sorted({k for res in ok for k in res["finals"]})
            for m in metric_names:
                vals = [res["finals"][m] for res in ok if m in res["finals"]]
                if vals:
                    agg[f"final_{m}"] = _aggregate(vals)
            best_names = sorted({k for res in ok for k in res["best"]})
            for m in best_names:
                vals = [res["best"][m] for res in ok if m in res["best"]]
                if vals:
                    agg[f"best_{m}"] = _aggregate(vals)
        entry["metrics"] = agg
        entry["errors"] = {str(r): res["error"]
                           for r, res in cell_runs.items() if "error" in res}
        table.append(entry)

    _write_json(os.path.join(out_dir, "benchmark.json"),
                {"config": cfg, "cells": table})
    csv_header = ["cell", "runs", "failures"]
    metric_cols = sorted({m for entry in table for m in entry["metrics"]})
    csv_header += [f"{m}_median" for m in metric_cols]
    csv_rows = []
    for entry in table:
        row = [entry["name"], entry["runs"], entry["failures"]]
        row += [entry["metrics"].get(m, {}).get("median", "")
                for m in metric_cols]
        csv_rows.append(row)
    _write_csv(os.path.join(out_dir, "benchmark.csv"), csv_header, csv_rows)
    print(os.path.join(out_dir, "benchmark.json"))
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncgp",
        description="Matrix-free Laplace inference for non-conjugate GPs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--clock", choices=["wall", "none"], default="wall",
                       help="'none' writes zero wall-clock for "
                            "byte-reproducible metric files")

    gen = sub.add_parser("generate", help="write dataset CSV + sidecar")
    add_common(gen)

    fit_p = sub.add_parser("fit", help="run inference, write trace + belief")
    add_common(fit_p)
    fit_p.add_argument("--cadence", choices=["step", "iter", "never"],
                       help="metric evaluation cadence (overrides config)")

    pred = sub.add_parser("predict", help="evaluate a belief artifact")
    pred.add_argument("--artifact", required=True, help="belief file from fit")
    pred.add_argument("--inputs", required=True, help="CSV with x_* columns")
    pred.add_argument("--out", required=True, help="predictions CSV path")
    pred.add_argument("--seed", type=int, help="override MC seed")

    bench = sub.add_parser("benchmark", help="run a config grid")
    add_common(bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"generate": cmd_generate, "fit": cmd_fit,
                "predict": cmd_predict, "benchmark": cmd_benchmark}
    try:
        return handlers[args.command](args)
    except (ConfigError, ArtifactError, jsonschema.ValidationError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
