"""Command-line front end: spec parsing, experiment execution, dataset
generation, and CSV/SVG report emission.

Spec files are flat UTF-8 ``key = value`` lines with ``#`` comments. Every
key has a default (see SPEC_FIELDS); unknown keys are rejected so typos
fail loudly. Exit codes: 0 success, 1 runtime failure, 2 configuration or
input error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import report
from .bo import AlphaControllerConfig, KernelConfig, KernelFamily
from .core import (CostModelConfig, DimensionGrid, ExperimentBudget, StateSpace,
                   TwinbridgeError, enumerate_state_grid)
from .divergence import KlEstimatorConfig, KlMethod
from .envs import (DatasetEnv, DatasetRecord, Role, env_query, load_dataset,
                   make_synthetic_pair, save_dataset)
from .l2b import (Method, RunConfig, cost_efficiency, run)
from .agent import TrainConfig


class ConfigError(TwinbridgeError):
    """Invalid spec key, value, or missing input; maps to exit code 2."""


# key -> (parser, default, help)
def _parse_bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("true", "1", "yes"):
        return True
    if lv in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v}")


SPEC_FIELDS = {
    "out_dir": (str, "results", "output directory for CSVs and charts"),
    "seed": (int, 0, "master seed for every stochastic component"),
    "methods": (str, "L2B,L2BLite,GridSearch,RandomBaseline",
                "comma-separated methods to execute"),
    "budget": (float, 1700.0, "cumulative querying-cost ceiling"),
    "batch_size": (int, 10, "querying iterations per bridging stage"),
    "max_queries": (int, 520, "query cap per run (0 disables)"),
    "env": (str, "synthetic", "environment pair: synthetic or dataset"),
    "dataset_path": (str, "", "dataset CSV path when env = dataset"),
    "bias_strength": (float, 0.3, "synthetic sim-to-real gap strength"),
    "noise_sigma": (float, 0.25, "synthetic real-side lognormal sigma"),
    "samples_per_query": (int, 200, "latency samples per environment query"),
    "eval_state_count": (int, 256, "evaluation subset size"),
    "eval_samples": (int, 2000, "samples per collection for pre/post evaluation"),
    "stage_eval_samples": (int, 500, "samples per collection at stage checkpoints"),
    "stage_epochs": (int, 25, "agent training epochs at mid-run stages"),
    "epochs": (int, 500, "agent training epochs for the final bridger"),
    "learning_rate": (float, 1.0, "initial Adadelta learning rate"),
    "noise_std": (float, 0.1, "likelihood noise std in normalized units"),
    "train_batch": (int, 512, "agent minibatch size"),
    "kl_method": (str, "histogram", "KL estimator: histogram or knn"),
    "bins": (int, 64, "histogram bins"),
    "smoothing": (float, 1e-3, "histogram additive smoothing"),
    "knn_k": (int, 5, "k for the k-NN estimator"),
    "kernel": (str, "rbf", "GP kernel family: rbf or matern25"),
    "signal_variance": (float, 1.0, "initial GP signal variance"),
    "length_scale": (float, 0.3, "initial GP length scale (normalized space)"),
    "gp_noise": (float, 1e-4, "GP observation noise variance"),
    "candidate_pool": (int, 1024, "candidate states scored per iteration"),
    "alpha_min": (float, 0.2, "lower bound of the cost exponent"),
    "alpha_max": (float, 0.6, "upper bound of the cost exponent"),
    "alpha_window": (int, 5, "half-window of the alpha controller"),
    "alpha_r_ref": (float, 0.1, "decrease rate mapped to alpha_max"),
    "cost_base": (float, 1.0, "base querying cost"),
    "cost_per_user": (float, 0.5, "querying cost per traffic user"),
    "cost_per_prb": (float, 1.0, "querying cost per 100 allocated PRBs"),
    "u_stride": (int, 10, "grid stride for uplink PRBs"),
    "d_stride": (int, 10, "grid stride for downlink PRBs"),
}

ITERATIONS_COLUMNS = ["iter", "method", "U", "D", "C", "R", "Mu", "Md", "F",
                      "kl", "cost", "cumulative_cost", "alpha"]


def parse_spec_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SPEC_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, _, _ = SPEC_FIELDS[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_spec(path=None, overrides=None) -> dict:
    spec = {k: default for k, (_, default, _) in SPEC_FIELDS.items()}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"spec file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            spec.update(parse_spec_text(fh.read()))
    for key, val in (overrides or {}).items():
        if val is not None:
            spec[key] = val
    return spec


_METHODS = {m.value.lower(): m for m in Method}
_KERNELS = {"rbf": KernelFamily.RBF, "matern25": KernelFamily.MATERN25}
_KL_METHODS = {"histogram": KlMethod.HISTOGRAM, "knn": KlMethod.KNN}


def _lookup(table, value, what):
    try:
        return table[value.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown {what}: {value!r} "
                          f"(expected one of {sorted(table)})") from None


def build_space(spec: dict) -> StateSpace:
    dims = list(StateSpace().dims)
    dims[0] = DimensionGrid(0, 50, spec["u_stride"])
    dims[1] = DimensionGrid(0, 50, spec["d_stride"])
    return StateSpace(tuple(dims))


def build_run_config(spec: dict, method: Method) -> RunConfig:
    try:
        return RunConfig(
            method=method,
            budget=ExperimentBudget(spec["budget"], spec["batch_size"]),
            eval_state_count=spec["eval_state_count"],
            samples_per_query=spec["samples_per_query"],
            eval_samples=spec["eval_samples"],
            stage_eval_samples=spec["stage_eval_samples"],
            max_queries=spec["max_queries"],
            stage_epochs=spec["stage_epochs"],
            seed=spec["seed"],
            kernel=KernelConfig(_lookup(_KERNELS, spec["kernel"], "kernel"),
                                spec["signal_variance"], spec["length_scale"]),
            gp_noise=spec["gp_noise"],
            candidate_pool=spec["candidate_pool"],
            alpha=AlphaControllerConfig(spec["alpha_window"], spec["alpha_r_ref"],
                                        spec["alpha_min"], spec["alpha_max"]),
            train=TrainConfig(learning_rate=spec["learning_rate"],
                              epochs=spec["epochs"], noise_std=spec["noise_std"],
                              batch_size=spec["train_batch"], seed=spec["seed"]),
            estimator=KlEstimatorConfig(_lookup(_KL_METHODS, spec["kl_method"],
                                                "KL method"),
                                        spec["bins"], spec["smoothing"],
                                        spec["knn_k"]),
            cost_model=CostModelConfig(spec["cost_base"], spec["cost_per_user"],
                                       spec["cost_per_prb"]),
            space=build_space(spec),
        )
    except TwinbridgeError as exc:
        raise ConfigError(str(exc)) from exc


def build_envs(spec: dict):
    space = build_space(spec)
    cost_model = CostModelConfig(spec["cost_base"], spec["cost_per_user"],
                                 spec["cost_per_prb"])
    if spec["env"] == "synthetic":
        return make_synthetic_pair(space, spec["bias_strength"],
                                   spec["noise_sigma"], spec["seed"], cost_model)
    if spec["env"] == "dataset":
        if not spec["dataset_path"]:
            raise ConfigError("dataset_path is required when env = dataset")
        if not os.path.isfile(spec["dataset_path"]):
            raise ConfigError(f"dataset file not found: {spec['dataset_path']}")
        records = load_dataset(spec["dataset_path"])
        return (DatasetEnv(records, Role.REAL, space, cost_model),
                DatasetEnv(records, Role.SIM, space, cost_model))
    raise ConfigError(f"unknown env: {spec['env']!r} (expected synthetic or dataset)")


def _parse_methods(raw: str):
    out = []
    for part in raw.split(","):
        part = part.strip()
        if part:
            out.append(_lookup(_METHODS, part, "method"))
    if not out:
        raise ConfigError("no methods configured")
    return out


def _g(x) -> str:
    return f"{x:.10g}"


def _state_cells(s):
    return [s.uplink_bw, s.downlink_bw, _g(s.cpu_ratio), _g(s.ram_ratio),
            s.mcs_up, s.mcs_down, s.traffic]


def write_csvs(results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "iterations.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ITERATIONS_COLUMNS)
        for res in results:
            for r in res.records:
                w.writerow([r.iteration, res.method.value, *_state_cells(r.state),
                            _g(r.discrepancy), _g(r.cost), _g(r.cumulative_cost),
                            _g(r.alpha)])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "queries", "cumulative_cost", "pre_kl", "post_kl",
                    "reduction_pct", "cost_efficiency", "wall_clock_s"])
        for res in results:
            cum = res.cumulative_cost
            eff = (_g(cost_efficiency(max(res.pre_global - res.post_global, 0.0),
                                      cum)) if cum > 0 else "n/a")
            w.writerow([res.method.value, len(res.records), _g(cum),
                        _g(res.pre_global), _g(res.post_global),
                        _g(res.reduction_pct), eff,
                        f"{res.wall_clock_seconds:.2f}"])
    with open(os.path.join(out_dir, "per_traffic.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "traffic", "pre_kl", "post_kl", "reduction_pct"])
        for res in results:
            for f, (pre, post, red) in sorted(res.per_traffic.items()):
                w.writerow([res.method.value, f, _g(pre), _g(post),
                            "n/a" if red is None else _g(red)])
    with open(os.path.join(out_dir, "per_state.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "U", "D", "C", "R", "Mu", "Md", "F",
                    "pre_kl", "post_kl", "reduction_pct"])
        for res in results:
            for s, pre, post in zip(res.eval_states, res.pre_per_state,
                                    res.post_per_state):
                red = "n/a" if pre < 0.02 else _g(100.0 * (pre - post) / pre)
                w.writerow([res.method.value, *_state_cells(s), _g(pre),
                            _g(post), red])
    with open(os.path.join(out_dir, "checkpoints.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "queries", "cumulative_cost", "global_kl"])
        for res in results:
            w.writerow([res.method.value, 0, _g(0.0), _g(res.pre_global)])
            for c in res.checkpoints:
                w.writerow([res.method.value, c.queries, _g(c.cumulative_cost),
                            _g(c.global_discrepancy)])


def cmd_run(spec: dict) -> int:
    methods = _parse_methods(spec["methods"])
    real_env, sim_env = build_envs(spec)
    results = []
    for m in methods:
        config = build_run_config(spec, m)
        print(f"running {m.value} ...", flush=True)
        res = run(config, real_env, sim_env)
        print(f"  {len(res.records)} queries, cost {res.cumulative_cost:.1f}, "
              f"discrepancy {res.pre_global:.3f} -> {res.post_global:.3f} "
              f"({res.reduction_pct:.1f}% reduction) "
              f"in {res.wall_clock_seconds:.0f}s", flush=True)
        results.append(res)
    write_csvs(results, spec["out_dir"])
    print(f"wrote CSVs to {spec['out_dir']}")
    return 0


def _read_csv(path):
    if not os.path.isfile(path):
        raise ConfigError(f"missing CSV: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"empty CSV: {path}")
    return rows[0], rows[1:]


def _column(header, rows, name, path):
    try:
        i = header.index(name)
    except ValueError:
        raise ConfigError(f"{path}: missing column {name!r}") from None
    return [r[i] for r in rows]


def cmd_report(results_dir: str) -> int:
    it_path = os.path.join(results_dir, "iterations.csv")
    header, rows = _read_csv(it_path)
    if header != ITERATIONS_COLUMNS:
        raise ConfigError(f"{it_path}: unexpected header")
    if not rows:
        raise ConfigError(f"{it_path}: no iteration rows to report")
    s_header, s_rows = _read_csv(os.path.join(results_dir, "summary.csv"))
    methods = _column(s_header, s_rows, "method", "summary.csv")
    pre_by_method = dict(zip(methods,
                             map(float, _column(s_header, s_rows, "pre_kl",
                                                "summary.csv"))))
    c_header, c_rows = _read_csv(os.path.join(results_dir, "checkpoints.csv"))
    cp = {m: ([], []) for m in methods}
    for r in c_rows:
        m, q, cum, kl = r[0], int(r[1]), float(r[2]), float(r[3])
        if m in cp:
            cp[m][0].append(q)
            cp[m][1].append(kl)

    disc_series = {m: cp[m] for m in methods}
    out = report.line_chart(disc_series, "Global discrepancy vs queried states",
                            "queried states", "average KL (nats)")
    with open(os.path.join(results_dir, "discrepancy_reduction.svg"), "w",
              encoding="utf-8") as fh:
        fh.write(out)

    cost_series = {m: ([], []) for m in methods}
    for r in rows:
        m = r[1]
        if m in cost_series:
            cost_series[m][0].append(int(r[0]))
            cost_series[m][1].append(float(r[11]))
    out = report.line_chart(cost_series, "Cumulative querying cost",
                            "queried states", "cumulative cost")
    with open(os.path.join(results_dir, "cumulative_cost.svg"), "w",
              encoding="utf-8") as fh:
        fh.write(out)

    eff_series = {}
    for m in methods:
        qs, kls = cp[m]
        cums = {}
        for r in c_rows:
            if r[0] == m:
                cums[int(r[1])] = float(r[2])
        xs, ys = [], []
        for q, kl in zip(qs, kls):
            cum = cums.get(q, 0.0)
            if cum > 0:
                xs.append(q)
                ys.append(max(pre_by_method[m] - kl, 0.0) / cum)
        eff_series[m] = (xs or [0], ys or [0.0])
    out = report.line_chart(eff_series, "Cost efficiency",
                            "queried states", "reduced KL per unit cost")
    with open(os.path.join(results_dir, "cost_efficiency.svg"), "w",
              encoding="utf-8") as fh:
        fh.write(out)

    ps_header, ps_rows = _read_csv(os.path.join(results_dir, "per_state.csv"))
    target = "L2B" if "L2B" in methods else methods[0]
    cells = {}
    for r in ps_rows:
        if r[0] != target or r[-1] == "n/a":
            continue
        key = (int(r[1]), int(r[2]))
        cells.setdefault(key, []).append(float(r[-1]))
    grid_cells = {k: float(np.mean(v)) for k, v in cells.items()}
    us = sorted({u for u, _ in grid_cells})
    ds = sorted({d for _, d in grid_cells})
    out = report.heatmap(grid_cells, us, ds,
                         f"Per-state reduction (%) by bandwidth, {target}",
                         "uplink PRBs", "downlink PRBs")
    with open(os.path.join(results_dir, "per_state_heatmap.svg"), "w",
              encoding="utf-8") as fh:
        fh.write(out)
    print(f"wrote 4 SVG charts to {results_dir}")
    return 0


def cmd_gen_dataset(spec: dict, out_path: str) -> int:
    real_env, sim_env = build_envs(spec)
    space = build_space(spec)
    n = spec["samples_per_query"]
    records = []
    for i, s in enumerate(enumerate_state_grid(space)):
        rc, _ = env_query(real_env, s, n, seed=1_000_000 + i)
        sc, _ = env_query(sim_env, s, n, seed=1_000_000 + i)
        records.append(DatasetRecord(s, rc.samples, sc.samples))
    save_dataset(records, out_path)
    print(f"wrote {len(records)} states x 2 sources x {n} samples to {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="twinbridge",
        description="Build and evaluate bridged network digital twins.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (("run", "execute the configured methods and write CSVs"),
                       ("report", "render SVG charts from run CSVs"),
                       ("gen-dataset", "sample the synthetic pair into a CSV")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--spec", help="key = value spec file")
        p.add_argument("--out", help="output directory (or file for gen-dataset)")
        p.add_argument("--seed", type=int, help="override the spec seed")
        p.add_argument("--method", help="override the spec method list")
        p.add_argument("--budget", type=float, help="override the spec budget")

    args = parser.parse_args(argv)
    overrides = {"seed": args.seed, "budget": args.budget}
    if args.method is not None:
        overrides["methods"] = args.method
    if args.command != "gen-dataset" and args.out is not None:
        overrides["out_dir"] = args.out

    try:
        spec = load_spec(args.spec, overrides)
        if args.command == "run":
            return cmd_run(spec)
        if args.command == "report":
            return cmd_report(spec["out_dir"])
        out_path = args.out or "dataset.csv"
        return cmd_gen_dataset(spec, out_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TwinbridgeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
