"""Command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 enumeration
capacity exceeded, 4 a verification inequality failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import compare_rules, pearson
from .availability import (
    FixedSizeWeightedSampler,
    MarginalWeights,
    compute_marginals_exact,
    enumerate_sampler_distribution,
    estimate_marginals,
    is_exchangeable,
    participation_skew,
    resolve_marginals,
    sampler_from_json,
    sampler_to_json,
)
from .data import SynthRegressionSpec, generate_regression, load_mnist_idx, partition
from .engine import SUMMARY_FIELDS, Agnostic, RunConfig, Weighted, run_fedavg
from .errors import CapacityError, ValidationError
from .optimization import estimate_constants, solve_reference_optimum
from .plotting import plot_loss_curves, plot_skew_scatter
from .verification import format_table, run_verification

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_CAPACITY, EXIT_VERIFY = 0, 1, 2, 3, 4

SYNTH = "synth-regression"
MNIST = "mnist-logistic"

DEFAULTS = {
    SYNTH: {
        "task": SYNTH,
        "data": {"n_clients": 100, "samples_per_client": 50, "dim": 20, "noise_std": 0.1,
                 "heterogeneity": 0.5, "seed": 0},
        "run": {"local_steps": 10, "global_rounds": 100, "step_size": 0.01,
                "step_rule": "constant", "batch_size": 10, "radius": 10.0},
        "sampler": {"kind": "fixed_size_weighted", "n_clients": 100, "size": 10, "beta": 10},
        "rules": ["agnostic", "weighted"],
        "seeds": [0],
        "marginals": {"mode": "auto", "draws": 100_000},
        "reference": True,
        "constants_samples": 20,
        "project_weighted": False,
        "workers": 1,
    },
    MNIST: {
        "task": MNIST,
        "data": {"images": "data/mnist-10k/images-idx3-ubyte.gz",
                 "labels": "data/mnist-10k/labels-idx1-ubyte.gz",
                 "partition": "iid", "n_clients": 100, "limit": 10_000, "seed": 0},
        "run": {"local_steps": 10, "global_rounds": 50, "step_size": 0.1,
                "step_rule": "constant", "batch_size": 10, "radius": 50.0},
        "sampler": {"kind": "fixed_size_weighted", "n_clients": 100, "size": 10, "beta": 10},
        "rules": ["agnostic", "weighted"],
        "seeds": [0],
        "marginals": {"mode": "auto", "draws": 100_000},
        "reference": False,
        "constants_samples": 0,
        "project_weighted": False,
        "workers": 1,
    },
}


class SpecError(Exception):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        super().__init__(message)
        self.line = line
        self.source = source

    def __str__(self):
        where = f"{self.source}:{self.line}" if self.line else self.source
        return f"{where}: {self.args[0]}"


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def _merge(base: dict, override: dict, text: str | None, source: str, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise SpecError(f"unknown key {path + key!r}", _line_of(text, key), source)
        if isinstance(base[key], dict) and key not in ("sampler", "data"):
            if not isinstance(value, dict):
                raise SpecError(f"{path + key!r} must be an object", _line_of(text, key), source)
            out[key] = _merge(base[key], value, text, source, path + key + ".")
        elif key == "data" and isinstance(value, dict):
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_spec(config_path: str | None, overrides: list[str], seed: int | None) -> tuple[dict, str | None, str]:
    """Merge defaults, a JSON config file and command-line overrides."""
    text = None
    source = config_path or "<defaults>"
    user = {}
    if config_path:
        text = Path(config_path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source)
        if not isinstance(user, dict):
            raise SpecError("config must be a JSON object", 1, source)
    task = user.get("task", SYNTH)
    if task not in DEFAULTS:
        raise SpecError(f"unknown task {task!r}; expected one of {sorted(DEFAULTS)}",
                        _line_of(text, "task"), source)
    spec = _merge(DEFAULTS[task], user, text, source)
    for item in overrides:
        if "=" not in item:
            raise SpecError(f"override {item!r} is not KEY=VALUE", None, "--set")
        key, raw = item.split("=", 1)
        node = spec
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise SpecError(f"unknown key {key!r}", None, "--set")
            node = node[part]
        if parts[-1] not in node and parts[0] not in ("data", "sampler"):
            raise SpecError(f"unknown key {key!r}", None, "--set")
        node[parts[-1]] = _parse_value(raw)
    if seed is not None:
        spec["seeds"] = [seed]
    _validate(spec, text, source)
    return spec, text, source


def _validate(spec: dict, text: str | None, source: str) -> None:
    rules = spec["rules"]
    if not isinstance(rules, list) or not rules:
        raise SpecError("'rules' must be a nonempty list", _line_of(text, "rules"), source)
    bad = [r for r in rules if r not in ("agnostic", "weighted")]
    if bad:
        raise SpecError(f"unknown rule(s) {bad}", _line_of(text, "rules"), source)
    seeds = spec["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise SpecError("'seeds' must be a nonempty list of integers", _line_of(text, "seeds"), source)
    mode = spec["marginals"]["mode"]
    if mode not in ("auto", "exact", "estimate"):
        raise SpecError(f"marginals.mode must be auto|exact|estimate, got {mode!r}",
                        _line_of(text, "mode"), source)
    if int(spec["marginals"]["draws"]) < 1:
        raise SpecError("marginals.draws must be >= 1", _line_of(text, "draws"), source)


def build_data(spec: dict):
    d = spec["data"]
    if spec["task"] == SYNTH:
        try:
            return generate_regression(SynthRegressionSpec(**d))
        except TypeError as exc:
            raise ValidationError(f"data: {exc}") from exc
    X, y = load_mnist_idx(d["images"], d["labels"])
    if d.get("limit"):
        X, y = X[: int(d["limit"])], y[: int(d["limit"])]
    fed = partition(X, y, int(d["n_clients"]), d.get("partition", "iid"), int(d.get("seed", 0)))
    fed.meta.update({"images": str(d["images"]), "labels": str(d["labels"]), "limit": d.get("limit")})
    return fed


def build_config(spec: dict, seed: int) -> RunConfig:
    try:
        return RunConfig(seed=seed, **spec["run"])
    except TypeError as exc:
        raise ValidationError(f"run: {exc}") from exc


def build_marginals(sampler, mode: str, draws: int, seed: int) -> tuple[MarginalWeights, str]:
    rng = np.random.default_rng([seed, 0xA11CE])
    if mode == "estimate":
        return estimate_marginals(sampler, draws, rng), "estimate"
    if mode == "exact":
        if is_exchangeable(sampler):
            return MarginalWeights.uniform(sampler.n_clients), "exact"
        return compute_marginals_exact(enumerate_sampler_distribution(sampler)), "exact"
    p = resolve_marginals(sampler, draws, rng)
    return p, "estimate" if p.stderr is not None else "exact"


def config_hash(spec: dict) -> str:
    canon = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})


def _run_job(job):
    config, sampler, rule, data, p, f_star = job
    return run_fedavg(config, sampler, rule, data, objective_p=p, f_star=f_star)


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cmd_run(args) -> int:
    spec, _, _ = load_spec(args.config, args.set, args.seed)
    data = build_data(spec)
    sampler = sampler_from_json(spec["sampler"])
    if sampler.n_clients != data.n_clients:
        raise ValidationError(f"sampler covers {sampler.n_clients} clients, data has {data.n_clients}")
    seeds = spec["seeds"]
    p, p_mode = build_marginals(sampler, spec["marginals"]["mode"], int(spec["marginals"]["draws"]),
                                seeds[0])
    base = build_config(spec, seeds[0])
    base.check(data)
    f_star = None
    reference = None
    if spec["reference"]:
        opt = solve_reference_optimum(p, data.datasets, data.model, base.projection)
        f_star = opt.value
        reference = {"f_star": opt.value, "method": opt.method,
                     "grad_mapping_norm": opt.grad_mapping_norm}
    constants = None
    if int(spec["constants_samples"]) > 0:
        c = estimate_constants(data.model, data.datasets, base.projection,
                               int(spec["constants_samples"]),
                               np.random.default_rng([seeds[0], 0xC0457]), base.batch_size, p)
        constants = {"G": c.G, "sigma_sq": c.sigma_sq, "lipschitz": c.lipschitz,
                     "sigma_clients": c.sigma_clients.tolist()}
    rules = {"agnostic": Agnostic(), "weighted": Weighted(p, bool(spec["project_weighted"]))}
    jobs, keys = [], []
    for rule_name in spec["rules"]:
        for seed in seeds:
            jobs.append((replace(base, seed=seed), sampler, rules[rule_name], data, p, f_star))
            keys.append((rule_name, seed))
    traces = _map(_run_job, jobs, int(spec["workers"]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, runs = [], []
    for (rule_name, seed), trace in zip(keys, traces):
        run_dir = out / rule_name / str(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        trace.write_jsonl(run_dir / "trace.jsonl")
        (run_dir / "final_state.json").write_text(json.dumps(trace.final_state_json(), indent=2))
        for row in trace.summary_rows():
            rows.append({"rule": rule_name, "seed": seed, **row})
        runs.append({"rule": rule_name, "seed": seed,
                     "trace": str(Path(rule_name) / str(seed) / "trace.jsonl"),
                     "final_objective": trace.final_objective,
                     "final_suboptimality": None if f_star is None else trace.final_objective - f_star})
    fields = ["rule", "seed"] + SUMMARY_FIELDS
    write_csv(out / "summary.csv", fields, rows)
    (out / "federation.json").write_text(json.dumps(data.describe(), indent=2))
    manifest = {
        "version": __version__,
        "config": spec,
        "config_hash": config_hash(spec),
        "seeds": seeds,
        "marginals": {**p.to_json(), "mode": p_mode, "skew": participation_skew(p)},
        "sampler": sampler_to_json(sampler),
        "reference": reference,
        "constants": constants,
        "runs": runs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    plot_loss_curves(rows, out / "loss_curves.svg", "objective_aggregate",
                     "cross-entropy" if spec["task"] == MNIST else "MSE")
    for r in runs:
        print(f"{r['rule']:>9} seed={r['seed']}: final objective {r['final_objective']:.6g}")
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


def _parse_list(raw: str, conv):
    try:
        return [conv(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise SpecError(f"cannot parse list {raw!r}: {exc}", None, "argv") from exc


def _beta(x: str) -> float:
    x = x.strip().lower()
    return math.inf if x in ("inf", "infinity", "∞") else float(x)


def cmd_sweep_skew(args) -> int:
    spec, _, _ = load_spec(args.config, args.set, None)
    betas = _parse_list(args.betas, _beta)
    seeds = _parse_list(args.seeds, int) if args.seeds else spec["seeds"]
    if not betas or not seeds or len(betas) * len(seeds) < 2:
        raise SpecError("sweep needs at least two (beta, seed) points", None, "argv")
    data = build_data(spec)
    size = int(spec["sampler"].get("size", 10))
    base = build_config(spec, seeds[0])
    base.check(data)
    rows = []
    for beta in betas:
        sampler = FixedSizeWeightedSampler.exponential(data.n_clients, size, beta)
        p, _ = build_marginals(sampler, spec["marginals"]["mode"],
                               int(spec["marginals"]["draws"]), seeds[0])
        for res in compare_rules(base, sampler, data, seeds, p, bool(spec["project_weighted"])):
            rows.append({"beta": beta, "seed": res.seed, "skew": res.skew,
                         "agnostic": res.agnostic, "weighted": res.weighted,
                         "difference": res.difference})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "skew_scatter.csv", ["beta", "seed", "skew", "agnostic", "weighted", "difference"],
              rows)
    plot_skew_scatter(rows, out / "skew_scatter.svg")
    r = pearson([row["skew"] for row in rows], [row["difference"] for row in rows])
    manifest = {"version": __version__, "config": spec, "config_hash": config_hash(spec),
                "betas": [b if math.isfinite(b) else "inf" for b in betas], "seeds": seeds,
                "pearson": r,
                "pearson_note": None if r is not None else "undefined: zero variance in skew or difference"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    positive = sum(row["difference"] > 0 for row in rows)
    print(f"{positive}/{len(rows)} points with weighted worse than agnostic")
    print("pearson(skew, weighted - agnostic): " + ("undefined (zero variance)" if r is None else f"{r:.4f}"))
    return EXIT_OK


def _read_json_arg(raw: str):
    if raw.startswith("@"):
        return json.loads(Path(raw[1:]).read_text())
    if raw.lstrip().startswith("{"):
        return json.loads(raw)
    return json.loads(Path(raw).read_text())


def cmd_marginals(args) -> int:
    try:
        doc = _read_json_arg(args.sampler)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid sampler JSON: {exc.msg}", exc.lineno, "--sampler") from exc
    sampler = sampler_from_json(doc)
    if args.mode == "estimate":
        if args.draws < 1:
            raise ValidationError(f"draws must be >= 1, got {args.draws}")
        mw = estimate_marginals(sampler, args.draws, np.random.default_rng(args.seed))
    else:
        try:
            mw, _ = build_marginals(sampler, "exact", 1, args.seed)
        except CapacityError as exc:
            print(f"error: {exc}; use --mode estimate --draws N instead", file=sys.stderr)
            return EXIT_CAPACITY
    out = {**mw.to_json(), "skew": participation_skew(mw), "n_clients": mw.n_clients,
           "mode": args.mode}
    print(json.dumps(out))
    return EXIT_OK


def cmd_verify(args) -> int:
    g_scale = 1.0 / args.debug_shrink_g if args.debug_shrink_g else 1.0
    res = run_verification(args.scale, args.seed, g_scale)
    print(format_table(res.reports))
    print(f"[{res.scale}] {len(res.reports)} checks in {res.seconds:.1f}s")
    if res.rate is not None:
        print(f"rate fit: slope {res.rate.slope:.4f}, r2 {res.rate.r2:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(res.to_json(), indent=2))
    if not res.ok:
        print("FAILED: " + ", ".join(r.name for r in res.failing()), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


PLOT_COLUMNS = {
    "loss-curves": ["rule", "round"],
    "skew-scatter": ["skew", "difference"],
}


def cmd_plot(args) -> int:
    with open(args.csv, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    required = PLOT_COLUMNS[args.kind] + ([args.column] if args.kind == "loss-curves" else [])
    missing = [c for c in required if c not in header]
    if missing:
        raise SpecError(f"missing column(s): {', '.join(missing)}", None, args.csv)
    if not rows:
        raise SpecError("no data rows", None, args.csv)
    out = args.out or str(Path(args.csv).with_suffix(".svg"))
    if args.kind == "loss-curves":
        rows = [r for r in rows if r[args.column] != ""]
        if not rows:
            raise SpecError(f"column {args.column!r} is empty", None, args.csv)
        n = plot_loss_curves(rows, out, args.column)
        print(f"wrote {out} ({n} series)")
    else:
        n = plot_skew_scatter(rows, out)
        print(f"wrote {out} ({n} points)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agnostic-fedavg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run FedAvg for each (rule, seed) and write traces")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. run.global_rounds=200")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-skew", help="weighted-minus-agnostic loss across exp(-(i-1)/beta) biases")
    p.add_argument("--config", help="JSON base experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--betas", default="50,20,10,5")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep_skew)

    p = sub.add_parser("marginals", help="print marginal survival weights as JSON")
    p.add_argument("--sampler", required=True, help="sampler JSON, @file or path")
    p.add_argument("--mode", choices=["exact", "estimate"], default="exact")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_marginals)

    p = sub.add_parser("verify", help="run the inequality and rate verification suite")
    p.add_argument("--scale", choices=["quick", "full"], default="quick")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--debug-shrink-g", type=float, default=None, metavar="FACTOR",
                   help="negative control: divide the gradient bound G by FACTOR")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="render a summary or sweep CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--kind", choices=sorted(PLOT_COLUMNS), required=True)
    p.add_argument("--column", default="objective_aggregate",
                   help="loss-curves: which objective column to plot")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CapacityError as exc:
        print(f"error: {exc}; try estimate mode", file=sys.stderr)
        return EXIT_CAPACITY
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
