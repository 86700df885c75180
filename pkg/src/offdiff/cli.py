"""Command-line pipeline driver.

Subcommands: gen-data, solve-heu, solve-exact, train, sample, eval, bench,
theory (fig3 | bound), grad-probe. Every run resolves its configuration
from (defaults < config file < explicit flags), writes the resolved
snapshot as JSON next to its outputs, and derives all randomness from the
global --seed. --threads caps the BLAS thread pool; the default of 1 is
the strict determinism path (outputs are byte-identical across runs except
for explicitly labeled timing columns).

Config files are flat INI: one section per subcommand, keys spelled like
the long flags with dashes replaced by underscores, e.g.

    [train]
    epochs = 50
    batch_size = 64

Exit codes: 0 ok, 2 usage, 3 missing file, 4 schema/corrupt data,
5 enumeration budget, 6 infeasible solution, 7 bad diffusion schedule,
8 calculator precondition, 1 anything else.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

from .errors import (BudgetExceededError, CorruptRecordError, InfeasibleSolutionError,
                     MissingCheckpointError, OffdiffError, PreconditionError,
                     ScheduleError, SchemaError, ShapeMismatchError)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_BUDGET = 5
EXIT_INFEASIBLE = 6
EXIT_SCHEDULE = 7
EXIT_PRECONDITION = 8

_ERROR_CODES = [
    ((FileNotFoundError, MissingCheckpointError), EXIT_MISSING_FILE, "missing-file"),
    ((SchemaError, CorruptRecordError, ShapeMismatchError), EXIT_SCHEMA, "schema"),
    ((BudgetExceededError,), EXIT_BUDGET, "budget"),
    ((InfeasibleSolutionError,), EXIT_INFEASIBLE, "infeasible"),
    ((ScheduleError,), EXIT_SCHEDULE, "schedule"),
    ((PreconditionError,), EXIT_PRECONDITION, "precondition"),
]


def _fail(exc) -> int:
    for types, code, kind in _ERROR_CODES:
        if isinstance(exc, types):
            print(f"error: {kind}: {exc}", file=sys.stderr)
            return code
    print(f"error: general: {exc}", file=sys.stderr)
    return EXIT_ERROR


def _load_file_section(config_path, section):
    if not config_path:
        return {}
    path = Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def _resolve(args, parser_defaults, section):
    """defaults < config-file section < explicit CLI flags."""
    resolved = dict(parser_defaults)
    file_vals = _load_file_section(args.config, section)
    for key, raw in file_vals.items():
        if key not in resolved:
            raise SchemaError(f"unknown key {key!r} in config section [{section}]")
        default = resolved[key]
        if isinstance(default, bool):
            resolved[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            resolved[key] = int(raw)
        elif isinstance(default, float):
            resolved[key] = float(raw)
        else:
            resolved[key] = raw
    for key, value in vars(args).items():
        if key in resolved and value is not None:
            resolved[key] = value
    return resolved


def _write_snapshot(out_dir, name, resolved, global_args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "subcommand": name,
        "seed": global_args.seed,
        "threads": global_args.threads,
        "options": {k: v for k, v in sorted(resolved.items())},
    }
    path = out_dir / f"{name}-resolved.json"
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# --- subcommand handlers ----------------------------------------------------

GEN_DEFAULTS = dict(name="lq3s6u", count=100, label="heu", restarts=8,
                    perturbation=0.5, out="dataset.jsonl", rho_gate=True)


def cmd_gen_data(args):
    from .data import DatasetManifest, build_dataset

    opts = _resolve(args, GEN_DEFAULTS, "gen-data")
    label_kind = {"heu": "heuristic", "exact": "exact"}.get(opts["label"], opts["label"])
    manifest = DatasetManifest(
        name=opts["name"], count=opts["count"], label_kind=label_kind,
        seed=args.seed, restarts=opts["restarts"], perturbation=opts["perturbation"],
        offload_requires_rho=opts["rho_gate"],
    )
    out = Path(opts["out"])
    summary = build_dataset(manifest, out)
    _write_snapshot(out.parent, "gen-data", opts, args)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


SOLVE_DEFAULTS = dict(data="", restarts=8, perturbation=0.5, out="solve.csv",
                      rho_gate=True, budget=10_000_000)


def _solve_common(args, exact: bool):
    import csv

    import numpy as np

    from .data import load_dataset
    from .problem import objective
    from .solvers import HeuristicConfig, exact_solve, heuristic_best

    opts = _resolve(args, SOLVE_DEFAULTS, "solve-exact" if exact else "solve-heu")
    _require(opts["data"], "dataset")
    rows = []
    for idx, rec in enumerate(load_dataset(opts["data"])):
        if exact:
            sol, cost = exact_solve(rec.instance, offload_requires_rho=opts["rho_gate"],
                                    budget=opts["budget"])
        else:
            sol = heuristic_best(
                rec.instance,
                HeuristicConfig(restarts=opts["restarts"],
                                perturbation=opts["perturbation"],
                                seed=args.seed + idx),
                offload_requires_rho=opts["rho_gate"])
            cost = objective(rec.instance, sol)
        rows.append((idx, cost, rec.label_cost, cost / rec.label_cost))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "cost", "label_cost", "ratio_to_label"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])
    name = "solve-exact" if exact else "solve-heu"
    _write_snapshot(out.parent, name, opts, args)
    mean_ratio = float(np.mean([r[3] for r in rows])) if rows else float("nan")
    print(json.dumps({"instances": len(rows), "mean_ratio_to_label": mean_ratio}))
    return EXIT_OK


def cmd_solve_heu(args):
    return _solve_common(args, exact=False)


def cmd_solve_exact(args):
    return _solve_common(args, exact=True)


TRAIN_DEFAULTS = dict(data="", out="run", epochs=50, batch_size=64, lr=2e-4,
                      lr_end=1e-5, hidden=64, layers=3, time_dim=32,
                      task_mode="multi", padding_mask=True, probe_every=0,
                      probe_limit=0, diffusion_steps=200, beta_min=1e-4,
                      beta_max=0.1, edge_slots=0, val_fraction=0.05)


def cmd_train(args):
    from .data import load_dataset
    from .gnn import GnnConfig, init_params
    from .training import TrainConfig, train

    opts = _resolve(args, TRAIN_DEFAULTS, "train")
    _require(opts["data"], "dataset")
    records = list(load_dataset(opts["data"]))
    model = init_params(GnnConfig(hidden_dim=opts["hidden"], num_layers=opts["layers"],
                                  time_dim=opts["time_dim"],
                                  padding_mask_enabled=opts["padding_mask"]),
                        seed=args.seed)
    cfg = TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"],
        lr_end=opts["lr_end"], seed=args.seed, task_mode=opts["task_mode"],
        diffusion_steps=opts["diffusion_steps"], beta_min=opts["beta_min"],
        beta_max=opts["beta_max"], probe_every=opts["probe_every"],
        probe_limit=opts["probe_limit"], val_fraction=opts["val_fraction"],
        edge_slots=opts["edge_slots"] or None,
    )
    out = Path(opts["out"])
    result = train(model, records, cfg, out_dir=out)
    _write_snapshot(out, "train", opts, args)
    last = result.metrics[-1]
    print(json.dumps({"epochs": len(result.metrics), "best_val": result.best_val,
                      "final_train_loss_discrete": last["train_loss_discrete"],
                      "final_train_loss_continuous": last["train_loss_continuous"],
                      "checkpoint": str(out / "best.npz")}))
    return EXIT_OK


SAMPLE_DEFAULTS = dict(ckpt="", data="", chains=16, steps=5, mode="ddim",
                       out="samples.csv", limit=0, edge_slots=0,
                       diffusion_steps=200, beta_min=1e-4, beta_max=0.1)


def cmd_sample(args):
    import csv

    from .data import load_dataset
    from .diffusion import make_schedule
    from .gnn import load_checkpoint
    from .sampling import SampleConfig, sample_solutions

    opts = _resolve(args, SAMPLE_DEFAULTS, "sample")
    if not Path(opts["ckpt"]).exists():
        raise MissingCheckpointError(f"checkpoint not found: {opts['ckpt']}")
    _require(opts["data"], "dataset")
    model = load_checkpoint(opts["ckpt"])
    schedule = make_schedule(opts["diffusion_steps"], beta_min=opts["beta_min"],
                             beta_max=opts["beta_max"])
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, rec in enumerate(load_dataset(opts["data"])):
        if opts["limit"] and idx >= opts["limit"]:
            break
        cfg = SampleConfig(chains=opts["chains"], steps=opts["steps"],
                           mode=opts["mode"], seed=args.seed + idx,
                           edge_slots=opts["edge_slots"] or None)
        result = sample_solutions(model, rec.instance, schedule, cfg)
        rows.append((idx, result.best_cost, rec.label_cost,
                     result.best_cost / rec.label_cost,
                     "".join(str(int(d)) for d in result.best.decisions)))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "best_cost", "label_cost", "exceed_ratio", "decisions"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), r[4]])
    _write_snapshot(out.parent, "sample", opts, args)
    print(json.dumps({"instances": len(rows)}))
    return EXIT_OK


EVAL_DEFAULTS = dict(ckpt="", data="", chains=16, steps=5, mode="ddim",
                     report="eval.csv", limit=0, edge_slots=0,
                     diffusion_steps=200, beta_min=1e-4, beta_max=0.1)


def cmd_eval(args):
    import csv

    from .data import load_dataset
    from .diffusion import make_schedule
    from .gnn import load_checkpoint
    from .sampling import DiffusionSampler, SampleConfig, evaluate_method

    opts = _resolve(args, EVAL_DEFAULTS, "eval")
    if not Path(opts["ckpt"]).exists():
        raise MissingCheckpointError(f"checkpoint not found: {opts['ckpt']}")
    _require(opts["data"], "dataset")
    model = load_checkpoint(opts["ckpt"])
    schedule = make_schedule(opts["diffusion_steps"], beta_min=opts["beta_min"],
                             beta_max=opts["beta_max"])
    records = list(load_dataset(opts["data"]))
    if opts["limit"]:
        records = records[:opts["limit"]]
    sampler = DiffusionSampler(
        model, schedule,
        SampleConfig(chains=opts["chains"], steps=opts["steps"], mode=opts["mode"],
                     seed=args.seed, edge_slots=opts["edge_slots"] or None))
    report = evaluate_method(sampler, records, Path(opts["data"]).stem)
    out = Path(opts["report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "exceed_ratio"])
        for i, r in enumerate(report.ratios):
            w.writerow([i, repr(float(r))])
        w.writerow(["mean", repr(report.mean_ratio)])
        w.writerow(["p90", repr(report.p90_ratio)])
    _write_snapshot(out.parent, "eval", opts, args)
    print(json.dumps({
        "instances": len(report.ratios),
        "mean_exceed_ratio": report.mean_ratio,
        "p90_exceed_ratio": report.p90_ratio,
        "feasible_before_repair_rate": report.feasible_before_repair_rate,
        "mean_seconds": report.mean_seconds,
    }))
    return EXIT_OK


BENCH_DEFAULTS = dict(out="bench.csv", heatmap="", chains=16, steps=5,
                      restarts=8, limit=0, edge_slots=0,
                      diffusion_steps=200, beta_min=1e-4, beta_max=0.1)


def cmd_bench(args):
    from .data import load_dataset
    from .diffusion import make_schedule
    from .gnn import load_checkpoint
    from .sampling import (DiffusionSampler, DiscriminativePredictor, FlowHeuristic,
                           SampleConfig, cross_scale_heatmap, run_benchmark)
    from .solvers import HeuristicConfig

    opts = _resolve(args, BENCH_DEFAULTS, "bench")
    ckpts = dict(kv.split("=", 1) for kv in (args.ckpt or []))
    data_paths = dict(kv.split("=", 1) for kv in (args.data or []))
    if not data_paths:
        raise SchemaError("bench needs at least one --data name=path")
    missing = [f"{k}={v}" for k, v in ckpts.items() if not Path(v).exists()]
    if missing:
        raise MissingCheckpointError("checkpoints not found: " + ", ".join(missing))

    schedule = make_schedule(opts["diffusion_steps"], beta_min=opts["beta_min"],
                             beta_max=opts["beta_max"])
    scfg = SampleConfig(chains=opts["chains"], steps=opts["steps"], seed=args.seed,
                        edge_slots=opts["edge_slots"] or None)
    methods = []
    samplers = {}
    for name, path in ckpts.items():
        model = load_checkpoint(path)
        if name.startswith("discriminative"):
            methods.append(DiscriminativePredictor(model, scfg, name=name))
        else:
            sampler = DiffusionSampler(model, schedule, scfg, name=name)
            methods.append(sampler)
            samplers[name] = sampler
    methods.append(FlowHeuristic(HeuristicConfig(restarts=opts["restarts"]),
                                 name="heuristic"))

    datasets = {}
    for name, path in data_paths.items():
        _require(path, f"dataset {name}")
        records = list(load_dataset(path))
        datasets[name] = records[:opts["limit"]] if opts["limit"] else records

    out = Path(opts["out"])
    run_benchmark(methods, datasets, out)
    if opts["heatmap"] and samplers:
        cross_scale_heatmap(samplers, datasets, opts["heatmap"])
    _write_snapshot(out.parent, "bench", opts, args)
    print(json.dumps({"methods": [m.name for m in methods],
                      "datasets": list(datasets)}))
    return EXIT_OK


THEORY_FIG_DEFAULTS = dict(out="fig_curves.csv", n_max=30, epsilon=0.1,
                           gamma=0.04, delta=0.1, threshold=0.95)


def cmd_theory_fig3(args):
    from .bounds import fig_table

    opts = _resolve(args, THEORY_FIG_DEFAULTS, "theory-fig3")
    out = Path(opts["out"])
    rows = fig_table(epsilon=opts["epsilon"], gamma=opts["gamma"],
                     delta=opts["delta"], threshold=opts["threshold"],
                     n_max=opts["n_max"], out_csv=out)
    _write_snapshot(out.parent, "theory-fig3", opts, args)
    crossings = {f"{r[0]}-N{r[1]}": r[4] for r in rows}
    print(json.dumps({"rows": len(rows), "crossings": crossings}, sort_keys=True))
    return EXIT_OK


THEORY_BOUND_DEFAULTS = dict(space="discrete", N=10, epsilon=0.1, sigma2=1e-4,
                             gamma=0.04, delta=0.1, a=0.01, p_eps=0.02,
                             threshold=0.95)


def cmd_theory_bound(args):
    from .bounds import TheoryParams, sample_lower_bound

    opts = _resolve(args, THEORY_BOUND_DEFAULTS, "theory-bound")
    params = TheoryParams(N=opts["N"], epsilon=opts["epsilon"], sigma2=opts["sigma2"],
                          gamma=opts["gamma"], delta=opts["delta"], a=opts["a"],
                          threshold=opts["threshold"])
    result = sample_lower_bound(params, p_eps=opts["p_eps"], space=opts["space"])
    print(json.dumps({"raw_value": result.raw_value,
                      "min_samples": result.min_samples,
                      "single_draw_p": result.single_draw_p}))
    return EXIT_OK


PROBE_DEFAULTS = dict(data="", out="ortho.csv", steps=200, batch_size=64,
                      task_mode="multi", hidden=64, layers=3, time_dim=32,
                      lr=2e-4, diffusion_steps=200, beta_min=1e-4, beta_max=0.1)


def cmd_grad_probe(args):
    from .data import load_dataset
    from .gnn import GnnConfig, init_params
    from .training import TrainConfig, train

    opts = _resolve(args, PROBE_DEFAULTS, "grad-probe")
    _require(opts["data"], "dataset")
    records = list(load_dataset(opts["data"]))
    model = init_params(GnnConfig(hidden_dim=opts["hidden"], num_layers=opts["layers"],
                                  time_dim=opts["time_dim"]), seed=args.seed)
    steps_per_epoch = max(1, -(-len(records) * 95 // 100 // opts["batch_size"]))
    epochs = max(1, -(-opts["steps"] // steps_per_epoch))
    cfg = TrainConfig(epochs=epochs, batch_size=opts["batch_size"], lr=opts["lr"],
                      seed=args.seed, task_mode=opts["task_mode"],
                      diffusion_steps=opts["diffusion_steps"],
                      beta_min=opts["beta_min"], beta_max=opts["beta_max"],
                      probe_every=1, probe_limit=opts["steps"])
    result = train(model, records, cfg)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result.ortho.to_csv(out)
    _write_snapshot(out.parent, "grad-probe", opts, args)
    print(json.dumps({
        "probed_steps": result.ortho.num_steps(),
        "proportion_below_0.15": result.ortho.proportion_below(0.15),
        "undefined": result.ortho.undefined_count(),
    }))
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_opts(sub, defaults, skip=()):
    """Mirror a defaults dict as optional flags (None = not given)."""
    for key, value in defaults.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            group = sub.add_mutually_exclusive_group()
            group.add_argument(flag, dest=key, action="store_true", default=None)
            group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_false", default=None)
        else:
            sub.add_argument(flag, dest=key, type=type(value), default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="offdiff",
        description="Computation-offloading pipeline: datasets, solvers, "
                    "graph-diffusion training/sampling, benchmarks, and "
                    "sampling-theory calculators.")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (1 = strict determinism)")
    parser.add_argument("--config", default=os.environ.get("OFFDIFF_CONFIG"),
                        help="INI config file; sections per subcommand")

    # the global flags are also accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)

    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("gen-data", parents=[common],
                         help="generate and label a dataset")
    _add_opts(sp, GEN_DEFAULTS)
    sp.set_defaults(func=cmd_gen_data)

    sp = subs.add_parser("solve-heu", parents=[common],
                         help="flow-heuristic costs on a dataset")
    _add_opts(sp, SOLVE_DEFAULTS, skip=("budget",))
    sp.set_defaults(func=cmd_solve_heu)

    sp = subs.add_parser("solve-exact", parents=[common],
                         help="exhaustive optimal costs on a dataset")
    _add_opts(sp, SOLVE_DEFAULTS, skip=("restarts", "perturbation"))
    sp.set_defaults(func=cmd_solve_exact)

    sp = subs.add_parser("train", parents=[common],
                         help="train the diffusion (or baseline) model")
    _add_opts(sp, TRAIN_DEFAULTS)
    sp.set_defaults(func=cmd_train)

    sp = subs.add_parser("sample", parents=[common],
                         help="sample solutions with a trained model")
    _add_opts(sp, SAMPLE_DEFAULTS)
    sp.set_defaults(func=cmd_sample)

    sp = subs.add_parser("eval", parents=[common],
                         help="Exceed_ratio report for a checkpoint")
    _add_opts(sp, EVAL_DEFAULTS)
    sp.set_defaults(func=cmd_eval)

    sp = subs.add_parser("bench", parents=[common],
                         help="compare methods across datasets")
    _add_opts(sp, BENCH_DEFAULTS)
    sp.add_argument("--ckpt", action="append", metavar="NAME=PATH",
                    help="model checkpoint (repeatable); names starting with "
                         "'discriminative' run as direct predictors")
    sp.add_argument("--data", action="append", metavar="NAME=PATH",
                    help="exact-labeled dataset (repeatable)")
    sp.set_defaults(func=cmd_bench)

    sp = subs.add_parser("theory", help="sampling-theory calculators")
    tsubs = sp.add_subparsers(dest="theory_command", required=True)
    tp = tsubs.add_parser("fig3", parents=[common],
                          help="hit-probability curves CSV")
    _add_opts(tp, THEORY_FIG_DEFAULTS)
    tp.set_defaults(func=cmd_theory_fig3)
    tp = tsubs.add_parser("bound", parents=[common],
                          help="sample-count lower bound")
    _add_opts(tp, THEORY_BOUND_DEFAULTS)
    tp.set_defaults(func=cmd_theory_bound)

    sp = subs.add_parser("grad-probe", parents=[common],
                         help="task-gradient orthogonality probe")
    _add_opts(sp, PROBE_DEFAULTS)
    sp.set_defaults(func=cmd_grad_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    os.environ.setdefault("OPENBLAS_NUM_THREADS", str(args.threads))
    try:
        return args.func(args)
    except OffdiffError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
