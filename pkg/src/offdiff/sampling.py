"""Parallel solution sampling, feasibility decoding, and benchmark harness.

Inference runs n independent reverse-diffusion chains on copies of one
instance batched together (the network forward is shared; the random draws
are per-chain so the first n chains of a longer run are bit-identical to a
shorter run, making best-of-n monotone). Each chain ends with a per-edge
offload probability vector theta and a continuous value per edge; `decode`
turns them into a feasible solution by construction, and the best candidate
under the true objective wins.

The same harness evaluates the discriminative baseline (one forward, no
chains) and the flow heuristic, and writes benchmark/heatmap CSVs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .diffusion import (DiffusionSchedule, continuous_denoise_step, ddim_step_pairs,
                        discrete_denoise_step, discrete_jump_posterior,
                        rescale_from_diffusion)
from .gnn import GnnModel, batch_instances, forward
from .problem import OffloadInstance, Solution, objective
from .solvers import HeuristicConfig, heuristic_best

__all__ = [
    "SampleConfig",
    "decode",
    "decode_with_info",
    "DecodeInfo",
    "run_chains",
    "sample_solutions",
    "exceed_ratio",
    "EvalReport",
    "evaluate_method",
    "DiffusionSampler",
    "DiscriminativePredictor",
    "FlowHeuristic",
    "run_benchmark",
    "cross_scale_heatmap",
    "empirical_generation_variance",
]


@dataclass(frozen=True)
class SampleConfig:
    chains: int = 16
    steps: int = 5
    mode: str = "ddim"              # "ddim" | "ancestral"
    seed: int = 0
    offload_threshold: float = 0.5
    a_min: float = 1e-3
    offload_requires_rho: bool = True
    edge_slots: Optional[int] = None  # pad chains to this many edge slots

    def __post_init__(self):
        if self.chains < 1 or self.steps < 1:
            raise ValueError("chains and steps must be >= 1")
        if self.mode not in ("ddim", "ancestral"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class DecodeInfo:
    feasible_before_repair: bool
    repaired_servers: int


def _softmax2(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decode_with_info(inst: OffloadInstance, discrete_probs, continuous_values,
                     cfg: SampleConfig):
    """Greedy feasible decoding of per-edge head outputs.

    Per user, the edge with the highest offload probability (ties to the
    lowest edge index) offloads iff that probability exceeds the threshold
    and, when rho gating is on, the edge can meet its deadline. Allocations
    are the clamped rescaled continuous values; any server whose chosen
    allocations exceed capacity is repaired by proportional rescaling,
    which preserves decisions and relative proportions. The result is
    feasible for arbitrary head outputs.
    """
    probs = np.asarray(discrete_probs, dtype=np.float64)
    alloc = rescale_from_diffusion(continuous_values)
    alloc = np.clip(alloc, cfg.a_min, 1.0)

    decisions = np.zeros(inst.num_edges, dtype=np.int64)
    for j in range(inst.num_users):
        edges = inst.edges_of_user(j)
        best = edges[int(np.argmax(probs[edges]))]
        if probs[best] > cfg.offload_threshold and (
                not cfg.offload_requires_rho or inst.rho[best] > 0.0):
            decisions[best] = 1

    repaired = 0
    load = np.bincount(inst.edge_server, weights=np.where(decisions == 1, alloc, 0.0),
                       minlength=inst.num_servers)
    for k in np.flatnonzero(load > 1.0):
        chosen = (decisions == 1) & (inst.edge_server == k)
        alloc[chosen] /= load[k]
        repaired += 1
    return (Solution(decisions=decisions, allocations=alloc),
            DecodeInfo(feasible_before_repair=repaired == 0, repaired_servers=repaired))


def decode(inst: OffloadInstance, discrete_probs, continuous_values,
           cfg: SampleConfig) -> Solution:
    sol, _ = decode_with_info(inst, discrete_probs, continuous_values, cfg)
    return sol


def run_chains(model: GnnModel, inst: OffloadInstance, schedule: DiffusionSchedule,
               cfg: SampleConfig, chain_seeds):
    """Run one reverse chain per seed; returns (theta, values), each (n, L).

    theta[i] is chain i's final per-edge offload probability (the
    y0-posterior of the last denoise step) and values[i] the final
    continuous state mapped back from diffusion space lazily by the caller.
    """
    n = len(chain_seeds)
    batch = batch_instances([inst] * n, edge_slots=cfg.edge_slots)
    E = batch.edge_slots
    L = inst.num_edges
    rngs = [np.random.default_rng(np.random.SeedSequence(s)) for s in chain_seeds]

    nd = np.zeros((n * E, 2))
    nc = np.zeros(n * E)
    for i, rng in enumerate(rngs):
        ones = rng.integers(0, 2, E).astype(np.float64)
        nd[i * E:(i + 1) * E] = np.stack([1.0 - ones, ones], axis=1)
        nc[i * E:(i + 1) * E] = rng.standard_normal(E)

    if cfg.mode == "ddim":
        pairs = ddim_step_pairs(schedule.T, cfg.steps)
    else:
        pairs = [(t, t - 1) for t in range(schedule.T, 0, -1)]

    theta = np.zeros((n, L))
    values = np.zeros((n, L))
    for t, s in pairs:
        logits, eps_hat = forward(model, batch, nd, nc, np.full(n, t))
        probs = _softmax2(logits)
        for i, rng in enumerate(rngs):
            rows = slice(i * E, (i + 1) * E)
            if s > 0:
                nd[rows] = discrete_denoise_step(
                    nd[rows], probs[rows], t, schedule, rng,
                    mode="ddim" if cfg.mode == "ddim" else "ancestral",
                    s=s if cfg.mode == "ddim" else None)
            else:
                post = discrete_jump_posterior(nd[rows], probs[rows], t, 0, schedule)
                theta[i] = post[:L, 1]
            nc[rows] = continuous_denoise_step(
                nc[rows], eps_hat[rows, 0], t, schedule, rng, mode=cfg.mode,
                s=s if cfg.mode == "ddim" else None)
        if s == 0:
            for i in range(n):
                values[i] = nc[i * E: i * E + L]
    return theta, values


@dataclass
class SampleResult:
    best: Solution
    best_cost: float
    candidates: list          # (Solution, cost, DecodeInfo) per chain
    theta: np.ndarray         # (n, L) final offload probabilities
    values: np.ndarray        # (n, L) final continuous states (diffusion space)


def sample_solutions(model: GnnModel, inst: OffloadInstance,
                     schedule: DiffusionSchedule, cfg: SampleConfig) -> SampleResult:
    """Best feasible solution out of ``cfg.chains`` parallel reverse chains."""
    seeds = [[cfg.seed, i] for i in range(cfg.chains)]
    theta, values = run_chains(model, inst, schedule, cfg, seeds)
    candidates = []
    best, best_cost = None, np.inf
    for i in range(cfg.chains):
        sol, info = decode_with_info(inst, theta[i], values[i], cfg)
        cost = objective(inst, sol)
        candidates.append((sol, cost, info))
        if cost < best_cost:
            best, best_cost = sol, cost
    return SampleResult(best=best, best_cost=best_cost, candidates=candidates,
                        theta=theta, values=values)


def exceed_ratio(inst: OffloadInstance, sol: Solution, label_cost: float) -> float:
    """Solution cost over label cost; 1.0 matches the label exactly."""
    if not (label_cost > 0):
        raise ValueError(f"label_cost must be positive, got {label_cost}")
    return objective(inst, sol) / label_cost


# --- benchmark methods -----------------------------------------------------

class DiffusionSampler:
    """Best-of-n diffusion sampling as a benchmark method."""

    def __init__(self, model, schedule, cfg: SampleConfig, name="diffusion"):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.name = name

    def solve(self, inst, seed=0):
        cfg = SampleConfig(**{**self.cfg.__dict__, "seed": seed})
        result = sample_solutions(self.model, inst, self.schedule, cfg)
        infos = [c[2] for c in result.candidates]
        return result.best, infos


class DiscriminativePredictor:
    """Direct prediction with the same network: one forward, no chains."""

    def __init__(self, model, cfg: SampleConfig, name="discriminative"):
        self.model = model
        self.cfg = cfg
        self.name = name

    def solve(self, inst, seed=0):
        batch = batch_instances([inst], edge_slots=self.cfg.edge_slots)
        E = batch.edge_slots
        logits, value_hat = forward(self.model, batch,
                                    np.zeros((batch.total_edges, 2)),
                                    np.zeros(batch.total_edges), np.zeros(1))
        probs = _softmax2(logits)[:inst.num_edges, 1]
        values = value_hat[:inst.num_edges, 0]
        sol, info = decode_with_info(inst, probs, values, self.cfg)
        return sol, [info]


class FlowHeuristic:
    """The randomized-allocation MCMF baseline."""

    def __init__(self, cfg: HeuristicConfig, offload_requires_rho=True, name="heuristic"):
        self.cfg = cfg
        self.offload_requires_rho = offload_requires_rho
        self.name = name

    def solve(self, inst, seed=0):
        cfg = HeuristicConfig(restarts=self.cfg.restarts,
                              perturbation=self.cfg.perturbation, seed=seed)
        sol = heuristic_best(inst, cfg, offload_requires_rho=self.offload_requires_rho)
        return sol, [DecodeInfo(feasible_before_repair=True, repaired_servers=0)]


@dataclass
class EvalReport:
    method: str
    dataset: str
    ratios: np.ndarray
    feasible_before_repair_rate: float
    total_repairs: int
    mean_seconds: float

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios))

    @property
    def p90_ratio(self) -> float:
        return float(np.quantile(self.ratios, 0.9))


def evaluate_method(method, records, dataset_name="") -> EvalReport:
    """Score a method against labeled records (Exceed_ratio per instance)."""
    ratios = []
    n_ok = 0
    n_infos = 0
    repairs = 0
    t0 = time.perf_counter()
    for idx, rec in enumerate(records):
        sol, infos = method.solve(rec.instance, seed=idx)
        ratios.append(exceed_ratio(rec.instance, sol, rec.label_cost))
        for info in infos:
            n_infos += 1
            n_ok += info.feasible_before_repair
            repairs += info.repaired_servers
    elapsed = time.perf_counter() - t0
    return EvalReport(
        method=getattr(method, "name", type(method).__name__),
        dataset=dataset_name,
        ratios=np.asarray(ratios),
        feasible_before_repair_rate=n_ok / max(n_infos, 1),
        total_repairs=repairs,
        mean_seconds=elapsed / max(len(ratios), 1),
    )


def run_benchmark(methods, datasets, out_csv) -> list:
    """Evaluate every method on every dataset; write one CSV row per pair.

    ``methods``: list of solver objects (with .name / .solve); ``datasets``:
    dict name -> list of exact-labeled records. The mean_seconds column is
    machine-dependent; all other columns are deterministic.
    """
    reports = []
    for ds_name, records in datasets.items():
        for method in methods:
            reports.append(evaluate_method(method, records, ds_name))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "mean_exceed_ratio", "p90_exceed_ratio",
                    "feasible_before_repair_rate", "total_repairs", "mean_seconds"])
        for r in reports:
            w.writerow([r.dataset, r.method, repr(r.mean_ratio), repr(r.p90_ratio),
                        repr(r.feasible_before_repair_rate), r.total_repairs,
                        f"{r.mean_seconds:.6f}"])
    return reports


def cross_scale_heatmap(samplers_by_trainset, datasets, out_csv) -> list:
    """Train-scale x test-scale grid of mean/p90 ratios (heatmap CSV)."""
    rows = []
    for train_name, sampler in samplers_by_trainset.items():
        for test_name, records in datasets.items():
            rep = evaluate_method(sampler, records, test_name)
            rows.append((train_name, test_name, rep.mean_ratio, rep.p90_ratio))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["train_set", "test_set", "mean_ratio", "p90_ratio"])
        for row in rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    return rows


def empirical_generation_variance(model: GnnModel, inst: OffloadInstance,
                                  schedule: DiffusionSchedule, cfg: SampleConfig,
                                  repeats: int = 1000, fixed_noise: bool = False):
    """Variance of the final offload probabilities across repeated inferences.

    Runs ``repeats`` single-chain inferences on the same instance and
    reports (per-edge variance, mean variance) of theta. With
    ``fixed_noise`` every repeat reuses the same initial noise seed, so a
    deterministic sampler yields exactly zero variance.
    """
    if repeats < 2:
        raise ValueError("variance needs at least 2 repeats")
    if fixed_noise:
        seeds = [[cfg.seed, 0] for _ in range(repeats)]
    else:
        seeds = [[cfg.seed, i] for i in range(repeats)]
    theta, _ = run_chains(model, inst, schedule, cfg, seeds)
    per_edge = theta.var(axis=0)
    return per_edge, float(per_edge.mean())
