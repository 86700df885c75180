"""Training loops: multi-task diffusion, the discriminative baseline, and
the task-gradient orthogonality probe.

The diffusion trainer draws one step t per graph, noises the label
solution (decision one-hots through the categorical kernel, rescaled
allocations through the Gaussian kernel), and optimizes

    loss = w_d * CE(discrete head, clean decisions)
         + w_c * MSE(continuous head, injected noise)

averaged over real (non-padding) edges only. The discriminative mode
feeds the clean graph (zeroed solution channels, t = 0) and regresses the
labels directly with the same two heads; it doubles as the control arm for
the orthogonality analysis.

The probe backpropagates each task loss separately at a configurable
cadence and records the cosine between the two gradient vectors for every
tracked parameter block, plus the overall flattened cosine.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .diffusion import DiffusionSchedule, make_schedule, rescale_to_diffusion
from .gnn import BatchedGraph, GnnModel, batch_instances, forward_tape, save_checkpoint

__all__ = [
    "TrainConfig",
    "LabeledBatch",
    "make_labeled_batch",
    "compute_losses",
    "Adam",
    "train",
    "train_discriminative",
    "probe_orthogonality",
    "OrthoReport",
    "default_tracked_layers",
    "TrainResult",
]

TASK_MODES = ("multi", "discrete-only", "continuous-only", "discriminative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-4
    lr_end: float = 1e-5
    weight_decay: float = 0.0
    weight_discrete: float = 1.0
    weight_continuous: float = 1.0
    seed: int = 0
    val_fraction: float = 0.05
    task_mode: str = "multi"
    diffusion_steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.1
    probe_every: int = 0          # probe cadence in steps; 0 disables
    probe_limit: int = 0          # max probed steps; 0 = unlimited
    probe_start: int = 0          # first step eligible for probing
    edge_slots: Optional[int] = None  # fixed edge padding; None = per-batch max

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}")

    def make_schedule(self) -> DiffusionSchedule:
        return make_schedule(self.diffusion_steps, beta_min=self.beta_min,
                             beta_max=self.beta_max)


@dataclass
class LabeledBatch:
    graph: BatchedGraph
    y0_onehot: np.ndarray   # (B*E, 2) clean decision one-hots (padding: class 0)
    y0_value: np.ndarray    # (B*E,) clean allocations rescaled to [-1, 1]


def make_labeled_batch(records, edge_slots=None) -> LabeledBatch:
    graph = batch_instances([r.instance for r in records], edge_slots=edge_slots)
    E = graph.edge_slots
    y0_onehot = np.zeros((graph.total_edges, 2))
    y0_onehot[:, 0] = 1.0
    y0_value = np.full(graph.total_edges, -1.0)
    for g, rec in enumerate(records):
        L = rec.instance.num_edges
        sl = slice(g * E, g * E + L)
        d = rec.label_solution.decisions
        y0_onehot[sl] = np.stack([1.0 - d, d], axis=1)
        y0_value[sl] = rescale_to_diffusion(rec.label_solution.allocations)
    return LabeledBatch(graph, y0_onehot, y0_value)


def _noise_batch(lbatch: LabeledBatch, schedule: DiffusionSchedule, rng):
    """Per-graph t, then per-edge categorical/Gaussian noising of the labels."""
    g = lbatch.graph
    t = rng.integers(1, schedule.T + 1, size=g.num_graphs)
    t_edge = t[g.edge_graph]

    stay = 0.5 * (1.0 + schedule.mix[t_edge])          # P(y_t = y0) per edge
    flip = rng.random(g.total_edges) >= stay
    state1 = np.abs(lbatch.y0_onehot[:, 1] - flip)     # xor with the flip draw
    noisy_disc = np.stack([1.0 - state1, state1], axis=1)

    ab = schedule.alpha_bar[t_edge]
    eps = rng.standard_normal(g.total_edges)
    noisy_cont = np.sqrt(ab) * lbatch.y0_value + np.sqrt(1.0 - ab) * eps
    return t, noisy_disc, noisy_cont, eps


def compute_losses(model: GnnModel, lbatch: LabeledBatch, schedule: DiffusionSchedule,
                   rng, task_mode: str = "multi"):
    """Build the two task losses on the tape.

    Returns (loss_discrete, loss_continuous, leaves); the loss tensors are
    means over real edges (padding contributes exactly zero), and `leaves`
    maps parameter names to tensors for gradient readout.
    """
    if task_mode not in TASK_MODES:
        raise ValueError(f"task_mode must be one of {TASK_MODES}")
    g = lbatch.graph
    n_real = float(g.edge_mask.sum())
    if n_real == 0:
        raise ValueError("batch has no real edges")

    if task_mode == "discriminative":
        t = np.zeros(g.num_graphs)
        noisy_disc = np.zeros((g.total_edges, 2))
        noisy_cont = np.zeros(g.total_edges)
        cont_target = lbatch.y0_value
        # allocations only mean something on offloaded edges; regressing the
        # rest would chase padding conventions rather than the solution
        cont_mask = g.edge_mask * lbatch.y0_onehot[:, 1:2]
    else:
        t, noisy_disc, noisy_cont, eps = _noise_batch(lbatch, schedule, rng)
        cont_target = eps
        cont_mask = g.edge_mask

    logits, eps_hat, leaves, _ = forward_tape(model, g, noisy_disc, noisy_cont, t)

    mask = ad.constant(g.edge_mask)
    onehot = ad.constant(lbatch.y0_onehot)
    ce = ad.mul(ad.mul(ad.log_softmax(logits), onehot), mask)
    loss_d = ad.scale(ad.tsum(ce), -1.0 / n_real)

    target = ad.constant(cont_target.reshape(-1, 1))
    se = ad.mul(ad.square(ad.sub(eps_hat, target)), ad.constant(cont_mask))
    n_cont = float(cont_mask.sum())
    loss_c = ad.scale(ad.tsum(se), 1.0 / max(n_cont, 1.0))
    return loss_d, loss_c, leaves


class Adam:
    """Adaptive-moment optimizer over a named parameter dict (in-place)."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def _cosine(a: np.ndarray, b: np.ndarray):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(a, b) / (na * nb))


def default_probe_blocks(model: GnnModel) -> dict:
    """Parameter groups compared by the orthogonality probe.

    Six blocks: the two embeddings, each conv layer, and the output
    (node-path) normalization of the final conv module as its own block.
    """
    S = model.config.num_layers
    blocks = {"node_embed": ["node_embed."], "edge_embed": ["edge_embed."]}
    for i in range(S):
        blocks[f"conv{i}"] = [f"layer{i}."]
    blocks["last_norm"] = [f"layer{S-1}.node_norm."]
    return blocks


def default_tracked_layers(model: GnnModel):
    """Prefix list covering every block in ``default_probe_blocks``."""
    return ["node_embed", "edge_embed"] + [
        f"layer{i}" for i in range(model.config.num_layers)
    ]


@dataclass
class ProbeEntry:
    step: int
    block_cosines: dict      # parameter name -> cosine (None if undefined)
    overall_cosine: Optional[float]


@dataclass
class OrthoReport:
    """Per-step task-gradient cosines for the tracked parameter blocks."""

    entries: list = field(default_factory=list)

    def num_steps(self) -> int:
        return len(self.entries)

    def proportion_below(self, threshold: float) -> float:
        """Fraction of (step, block) pairs with |cosine| < threshold.

        Undefined cosines (zero-norm gradients) are excluded from both
        numerator and denominator; ``undefined_count`` tracks them.
        """
        total = hits = 0
        for entry in self.entries:
            for c in entry.block_cosines.values():
                if c is None:
                    continue
                total += 1
                hits += abs(c) < threshold
        return hits / total if total else float("nan")

    def undefined_count(self) -> int:
        return sum(1 for e in self.entries
                   for c in e.block_cosines.values() if c is None)

    def to_csv(self, path):
        blocks = sorted({k for e in self.entries for k in e.block_cosines})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "overall"] + blocks)
            for e in self.entries:
                row = [e.step, e.overall_cosine]
                row += [e.block_cosines.get(b) for b in blocks]
                w.writerow(row)


def probe_orthogonality(model: GnnModel, lbatch: LabeledBatch,
                        schedule: DiffusionSchedule, blocks, rng,
                        task_mode: str = "multi", step: int = 0,
                        draws: int = 4) -> ProbeEntry:
    """Backpropagate each task loss separately and compare gradient directions.

    Each task's gradient is estimated from its own forward passes and
    averaged over ``draws`` independent noising draws, so the comparison
    reflects the tasks' expected gradients rather than one noise sample;
    the noise-free discriminative mode is unaffected by the averaging.
    ``blocks`` maps block names to parameter-name prefixes (see
    default_probe_blocks); the cosine is taken between the flattened
    per-block gradients, plus one overall cosine across all tracked
    parameters.
    """
    if not blocks:
        raise ValueError("no probe blocks given")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if task_mode == "discriminative":
        draws = 1   # deterministic forward; repeated draws are identical
    tracked_prefixes = sorted({p for prefs in blocks.values() for p in prefs})

    def task_gradient(which):
        acc = None
        for _ in range(draws):
            loss_d, loss_c, leaves = compute_losses(model, lbatch, schedule, rng,
                                                    task_mode)
            tracked = [n for n in leaves
                       if any(n.startswith(p) for p in tracked_prefixes)]
            if not tracked:
                raise ValueError(f"no parameters match probe blocks {list(blocks)}")
            ad.backward(loss_d if which == "discrete" else loss_c)
            if acc is None:
                acc = {n: leaves[n].grad.copy() for n in tracked}
            else:
                for n in tracked:
                    acc[n] += leaves[n].grad
        return acc

    grads_d = task_gradient("discrete")
    grads_c = task_gradient("continuous")

    block_cos = {}
    for name, prefixes in blocks.items():
        params = [n for n in grads_d if any(n.startswith(p) for p in prefixes)]
        a = np.concatenate([grads_d[n].ravel() for n in params])
        b = np.concatenate([grads_c[n].ravel() for n in params])
        block_cos[name] = _cosine(a, b)
    overall = _cosine(np.concatenate([g.ravel() for g in grads_d.values()]),
                      np.concatenate([g.ravel() for g in grads_c.values()]))
    return ProbeEntry(step=step, block_cosines=block_cos, overall_cosine=overall)


@dataclass
class TrainResult:
    model: GnnModel
    metrics: list           # one dict per epoch
    schedule: DiffusionSchedule
    ortho: Optional[OrthoReport]
    best_val: float


def _epoch_losses(model, records, schedule, rng, cfg):
    """Mean task losses over a record list without updating parameters."""
    totals = np.zeros(2)
    count = 0
    for lo in range(0, len(records), cfg.batch_size):
        chunk = records[lo: lo + cfg.batch_size]
        lbatch = make_labeled_batch(chunk, edge_slots=cfg.edge_slots)
        ld, lc, _ = compute_losses(model, lbatch, schedule, rng, cfg.task_mode)
        totals += (ld.value * len(chunk), lc.value * len(chunk))
        count += len(chunk)
    return totals / count


def train(model: GnnModel, records, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Optimize the model on labeled records; returns the best-validation model.

    Deterministic for a fixed config and seed. Emits one metrics row per
    epoch; when ``out_dir`` is given, writes metrics.csv, best.npz, and
    (if probing) ortho.csv there. Raises RuntimeError with step diagnostics
    if a loss goes non-finite.
    """
    records = list(records)
    if not records:
        raise ValueError("training requires a nonempty dataset")
    schedule = cfg.make_schedule()
    root = np.random.SeedSequence(cfg.seed)
    shuffle_rng, noise_rng, probe_rng, split_rng, val_rng = (
        np.random.default_rng(s) for s in root.spawn(5)
    )

    n_val = int(round(cfg.val_fraction * len(records)))
    perm = split_rng.permutation(len(records))
    val_records = [records[i] for i in perm[:n_val]]
    train_records = [records[i] for i in perm[n_val:]]
    if not train_records:
        raise ValueError("validation split consumed every record")

    optimizer = Adam(model.params, weight_decay=cfg.weight_decay)
    total_steps = max(1, cfg.epochs * math.ceil(len(train_records) / cfg.batch_size))
    probe_blocks = default_probe_blocks(model)
    ortho = OrthoReport() if cfg.probe_every > 0 else None

    metrics = []
    best_val = math.inf
    best_params = model.copy().params
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_records))
        sum_d = sum_c = 0.0
        nb = 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train_records[i] for i in order[lo: lo + cfg.batch_size]]
            lbatch = make_labeled_batch(chunk, edge_slots=cfg.edge_slots)

            lr = cfg.lr_end + 0.5 * (cfg.lr - cfg.lr_end) * (
                1.0 + math.cos(math.pi * step / total_steps))
            loss_d, loss_c, leaves = compute_losses(
                model, lbatch, schedule, noise_rng, cfg.task_mode)
            if cfg.task_mode == "discrete-only":
                total = ad.scale(loss_d, cfg.weight_discrete)
            elif cfg.task_mode == "continuous-only":
                total = ad.scale(loss_c, cfg.weight_continuous)
            else:
                total = ad.add(ad.scale(loss_d, cfg.weight_discrete),
                               ad.scale(loss_c, cfg.weight_continuous))
            if not (np.isfinite(loss_d.value) and np.isfinite(loss_c.value)):
                raise RuntimeError(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3e}): "
                    f"loss_d={loss_d.value}, loss_c={loss_c.value}"
                )
            ad.backward(total)
            grads = {k: leaves[k].grad for k in model.params}
            optimizer.step(model.params, grads, lr)

            if (ortho is not None and step >= cfg.probe_start
                    and (step - cfg.probe_start) % cfg.probe_every == 0
                    and (cfg.probe_limit == 0 or ortho.num_steps() < cfg.probe_limit)):
                probe_mode = "multi" if cfg.task_mode != "discriminative" else "discriminative"
                ortho.entries.append(probe_orthogonality(
                    model, lbatch, schedule, probe_blocks, probe_rng, probe_mode, step))

            sum_d += loss_d.value
            sum_c += loss_c.value
            nb += 1
            step += 1

        val_d, val_c = (_epoch_losses(model, val_records, schedule, val_rng, cfg)
                        if val_records else (math.nan, math.nan))
        val_total = (val_d if cfg.task_mode == "discrete-only"
                     else val_c if cfg.task_mode == "continuous-only"
                     else val_d + val_c)
        row = {
            "epoch": epoch,
            "train_loss_discrete": sum_d / nb,
            "train_loss_continuous": sum_c / nb,
            "val_loss_discrete": val_d,
            "val_loss_continuous": val_c,
            "lr": lr,
        }
        metrics.append(row)
        if not val_records or val_total < best_val:
            best_val = val_total if val_records else math.nan
            best_params = {k: v.copy() for k, v in model.params.items()}

    best_model = GnnModel(model.config, best_params)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best_model, out / "best.npz")
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(metrics[0]))
            w.writeheader()
            w.writerows(metrics)
        if ortho is not None:
            ortho.to_csv(out / "ortho.csv")
    return TrainResult(model=best_model, metrics=metrics, schedule=schedule,
                       ortho=ortho, best_val=best_val)


def train_discriminative(model: GnnModel, records, cfg: TrainConfig,
                         out_dir=None) -> TrainResult:
    """Train the same architecture as a direct predictor (no diffusion)."""
    cfg = dataclasses.replace(cfg, task_mode="discriminative")
    return train(model, records, cfg, out_dir=out_dir)
