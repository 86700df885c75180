"""Dataset construction and JSONL (de)serialization.

Datasets come in two families named ``lq{K}s{M}u`` (labeled by the
randomized flow heuristic) and ``gt{K}s{M}u`` (labeled exhaustively); an
optional ``-suffix`` distinguishes variants such as ``lq3s6u-mini``. Each
dataset is one JSON object per line plus a ``<name>.manifest.json`` sidecar
describing how it was generated. Numeric fields are serialized with
Python's shortest round-trip float repr, so write -> read is lossless.

Record schema (schema_version 1), one object per line::

    {
      "schema": 1,
      "generator_seed": [<campaign seed>, <record index>],
      "label_kind": "heuristic" | "exact",
      "label_cost": <float>,
      "instance": {
        "num_servers": int, "num_users": int,
        "edge_user": [int], "edge_server": [int],
        "c_local": [float], "c_trans": [float], "c_offload_full": [float],
        "rho": [float], "psi": [float],
        "input_bits": [float], "cycles": [float], "local_compute": [float],
        "alpha": [float], "channel_gain": [float], "tau_max": [float],
        "bandwidth": float, "tx_power": float, "noise": float,
        "server_compute": float, "server_power": float, "kappa": float,
        "include_interference": bool
      },
      "solution": {"decisions": [int], "allocations": [float]}
    }

Instances are regenerable from ``generator_seed`` plus the manifest's
gen_config; campaigns with distinct seeds draw disjoint instance streams,
which is how train/test separation is guaranteed.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import CorruptRecordError, SchemaError
from .problem import GenConfig, OffloadInstance, Solution, check_feasible, generate_instance, objective
from .solvers import HeuristicConfig, exact_solve, heuristic_best

SCHEMA_VERSION = 1
_NAME_RE = re.compile(r"^(lq|gt)(\d+)s(\d+)u(?:-[A-Za-z0-9_]+)?$")

__all__ = [
    "DatasetRecord",
    "DatasetManifest",
    "build_dataset",
    "load_dataset",
    "load_manifest",
    "instance_to_dict",
    "instance_from_dict",
    "parse_dataset_name",
]


def parse_dataset_name(name: str):
    """Split a dataset name into (family, K, M); raises SchemaError when malformed."""
    m = _NAME_RE.match(name)
    if not m:
        raise SchemaError(
            f"dataset name {name!r} does not match (lq|gt)<K>s<M>u[-suffix]"
        )
    return m.group(1), int(m.group(2)), int(m.group(3))


@dataclass(frozen=True)
class DatasetRecord:
    instance: OffloadInstance
    label_solution: Solution
    label_cost: float
    label_kind: str            # "heuristic" | "exact"
    generator_seed: tuple


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset byte-for-byte."""

    name: str
    count: int
    label_kind: str
    seed: int
    restarts: int = 8
    perturbation: float = 0.5
    offload_requires_rho: bool = True
    schema_version: int = SCHEMA_VERSION
    gen_config: Optional[GenConfig] = None

    def __post_init__(self):
        family, K, M = parse_dataset_name(self.name)
        expected_kind = "heuristic" if family == "lq" else "exact"
        if self.label_kind != expected_kind:
            raise SchemaError(
                f"dataset {self.name!r} implies label_kind {expected_kind!r}, "
                f"got {self.label_kind!r}"
            )
        cfg = self.gen_config or GenConfig(num_servers=K, num_users=M)
        if (cfg.num_servers, cfg.num_users) != (K, M):
            raise SchemaError(
                f"name {self.name!r} says {K} servers / {M} users but gen_config "
                f"has {cfg.num_servers} / {cfg.num_users}"
            )
        if self.gen_config is None:
            object.__setattr__(self, "gen_config", cfg)

    @property
    def scale(self):
        _, K, M = parse_dataset_name(self.name)
        return K, M


def instance_to_dict(inst: OffloadInstance) -> dict:
    d = {}
    for f in dataclasses.fields(OffloadInstance):
        v = getattr(inst, f.name)
        d[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return d


def instance_from_dict(d: dict) -> OffloadInstance:
    kwargs = {}
    for f in dataclasses.fields(OffloadInstance):
        v = d[f.name]
        if isinstance(v, list):
            dtype = np.int64 if f.name in ("edge_user", "edge_server") else np.float64
            v = np.asarray(v, dtype=dtype)
        kwargs[f.name] = v
    return OffloadInstance(**kwargs)


def _record_to_json(rec: DatasetRecord) -> str:
    payload = {
        "schema": SCHEMA_VERSION,
        "generator_seed": list(rec.generator_seed),
        "label_kind": rec.label_kind,
        "label_cost": rec.label_cost,
        "instance": instance_to_dict(rec.instance),
        "solution": {
            "decisions": rec.label_solution.decisions.tolist(),
            "allocations": rec.label_solution.allocations.tolist(),
        },
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _record_from_payload(payload: dict, line_no: int, validate: bool) -> DatasetRecord:
    if payload.get("schema") != SCHEMA_VERSION:
        raise SchemaError(
            f"line {line_no}: schema version {payload.get('schema')!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    inst = instance_from_dict(payload["instance"])
    sol = Solution(
        decisions=np.asarray(payload["solution"]["decisions"], dtype=np.int64),
        allocations=np.asarray(payload["solution"]["allocations"], dtype=np.float64),
    )
    rec = DatasetRecord(
        instance=inst,
        label_solution=sol,
        label_cost=float(payload["label_cost"]),
        label_kind=str(payload["label_kind"]),
        generator_seed=tuple(payload["generator_seed"]),
    )
    if validate:
        violations = check_feasible(inst, sol)
        if violations:
            raise CorruptRecordError(
                line_no, "label solution infeasible: " + "; ".join(map(str, violations))
            )
        cost = objective(inst, sol)
        if abs(cost - rec.label_cost) > 1e-9 * max(1.0, abs(cost)):
            raise CorruptRecordError(
                line_no, f"label_cost {rec.label_cost} != objective {cost}"
            )
    return rec


def _label(inst, manifest: DatasetManifest, record_seed):
    if manifest.label_kind == "exact":
        sol, cost = exact_solve(inst, offload_requires_rho=manifest.offload_requires_rho)
        return sol, cost
    cfg = HeuristicConfig(restarts=manifest.restarts, perturbation=manifest.perturbation,
                          seed=record_seed)
    sol = heuristic_best(inst, cfg, offload_requires_rho=manifest.offload_requires_rho)
    return sol, objective(inst, sol)


def build_dataset(manifest: DatasetManifest, out_path) -> dict:
    """Generate, label, and write ``manifest.count`` records.

    Record i draws its instance from the seed sequence
    [manifest.seed, i], so regeneration is deterministic and independent of
    write order. Returns summary statistics: mean label cost, mean offload
    fraction, and (for exact-labeled sets) the mean heuristic/exact cost
    ratio as a quality audit.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    costs, offload_fracs, heu_ratios = [], [], []
    with open(out_path, "w", encoding="utf-8") as fh:
        for i in range(manifest.count):
            inst = generate_instance(manifest.gen_config, seed=[manifest.seed, i])
            sol, cost = _label(inst, manifest, record_seed=manifest.seed + i)
            rec = DatasetRecord(
                instance=inst,
                label_solution=sol,
                label_cost=cost,
                label_kind=manifest.label_kind,
                generator_seed=(manifest.seed, i),
            )
            fh.write(_record_to_json(rec) + "\n")
            costs.append(cost)
            offload_fracs.append(sol.decisions.sum() / inst.num_users)
            if manifest.label_kind == "exact":
                heu = heuristic_best(
                    inst,
                    HeuristicConfig(restarts=manifest.restarts,
                                    perturbation=manifest.perturbation,
                                    seed=manifest.seed + i),
                    offload_requires_rho=manifest.offload_requires_rho,
                )
                heu_ratios.append(objective(inst, heu) / cost)

    manifest_path = out_path.with_suffix("").with_suffix(".manifest.json")
    manifest_dict = dataclasses.asdict(manifest)
    manifest_path.write_text(
        json.dumps(manifest_dict, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    summary = {
        "count": manifest.count,
        "mean_label_cost": float(np.mean(costs)),
        "mean_offload_fraction": float(np.mean(offload_fracs)),
    }
    if heu_ratios:
        summary["mean_heu_over_exact"] = float(np.mean(heu_ratios))
    return summary


def load_manifest(data_path) -> DatasetManifest:
    path = Path(data_path).with_suffix("").with_suffix(".manifest.json")
    if not path.exists():
        raise SchemaError(f"manifest not found: {path}")
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"manifest schema version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    gen = d.pop("gen_config", None)
    manifest = DatasetManifest(
        **{k: d[k] for k in ("name", "count", "label_kind", "seed", "restarts",
                             "perturbation", "offload_requires_rho", "schema_version")},
        gen_config=GenConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in gen.items()}) if gen else None,
    )
    return manifest


def load_dataset(path, validate: bool = True) -> Iterator[DatasetRecord]:
    """Stream records from a JSONL dataset.

    Each record's label feasibility and cost are re-checked unless
    ``validate=False``. Malformed lines raise CorruptRecordError carrying
    the 1-based line number; a schema mismatch raises SchemaError.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecordError(line_no, f"invalid JSON ({exc})") from exc
            yield _record_from_payload(payload, line_no, validate)
