"""Multi-server multi-user computation offloading (MSCO) problem definition.

An instance is a directed bipartite graph: user nodes point at the edge
servers they can reach. Each edge carries the cost terms of running that
user's task locally, transmitting it, and executing it on the server, plus
the deadline-derived quantities rho and psi. A solution assigns a binary
offloading decision D_i and a compute-allocation ratio A_i to every edge.

Cost model per edge (weights alpha in [0,1] trade delay vs. energy):

    c_local        = alpha * V / F_local + (1 - alpha) * kappa * V^2 * I
    c_trans        = alpha * I / r + (1 - alpha) * P_t * I / r
    c_offload_full = alpha * V / F + (1 - alpha) * P_e * V / F

with uplink rate r = B * log2(1 + SINR) and
SINR = P_t h_i^2 / (N_0 + P_t * sum of h_j^2 over *other* edges landing on
the same server). The interference sum can be disabled per instance
(``include_interference=False``), which models fully orthogonal uplinks.

The total cost of a solution is

    sum_i (1 - D_i) * c_local_i + D_i * (c_trans_i + c_offload_full_i / A_i)

subject to C1: D_i binary, C2: A_i in [0,1], C3: each user offloads on at
most one edge, C4: per server, sum of D_i * A_i <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import GenerationError, InfeasibleSolutionError, ShapeMismatchError

__all__ = [
    "GenConfig",
    "OffloadInstance",
    "Solution",
    "Violation",
    "generate_instance",
    "objective",
    "check_feasible",
    "all_local_solution",
    "recompute_edge_features",
]


@dataclass(frozen=True)
class GenConfig:
    """Sampling ranges for random instance generation.

    Defaults keep local vs. offload execution nontrivially balanced and
    leave roughly 10-30% of edges with rho = 0 (offload deadline
    unreachable). All ranges are uniform unless noted.
    """

    num_servers: int = 3
    num_users: int = 6
    degree_min: int = 1          # servers reachable per user (clipped to K)
    degree_max: int = 3
    input_bits: tuple = (1e5, 5e6)          # I, task upload size [bits]
    cycles: tuple = (1e8, 2e9)              # V, task work [cycles]
    local_compute: tuple = (0.5e9, 1.5e9)   # F_local [cycles/s]
    alpha: tuple = (0.3, 0.9)               # delay-vs-energy weight
    channel_gain: tuple = (0.3, 1.0)        # h per edge
    tau_max: tuple = (0.05, 1.0)            # task deadline [s], per user
    bandwidth: float = 1e6                  # B [Hz]
    tx_power: float = 0.5                   # P_t [W]
    noise: float = 1e-9                     # N_0 [W]
    server_compute: float = 10e9            # F [cycles/s]
    server_power: float = 5.0               # P_e [W]
    kappa: float = 1e-26                    # chip energy coefficient
    # Orthogonal uplinks by default; the cross-edge interference sum in the
    # SINR denominator is available but makes offloading uniformly
    # unattractive under these ranges.
    include_interference: bool = False
    max_retries: int = 100


@dataclass(frozen=True)
class OffloadInstance:
    """One MSCO problem instance with cached per-edge cost features.

    Edges are directed user -> server; ``edge_user[i]`` / ``edge_server[i]``
    give endpoint indices (users 0..M-1, servers 0..K-1). Node index space
    for graph models puts users first: node j is user j for j < M, node
    M + k is server k. Arrays are read-only after construction; instances
    are safe to share across threads.
    """

    num_servers: int
    num_users: int
    edge_user: np.ndarray       # (L,) int
    edge_server: np.ndarray     # (L,) int
    # 5-dim cached edge features
    c_local: np.ndarray         # (L,) float
    c_trans: np.ndarray
    c_offload_full: np.ndarray
    rho: np.ndarray             # minimum allocation ratio to meet tau; 0 = impossible
    psi: np.ndarray             # 1 iff local execution meets the deadline
    # raw per-edge parameters (edges of one user share I, V, F_local, alpha)
    input_bits: np.ndarray
    cycles: np.ndarray
    local_compute: np.ndarray
    alpha: np.ndarray
    channel_gain: np.ndarray
    tau_max: np.ndarray
    # instance-level parameters
    bandwidth: float
    tx_power: float
    noise: float
    server_compute: float
    server_power: float
    kappa: float
    include_interference: bool

    def __post_init__(self):
        for name in (
            "edge_user", "edge_server", "c_local", "c_trans", "c_offload_full",
            "rho", "psi", "input_bits", "cycles", "local_compute", "alpha",
            "channel_gain", "tau_max",
        ):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(self.edge_user.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_servers

    def node_types(self) -> np.ndarray:
        """Per-node flag, 1 = server, 0 = user (users occupy indices 0..M-1)."""
        types = np.zeros(self.num_nodes, dtype=np.int64)
        types[self.num_users:] = 1
        return types

    def edge_features(self) -> np.ndarray:
        """The cached 5-dim feature per edge: (c_local, c_trans, c_offload_full, rho, psi)."""
        return np.stack(
            [self.c_local, self.c_trans, self.c_offload_full, self.rho, self.psi],
            axis=1,
        )

    def edges_of_user(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.edge_user == j)

    def edges_of_server(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.edge_server == k)


@dataclass(frozen=True)
class Solution:
    """Per-edge offloading decisions D and allocation ratios A."""

    decisions: np.ndarray    # (L,) int in {0,1}
    allocations: np.ndarray  # (L,) float in [0,1]

    def __post_init__(self):
        self.decisions.setflags(write=False)
        self.allocations.setflags(write=False)


@dataclass(frozen=True)
class Violation:
    constraint: str   # one of C1, C2, C3, C4
    index: int        # edge index for C1/C2, user for C3, server for C4
    detail: str

    def __str__(self):
        return f"{self.constraint}@{self.index}: {self.detail}"


def _uplink_rates(edge_server, channel_gain, bandwidth, tx_power, noise,
                  include_interference):
    """Rate per edge; interference sums P_t h_j^2 over *other* co-server edges."""
    gain2 = channel_gain**2
    if include_interference:
        per_server = np.bincount(edge_server, weights=gain2,
                                 minlength=int(edge_server.max(initial=0)) + 1)
        interference = tx_power * (per_server[edge_server] - gain2)
    else:
        interference = 0.0
    sinr = tx_power * gain2 / (noise + interference)
    return bandwidth * np.log2(1.0 + sinr)


def recompute_edge_features(inst: OffloadInstance):
    """Recompute the five cached features from raw parameters.

    Returns (c_local, c_trans, c_offload_full, rho, psi). Used by tests to
    confirm the cache matches the closed forms, and by anyone altering raw
    parameters.
    """
    alpha = inst.alpha
    t_local = inst.cycles / inst.local_compute
    energy_local = inst.kappa * inst.cycles**2 * inst.input_bits
    c_local = alpha * t_local + (1 - alpha) * energy_local

    r = _uplink_rates(inst.edge_server, inst.channel_gain, inst.bandwidth,
                      inst.tx_power, inst.noise, inst.include_interference)
    t_up = inst.input_bits / r
    c_trans = alpha * t_up + (1 - alpha) * inst.tx_power * t_up

    t_server = inst.cycles / inst.server_compute
    c_off = alpha * t_server + (1 - alpha) * inst.server_power * t_server

    # rho: minimum allocation ratio that still meets the deadline when
    # offloaded; zero when even the full server is too slow.
    slack = inst.tau_max - t_up
    feasible = t_up + t_server <= inst.tau_max
    rho = np.where(feasible, inst.cycles / (np.maximum(slack, 1e-300) * inst.server_compute), 0.0)
    psi = (t_local <= inst.tau_max).astype(np.float64)
    return c_local, c_trans, c_off, rho, psi


def generate_instance(cfg: GenConfig, seed: int) -> OffloadInstance:
    """Draw a random instance from the ranges in ``cfg``.

    Connectivity: each user picks a uniform degree in
    [degree_min, min(degree_max, K)] and that many distinct servers.
    Task parameters (I, V, F_local, alpha, tau_max) are drawn per user and
    replicated onto the user's edges; channel gains are per edge.

    Raises GenerationError for K < 1, M < 1, or when connectivity cannot be
    established within ``cfg.max_retries`` attempts.
    """
    if cfg.num_servers < 1 or cfg.num_users < 1:
        raise GenerationError(
            f"need at least one server and one user, got K={cfg.num_servers}, M={cfg.num_users}"
        )
    if not (1 <= cfg.degree_min <= cfg.degree_max):
        raise GenerationError("degree range must satisfy 1 <= degree_min <= degree_max")

    rng = np.random.default_rng(seed)
    K, M = cfg.num_servers, cfg.num_users
    deg_hi = min(cfg.degree_max, K)
    deg_lo = min(cfg.degree_min, deg_hi)

    for _attempt in range(cfg.max_retries):
        users, servers = [], []
        degrees = rng.integers(deg_lo, deg_hi, endpoint=True, size=M)
        for j in range(M):
            chosen = rng.choice(K, size=int(degrees[j]), replace=False)
            chosen.sort()
            users.extend([j] * len(chosen))
            servers.extend(chosen.tolist())
        if len(users) > 0 and len(set(zip(users, servers))) == len(users):
            break
    else:  # pragma: no cover - choice(replace=False) cannot produce duplicates
        raise GenerationError(f"could not build connectivity after {cfg.max_retries} tries")

    edge_user = np.asarray(users, dtype=np.int64)
    edge_server = np.asarray(servers, dtype=np.int64)
    L = len(edge_user)

    def per_user(lo, hi):
        vals = rng.uniform(lo, hi, size=M)
        return vals[edge_user]

    inst = OffloadInstance(
        num_servers=K,
        num_users=M,
        edge_user=edge_user,
        edge_server=edge_server,
        c_local=np.zeros(L),
        c_trans=np.zeros(L),
        c_offload_full=np.zeros(L),
        rho=np.zeros(L),
        psi=np.zeros(L),
        input_bits=per_user(*cfg.input_bits),
        cycles=per_user(*cfg.cycles),
        local_compute=per_user(*cfg.local_compute),
        alpha=per_user(*cfg.alpha),
        channel_gain=rng.uniform(*cfg.channel_gain, size=L),
        tau_max=per_user(*cfg.tau_max),
        bandwidth=cfg.bandwidth,
        tx_power=cfg.tx_power,
        noise=cfg.noise,
        server_compute=cfg.server_compute,
        server_power=cfg.server_power,
        kappa=cfg.kappa,
        include_interference=cfg.include_interference,
    )
    c_local, c_trans, c_off, rho, psi = recompute_edge_features(inst)
    return replace(inst, c_local=c_local, c_trans=c_trans, c_offload_full=c_off,
                   rho=rho, psi=psi)


def _check_lengths(inst: OffloadInstance, sol: Solution):
    L = inst.num_edges
    if sol.decisions.shape != (L,) or sol.allocations.shape != (L,):
        raise ShapeMismatchError(
            f"solution arrays must have shape ({L},), got decisions "
            f"{sol.decisions.shape} and allocations {sol.allocations.shape}"
        )


def check_feasible(inst: OffloadInstance, sol: Solution) -> list[Violation]:
    """Return every violated constraint; an empty list means feasible."""
    _check_lengths(inst, sol)
    d = sol.decisions
    a = sol.allocations
    out: list[Violation] = []
    for i in np.flatnonzero((d != 0) & (d != 1)):
        out.append(Violation("C1", int(i), f"decision {d[i]} not binary"))
    for i in np.flatnonzero((a < 0) | (a > 1) | ~np.isfinite(a)):
        out.append(Violation("C2", int(i), f"allocation {a[i]} outside [0, 1]"))
    per_user = np.bincount(inst.edge_user, weights=(d == 1).astype(float),
                           minlength=inst.num_users)
    for j in np.flatnonzero(per_user > 1):
        out.append(Violation("C3", int(j), f"user offloads on {per_user[j]:.0f} edges"))
    load = np.bincount(inst.edge_server, weights=np.where(d == 1, a, 0.0),
                       minlength=inst.num_servers)
    for k in np.flatnonzero(load > 1 + 1e-12):
        out.append(Violation("C4", int(k), f"server load {load[k]:.6f} exceeds 1"))
    return out


def objective(inst: OffloadInstance, sol: Solution) -> float:
    """Total weighted cost of ``sol``; raises if the solution is infeasible.

    Offloaded edges pay c_trans + c_offload_full / A; all other edges pay
    their local cost. A zero allocation on an offloaded edge is a distinct
    error because the cost diverges.
    """
    violations = check_feasible(inst, sol)
    if violations:
        raise InfeasibleSolutionError(violations)
    d = sol.decisions.astype(bool)
    a = sol.allocations
    if np.any(d & (a == 0.0)):
        idx = int(np.flatnonzero(d & (a == 0.0))[0])
        raise InfeasibleSolutionError(
            [Violation("C2", idx, "offloaded edge has zero allocation (cost diverges)")]
        )
    local = np.where(d, 0.0, inst.c_local)
    offload = np.where(d, inst.c_trans + inst.c_offload_full / np.where(d, a, 1.0), 0.0)
    return float(np.sum(local + offload))


def all_local_solution(inst: OffloadInstance) -> Solution:
    """The always-feasible solution that runs every task locally."""
    L = inst.num_edges
    return Solution(decisions=np.zeros(L, dtype=np.int64), allocations=np.zeros(L))
