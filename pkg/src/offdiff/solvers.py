"""Baseline solvers: the randomized min-cost max-flow heuristic and exhaustive search.

The flow heuristic fixes the continuous allocations first (proportional to
task cycles, optionally randomly perturbed, normalized per server) and then
picks the cost-optimal offloading decisions by routing one unit of flow per
task through a small network. Restarting with fresh random allocations and
keeping the best solution gives the HEU baseline used to label the large
"lq" datasets.

Exhaustive search enumerates every per-user choice (local or one reachable
server) and solves the continuous subproblem per server in closed form;
it labels the small "gt" datasets and serves as the optimality reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError
from .problem import OffloadInstance, Solution, objective

__all__ = [
    "HeuristicConfig",
    "FlowNetwork",
    "Arc",
    "heuristic_allocation",
    "build_flow_network",
    "mcmf_solve",
    "McmfResult",
    "decode_routing",
    "heuristic_best",
    "exact_solve",
    "exhaustive_over_D_with_fixed_A",
    "sqrt_allocation",
]


@dataclass(frozen=True)
class HeuristicConfig:
    """Restart count, allocation perturbation half-width, and seed for HEU."""

    restarts: int = 8
    perturbation: float = 0.5   # multiplicative factor drawn from [1-p, 1+p]
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not (0.0 <= self.perturbation < 1.0):
            raise ValueError("perturbation must be in [0, 1)")


def heuristic_allocation(inst: OffloadInstance, seed=None, perturbation: float = 0.0):
    """Per-server cycle-proportional allocations, optionally perturbed.

    Each edge gets A_i proportional to its task's cycle count V_i times a
    random factor in [1-perturbation, 1+perturbation], renormalized so the
    allocations on every server's incoming edges sum to exactly 1. With
    ``perturbation=0`` this is the plain proportional rule and the seed is
    irrelevant.
    """
    weights = inst.cycles.astype(np.float64).copy()
    if perturbation > 0.0:
        rng = np.random.default_rng(seed)
        weights *= rng.uniform(1.0 - perturbation, 1.0 + perturbation, size=inst.num_edges)
    totals = np.bincount(inst.edge_server, weights=weights, minlength=inst.num_servers)
    return weights / totals[inst.edge_server]


@dataclass
class Arc:
    src: int
    dst: int
    cap: int
    cost: int
    edge_index: int = -1   # MSCO edge this user->server arc encodes; -1 otherwise
    user: int = -1         # owning user for local arcs


@dataclass
class FlowNetwork:
    """Unit-demand routing network for the offloading decisions.

    Node layout: 0 = source, 1..M = users, M+1..M+K = servers, M+K+1 = sink.
    ``arcs`` holds forward arcs interleaved with their residual reverses
    (forward 2m, reverse 2m+1). Per user, the local (user->sink) arc is
    created *before* the user->server arcs so that cost ties resolve to
    local execution: the augmenting-path search prefers lexicographically
    smaller arc-index sequences.
    """

    num_nodes: int
    source: int
    sink: int
    num_tasks: int
    arcs: list
    out_arcs: list  # adjacency: node -> list of arc ids

    def add_arc(self, src, dst, cap, cost, edge_index=-1, user=-1):
        a = len(self.arcs)
        self.arcs.append(Arc(src, dst, cap, cost, edge_index, user))
        self.arcs.append(Arc(dst, src, 0, -cost))
        self.out_arcs[src].append(a)
        self.out_arcs[dst].append(a + 1)
        return a


def _scaled_cost(x: float) -> int:
    """Keep three decimals (half away from zero) and scale by 1000."""
    if x < 0:
        raise ValueError(f"arc costs must be nonnegative, got {x}")
    return int(math.floor(x * 1000.0 + 0.5))


def build_flow_network(inst: OffloadInstance, allocations,
                       offload_requires_rho: bool = True) -> FlowNetwork:
    """Translate an instance plus fixed allocations into the routing network.

    Arc costs are the real-valued edge costs rounded to three decimals and
    scaled to integers. Server->sink capacities equal the server in-degree,
    so the only binding constraints are the per-user unit supplies; since
    each server's allocations sum to 1, any routed subset satisfies C4.
    With ``offload_requires_rho`` (default), edges whose deadline is
    unreachable even with the full server (rho = 0) get no arc, matching
    the exhaustive labeler's candidate set.
    """
    allocations = np.asarray(allocations, dtype=np.float64)
    if allocations.shape != (inst.num_edges,):
        raise ValueError("allocations must be per-edge")
    if np.any(allocations == 0.0):
        raise ValueError("allocations must be strictly positive on every edge")

    M, K = inst.num_users, inst.num_servers
    net = FlowNetwork(
        num_nodes=M + K + 2,
        source=0,
        sink=M + K + 1,
        num_tasks=M,
        arcs=[],
        out_arcs=[[] for _ in range(M + K + 2)],
    )
    for j in range(M):
        net.add_arc(net.source, 1 + j, 1, 0)
    offload_cost = inst.c_trans + inst.c_offload_full / allocations
    for j in range(M):
        net.add_arc(1 + j, net.sink, 1, _scaled_cost(inst.c_local[inst.edges_of_user(j)[0]]),
                    user=j)
        for e in inst.edges_of_user(j):
            if offload_requires_rho and inst.rho[e] == 0.0:
                continue
            net.add_arc(1 + j, 1 + M + int(inst.edge_server[e]), 1,
                        _scaled_cost(offload_cost[e]), edge_index=int(e))
    in_degree = np.bincount(inst.edge_server, minlength=K)
    for k in range(K):
        net.add_arc(1 + M + k, net.sink, int(in_degree[k]), 0)
    return net


@dataclass(frozen=True)
class McmfResult:
    routing: np.ndarray      # (M,) chosen edge index per user, -1 = local
    total_cost: int          # integer flow cost (scaled units)
    flow_value: int


def mcmf_solve(net: FlowNetwork) -> McmfResult:
    """Min-cost flow of value M by successive shortest augmenting paths.

    The inner search is label-correcting over the residual graph with
    composite labels (cost, arc-index tuple); among equal-cost paths the
    lexicographically smallest arc sequence wins, which makes tie-breaking
    reproducible and prefers local arcs (they are created first).
    """
    arcs = [Arc(a.src, a.dst, a.cap, a.cost, a.edge_index, a.user) for a in net.arcs]
    flow_value = 0
    total_cost = 0
    inf = (math.inf, ())
    while flow_value < net.num_tasks:
        labels = [inf] * net.num_nodes
        parent_arc = [-1] * net.num_nodes
        labels[net.source] = (0, ())
        active = [net.source]
        while active:
            next_active = []
            for u in active:
                du, pu = labels[u]
                for aid in net.out_arcs[u]:
                    arc = arcs[aid]
                    if arc.cap <= 0:
                        continue
                    cand = (du + arc.cost, pu + (aid,))
                    if cand < labels[arc.dst]:
                        labels[arc.dst] = cand
                        parent_arc[arc.dst] = aid
                        next_active.append(arc.dst)
            active = next_active
        if labels[net.sink][0] is math.inf:
            raise RuntimeError("network cannot route all tasks (no local arcs?)")
        # unit capacities on the source side: augment exactly one unit
        v = net.sink
        path = []
        while v != net.source:
            aid = parent_arc[v]
            path.append(aid)
            v = arcs[aid].src
        for aid in path:
            arcs[aid].cap -= 1
            arcs[aid ^ 1].cap += 1
            total_cost += arcs[aid].cost
        flow_value += 1

    routing = np.full(net.num_tasks, -1, dtype=np.int64)
    for aid in range(0, len(arcs), 2):
        arc = arcs[aid]
        used = net.arcs[aid].cap - arc.cap
        if used > 0 and arc.edge_index >= 0:
            src_user = arc.src - 1
            routing[src_user] = arc.edge_index
    return McmfResult(routing=routing, total_cost=total_cost, flow_value=flow_value)


def decode_routing(inst: OffloadInstance, allocations, result: McmfResult) -> Solution:
    """Turn a flow routing into a per-edge Solution with the given allocations."""
    decisions = np.zeros(inst.num_edges, dtype=np.int64)
    chosen = result.routing[result.routing >= 0]
    decisions[chosen] = 1
    return Solution(decisions=decisions, allocations=np.asarray(allocations, dtype=np.float64).copy())


def heuristic_best(inst: OffloadInstance, cfg: HeuristicConfig,
                   offload_requires_rho: bool = True) -> Solution:
    """HEU baseline: best of ``cfg.restarts`` randomized-allocation MCMF rounds.

    Every round draws fresh perturbed allocations (round r uses the seed
    sequence [cfg.seed, r]), solves the flow problem, and scores the decoded
    solution with the exact objective; the cheapest feasible solution wins.
    """
    best_sol = None
    best_cost = math.inf
    for r in range(cfg.restarts):
        alloc = heuristic_allocation(inst, seed=np.random.SeedSequence([cfg.seed, r]),
                                     perturbation=cfg.perturbation)
        net = build_flow_network(inst, alloc, offload_requires_rho)
        result = mcmf_solve(net)
        sol = decode_routing(inst, alloc, result)
        cost = objective(inst, sol)
        if cost < best_cost:
            best_cost = cost
            best_sol = sol
    return best_sol


def sqrt_allocation(c_offload_full_subset):
    """Optimal split of one server's capacity across a set of offloaded edges.

    Minimizes sum_i c_i / A_i subject to sum_i A_i = 1, A_i > 0; the
    stationarity condition c_i / A_i^2 = const gives A_i proportional to
    sqrt(c_i). The attained minimum is (sum_i sqrt(c_i))^2.
    """
    s = np.sqrt(np.asarray(c_offload_full_subset, dtype=np.float64))
    return s / s.sum()


def _user_options(inst: OffloadInstance, offload_requires_rho: bool):
    """Per-user choice lists: option 0 = local, then the user's edges in order."""
    options = []
    for j in range(inst.num_users):
        edges = inst.edges_of_user(j)
        if offload_requires_rho:
            edges = edges[inst.rho[edges] > 0]
        options.append(edges)
    return options


def _combination_count(options):
    count = 1
    for edges in options:
        count *= 1 + len(edges)
    return count


def exact_solve(inst: OffloadInstance, offload_requires_rho: bool = True,
                budget: int = 10_000_000):
    """Globally optimal solution by enumeration over discrete assignments.

    Every C3-feasible decision vector is scored with its per-server optimal
    continuous allocation: offloading a set S_k to server k costs
    sum_{i in S_k} c_trans_i + (sum_{i in S_k} sqrt(c_offload_full_i))^2.
    With ``offload_requires_rho`` (the default used for ground-truth
    labeling), edges whose deadline cannot be met even with the whole
    server (rho = 0) are not offloading candidates.

    Returns (solution, cost). Raises BudgetExceededError if the number of
    combinations exceeds ``budget``.
    """
    options = _user_options(inst, offload_requires_rho)
    count = _combination_count(options)
    if count > budget:
        raise BudgetExceededError(count, budget)

    K = inst.num_servers
    # Local costs accrue per *edge* in the objective, so relative to the
    # per-user choice "local vs. one offload edge" every decision vector
    # carries the constant sum over users of (degree - 1) * c_local; folding
    # it in at the end keeps the reported cost equal to objective().
    first_edges = np.array([inst.edges_of_user(j)[0] for j in range(inst.num_users)])
    constant = float(np.sum(inst.c_local) - np.sum(inst.c_local[first_edges]))

    # state columns: [base cost, per-server sum of sqrt(c_offload_full)]
    state = np.zeros((1, 1 + K))
    for j, edges in enumerate(options):
        contrib = np.zeros((1 + len(edges), 1 + K))
        contrib[0, 0] = inst.c_local[inst.edges_of_user(j)[0]]
        for row, e in enumerate(edges, start=1):
            contrib[row, 0] = inst.c_trans[e]
            contrib[row, 1 + int(inst.edge_server[e])] = math.sqrt(inst.c_offload_full[e])
        state = (state[:, None, :] + contrib[None, :, :]).reshape(-1, 1 + K)

    total = state[:, 0] + constant
    for k in range(K):
        total += state[:, 1 + k] ** 2
    best = int(np.argmin(total))

    # unravel the combination index back into per-user option picks
    decisions = np.zeros(inst.num_edges, dtype=np.int64)
    allocations = np.zeros(inst.num_edges)
    idx = best
    for j in reversed(range(inst.num_users)):
        n_opts = 1 + len(options[j])
        idx, pick = divmod(idx, n_opts)
        if pick > 0:
            decisions[options[j][pick - 1]] = 1
    for k in range(K):
        chosen = np.flatnonzero((decisions == 1) & (inst.edge_server == k))
        if len(chosen) > 0:
            allocations[chosen] = sqrt_allocation(inst.c_offload_full[chosen])
    sol = Solution(decisions=decisions, allocations=allocations)
    return sol, float(total[best])


def exhaustive_over_D_with_fixed_A(inst: OffloadInstance, allocations,
                                   offload_requires_rho: bool = True,
                                   budget: int = 10_000_000) -> Solution:
    """Brute-force the decisions with allocations frozen (test oracle for MCMF).

    Materializes the cost of every C3-feasible decision vector under the
    given allocations and returns the cheapest. Defaults to the same rho
    gating as the flow network so the two explore identical candidate sets.
    """
    allocations = np.asarray(allocations, dtype=np.float64)
    if np.any(allocations == 0.0):
        raise ValueError("allocations must be strictly positive on every edge")
    options = _user_options(inst, offload_requires_rho)
    count = _combination_count(options)
    if count > budget:
        raise BudgetExceededError(count, budget)

    offload_cost = inst.c_trans + inst.c_offload_full / allocations
    costs = np.zeros(1)
    for j, edges in enumerate(options):
        contrib = np.concatenate(
            [[inst.c_local[inst.edges_of_user(j)[0]]], offload_cost[edges]]
        )
        costs = (costs[:, None] + contrib[None, :]).reshape(-1)
    best = int(np.argmin(costs))

    decisions = np.zeros(inst.num_edges, dtype=np.int64)
    idx = best
    for j in reversed(range(inst.num_users)):
        n_opts = 1 + len(options[j])
        idx, pick = divmod(idx, n_opts)
        if pick > 0:
            decisions[options[j][pick - 1]] = 1
    return Solution(decisions=decisions, allocations=allocations.copy())
