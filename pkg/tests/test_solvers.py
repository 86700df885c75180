import numpy as np
import pytest

from offdiff.errors import BudgetExceededError
from offdiff.problem import (GenConfig, Solution, all_local_solution, generate_instance,
                             objective)
from offdiff.solvers import (HeuristicConfig, build_flow_network, decode_routing,
                             exact_solve, exhaustive_over_D_with_fixed_A,
                             heuristic_allocation, heuristic_best, mcmf_solve,
                             sqrt_allocation)


def _grid_best_cost(c_offload, resolution=1e-3):
    """Brute-force the per-server allocation subproblem on a grid (<=3 edges)."""
    c = np.asarray(c_offload, dtype=np.float64)
    if len(c) == 1:
        return float(c[0])
    steps = np.arange(resolution, 1.0, resolution)
    if len(c) == 2:
        a1 = steps
        a2 = 1.0 - a1
        return float(np.min(c[0] / a1 + c[1] / a2))
    if len(c) == 3:
        a1, a2 = np.meshgrid(steps, steps, indexing="ij")
        a3 = 1.0 - a1 - a2
        ok = a3 > 0
        total = np.where(ok, c[0] / a1 + c[1] / a2 + c[2] / np.where(ok, a3, 1.0), np.inf)
        return float(total.min())
    raise ValueError("grid oracle supports at most 3 edges")


class TestHeuristicAllocation:
    def test_symmetric_cycles_split_evenly(self):
        cfg = GenConfig(num_servers=1, num_users=2, degree_min=1, degree_max=1,
                        cycles=(2e9, 2e9))
        inst = generate_instance(cfg, seed=0)
        assert np.allclose(heuristic_allocation(inst), [0.5, 0.5])

    def test_proportional_rule_without_perturbation(self):
        cfg = GenConfig(num_servers=1, num_users=2, degree_min=1, degree_max=1)
        inst = generate_instance(cfg, seed=1)
        alloc = heuristic_allocation(inst)
        expect = inst.cycles / inst.cycles.sum()
        assert np.allclose(alloc, expect, rtol=1e-12)
        # 1:3 split from the formula
        ratio = inst.cycles[1] / inst.cycles[0]
        assert alloc[1] / alloc[0] == pytest.approx(ratio, rel=1e-12)

    def test_per_server_sums_are_exactly_one(self, small_instances, rng):
        for inst in small_instances:
            alloc = heuristic_allocation(inst, seed=int(rng.integers(1 << 30)),
                                         perturbation=0.5)
            sums = np.bincount(inst.edge_server, weights=alloc,
                               minlength=inst.num_servers)
            present = np.bincount(inst.edge_server, minlength=inst.num_servers) > 0
            assert np.allclose(sums[present], 1.0, atol=1e-12)


class TestFlowNetwork:
    def test_single_user_single_server_shape(self):
        cfg = GenConfig(num_servers=1, num_users=1, degree_min=1, degree_max=1,
                        tau_max=(10.0, 10.0))
        inst = generate_instance(cfg, seed=0)
        net = build_flow_network(inst, np.ones(1))
        assert net.num_nodes == 4
        # two unit-capacity routes out of the user: local lane and the server
        user_arcs = [a for a in net.arcs[::2] if a.src == 1]
        assert len(user_arcs) == 2

    def test_cost_scaling_rounds_half_away_from_zero(self):
        from offdiff.solvers import _scaled_cost

        assert _scaled_cost(1.23456) == 1235
        assert _scaled_cost(1.2344999) == 1234
        assert _scaled_cost(0.0005) == 1
        assert _scaled_cost(0.0) == 0

    def test_max_flow_equals_task_count(self, small_instances):
        for inst in small_instances[:10]:
            alloc = heuristic_allocation(inst, seed=0, perturbation=0.5)
            result = mcmf_solve(build_flow_network(inst, alloc))
            assert result.flow_value == inst.num_users

    def test_zero_allocation_rejected(self):
        inst = generate_instance(GenConfig(), seed=0)
        alloc = np.ones(inst.num_edges)
        alloc[0] = 0.0
        with pytest.raises(ValueError):
            build_flow_network(inst, alloc)


class TestMcmf:
    def test_equal_costs_prefer_local(self):
        # Construct arc costs that tie exactly: pick allocations making the
        # offload route cost (after rounding) equal to the local route cost.
        cfg = GenConfig(num_servers=1, num_users=1, degree_min=1, degree_max=1,
                        tau_max=(10.0, 10.0))
        inst = generate_instance(cfg, seed=4)
        # choose A so c_trans + c_offload/A == c_local exactly
        target = inst.c_local[0] - inst.c_trans[0]
        assert target > 0
        alloc = np.array([inst.c_offload_full[0] / target])
        assert 0 < alloc[0] <= 1
        net = build_flow_network(inst, alloc, offload_requires_rho=False)
        costs = sorted(a.cost for a in net.arcs[::2] if a.src == 1)
        assert costs[0] == costs[1]  # genuine tie at integer level
        result = mcmf_solve(net)
        assert result.routing[0] == -1  # tie resolved to local execution
        # oracle agreement: both routings cost the same objective
        both = [objective(inst, Solution(np.array([dd]), alloc)) for dd in (0, 1)]
        assert abs(both[0] - both[1]) <= 2e-3

    def test_cheaper_offload_is_taken(self):
        cfg = GenConfig(num_servers=1, num_users=1, degree_min=1, degree_max=1,
                        cycles=(2e9, 2e9), local_compute=(0.5e9, 0.5e9),
                        tau_max=(10.0, 10.0))
        inst = generate_instance(cfg, seed=0)
        assert inst.c_trans[0] + inst.c_offload_full[0] < inst.c_local[0]
        result = mcmf_solve(build_flow_network(inst, np.ones(1)))
        assert result.routing[0] == 0

    def test_flow_cost_tracks_decoded_objective(self, small_instances):
        # The per-edge objective charges c_local on every non-offloaded edge,
        # while the network charges each user's local lane once; the gap is
        # the constant sum of (degree-1)*c_local over users.
        for inst in small_instances:
            alloc = heuristic_allocation(inst, seed=7, perturbation=0.5)
            result = mcmf_solve(build_flow_network(inst, alloc))
            sol = decode_routing(inst, alloc, result)
            first = np.array([inst.edges_of_user(j)[0] for j in range(inst.num_users)])
            constant = inst.c_local.sum() - inst.c_local[first].sum()
            assert abs(result.total_cost / 1000 - (objective(inst, sol) - constant)) \
                <= inst.num_edges * 1e-3

    def test_matches_exhaustive_oracle(self, small_instances):
        for seed, inst in enumerate(small_instances):
            alloc = heuristic_allocation(inst, seed=seed, perturbation=0.5)
            mcmf_sol = decode_routing(inst, alloc,
                                      mcmf_solve(build_flow_network(inst, alloc)))
            oracle = exhaustive_over_D_with_fixed_A(inst, alloc)
            gap = abs(objective(inst, mcmf_sol) - objective(inst, oracle))
            assert gap <= inst.num_edges * 1e-3


class TestHeuristicBest:
    def test_deterministic_for_fixed_seed(self, small_instances):
        inst = small_instances[0]
        cfg = HeuristicConfig(restarts=1, perturbation=0.0, seed=3)
        a = heuristic_best(inst, cfg)
        b = heuristic_best(inst, cfg)
        assert np.array_equal(a.decisions, b.decisions)
        assert np.array_equal(a.allocations, b.allocations)

    def test_more_restarts_never_worse(self, small_instances):
        for inst in small_instances[:8]:
            c1 = objective(inst, heuristic_best(inst, HeuristicConfig(restarts=1, seed=0)))
            c32 = objective(inst, heuristic_best(inst, HeuristicConfig(restarts=32, seed=0)))
            assert c32 <= c1 + 1e-12

    def test_80_node_instance_under_a_second(self):
        import time

        inst = generate_instance(GenConfig(num_servers=20, num_users=61,
                                           degree_max=4), seed=0)
        assert inst.num_nodes == 81
        t0 = time.perf_counter()
        heuristic_best(inst, HeuristicConfig(restarts=1, seed=0))
        assert time.perf_counter() - t0 < 1.0


class TestExactSolve:
    def test_single_user_takes_cheaper_route(self):
        cfg = GenConfig(num_servers=1, num_users=1, degree_min=1, degree_max=1,
                        tau_max=(10.0, 10.0))
        inst = generate_instance(cfg, seed=2)
        sol, cost = exact_solve(inst)
        offload_cost = inst.c_trans[0] + inst.c_offload_full[0]
        assert cost == pytest.approx(min(inst.c_local[0], offload_cost), rel=1e-12)
        assert (sol.decisions[0] == 1) == (offload_cost < inst.c_local[0])

    def test_equal_offload_costs_split_evenly(self):
        c = sqrt_allocation([0.3, 0.3])
        assert np.allclose(c, [0.5, 0.5])

    def test_sqrt_rule_beats_or_ties_grid_search(self, small_instances):
        checked = 0
        for inst in small_instances:
            sol, _ = exact_solve(inst)
            for k in range(inst.num_servers):
                sel = np.flatnonzero((sol.decisions == 1) & (inst.edge_server == k))
                if not 2 <= len(sel) <= 3:
                    continue
                c = inst.c_offload_full[sel]
                closed = float(np.sum(np.sqrt(c)))**2
                grid = _grid_best_cost(c)
                assert closed <= grid + 1e-12
                assert (grid - closed) / closed <= 1e-3
                checked += 1
        assert checked >= 3

    def test_kkt_stationarity_of_allocation(self, small_instances):
        for inst in small_instances:
            sol, _ = exact_solve(inst)
            for k in range(inst.num_servers):
                sel = np.flatnonzero((sol.decisions == 1) & (inst.edge_server == k))
                if len(sel) > 1:
                    vals = inst.c_offload_full[sel] / sol.allocations[sel]**2
                    assert np.ptp(vals) / vals.mean() < 1e-9

    def test_reported_cost_matches_objective(self, small_instances):
        for inst in small_instances:
            sol, cost = exact_solve(inst)
            assert cost == pytest.approx(objective(inst, sol), rel=1e-12)

    def test_ordering_exact_heuristic_local(self, small_instances):
        for seed, inst in enumerate(small_instances):
            _, c_exact = exact_solve(inst)
            c_heu = objective(inst, heuristic_best(inst, HeuristicConfig(restarts=8, seed=seed)))
            c_local = objective(inst, all_local_solution(inst))
            assert c_exact <= c_heu + 1e-9
            assert c_heu <= c_local + 1e-9

    def test_edge_permutation_invariance(self):
        from dataclasses import replace

        inst = generate_instance(GenConfig(), seed=33)
        perm = np.random.default_rng(0).permutation(inst.num_edges)
        arrays = ("edge_user", "edge_server", "c_local", "c_trans", "c_offload_full",
                  "rho", "psi", "input_bits", "cycles", "local_compute", "alpha",
                  "channel_gain", "tau_max")
        permuted = replace(inst, **{a: getattr(inst, a)[perm].copy() for a in arrays})
        sol_a, cost_a = exact_solve(inst)
        sol_b, cost_b = exact_solve(permuted)
        assert cost_a == pytest.approx(cost_b, rel=1e-12)
        assert np.array_equal(sol_a.decisions[perm], sol_b.decisions)

    def test_budget_exceeded_reports_count(self):
        inst = generate_instance(GenConfig(num_users=8, degree_min=3, degree_max=3),
                                 seed=0)
        with pytest.raises(BudgetExceededError) as exc:
            exact_solve(inst, offload_requires_rho=False, budget=100)
        assert exc.value.combinations == 4**8


class TestExhaustiveFixedA:
    def test_single_user_agrees_with_direct_min(self):
        cfg = GenConfig(num_servers=2, num_users=1, degree_min=2, degree_max=2,
                        tau_max=(10.0, 10.0))
        inst = generate_instance(cfg, seed=5)
        alloc = np.ones(inst.num_edges)
        sol = exhaustive_over_D_with_fixed_A(inst, alloc, offload_requires_rho=False)
        options = [objective(inst, all_local_solution(inst))]
        for e in range(inst.num_edges):
            d = np.zeros(inst.num_edges, dtype=np.int64)
            d[e] = 1
            options.append(objective(inst, Solution(d, alloc)))
        assert objective(inst, sol) == pytest.approx(min(options), rel=1e-12)

    def test_all_rho_zero_forces_local(self):
        cfg = GenConfig(tau_max=(1e-6, 1e-6))   # nothing meets the deadline
        inst = generate_instance(cfg, seed=1)
        assert np.all(inst.rho == 0)
        sol = exhaustive_over_D_with_fixed_A(inst, np.full(inst.num_edges, 0.5),
                                             offload_requires_rho=True)
        assert sol.decisions.sum() == 0
