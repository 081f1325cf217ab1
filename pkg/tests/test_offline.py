import math

import numpy as np
import pytest

from ehpower.envsim import EpisodeRealization, SystemConfig, battery_step, generate_episode
from ehpower.offline import (InstanceTooLarge, OfflineProgram, OfflineSolution, brute_force_offline,
                             build_offline_program, kkt_residual, node_constraint_matrix,
                             solve_offline)


def program(E, G, b1, b_max=20.0, p_max=15.0):
    E = np.asarray(E, float).reshape(len(E), -1)
    G = np.asarray(G, float).reshape(E.shape)
    return OfflineProgram(E, G, np.full(E.shape[1], float(b1)), b_max, p_max)


def test_counts_single_slot():
    prog = program([0.0], [1.0], 5.0)
    assert prog.num_variables == 2
    # five row families plus the terminal battery row B_{N+1} >= 0
    assert prog.num_constraints == 6
    G, h, _, _ = prog.constraint_system()
    assert G.shape == (6, 2) and h.shape == (6,)


def test_zero_power_with_overflow_spill_is_feasible():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cfg = SystemConfig(k=2, harvest_mean=12, harvest_var=4)
        ep = generate_episode(rng, cfg, 10)
        prog = build_offline_program(ep, cfg)
        p = np.zeros_like(ep.energies)
        s = np.zeros_like(p)
        B = prog.initial_battery.copy()
        for n in range(10):
            s[n] = np.maximum(B + ep.energies[n] - cfg.b_max, 0.0)
            B = battery_step(B, ep.energies[n], p[n], cfg.b_max)
        G, h, _, _ = prog.constraint_system()
        assert np.all(G @ prog.pack(p, s) <= h + 1e-9)


def test_constraint_matrix_is_block_lower_triangular():
    prog = program(np.ones((6, 2)), np.ones((6, 2)), 3.0)
    G, _, row_slot, col_slot = prog.constraint_system()
    rows, cols = np.nonzero(G)
    assert np.all(col_slot[cols] <= row_slot[rows])
    assert np.all(np.diff(row_slot) >= 0)


def test_node_matrix_read_only():
    G0 = node_constraint_matrix(3)
    assert G0.shape == (16, 6)
    with pytest.raises(ValueError):
        G0[0, 0] = 1.0


def test_single_slot_spends_everything():
    sol = solve_offline(program([0.0], [1.0], 5.0))
    assert sol.powers[0, 0] == pytest.approx(5.0, abs=1e-6)
    assert sol.objective == pytest.approx(math.log(6), abs=1e-7)


def test_two_slot_examples():
    sol = solve_offline(program([1.0, 0.0], [1.0, 1.0], 1.0))
    assert sol.objective == pytest.approx(2 * math.log(2), abs=1e-6)
    assert np.allclose(sol.powers[:, 0], [1, 1], atol=1e-3)
    sol = solve_offline(program([1.0, 0.0], [2.0, 1.0], 1.0))
    assert np.allclose(sol.powers[:, 0], [1, 1], atol=1e-6)
    assert sol.objective == pytest.approx(math.log(3) + math.log(2), abs=1e-6)


def test_two_slot_grid_oracle():
    # exhaustive grid at step 0.01 over the feasible square
    prog = program([1.0, 0.0], [1.0, 1.0], 1.0)
    grid = np.arange(0, 2.0 + 1e-9, 0.01)
    p1, p2 = np.meshgrid(grid, grid, indexing="ij")
    ok = (p1 <= 1.0 + 1e-12) & (p2 <= 1.0 - p1 + 1.0 + 1e-12)
    best = np.max(np.where(ok, np.log1p(p1) + np.log1p(p2), -np.inf))
    assert solve_offline(prog).objective == pytest.approx(best, abs=1e-6)


def test_empty_instance_and_zero_gain():
    sol = solve_offline(program([0.0, 0.0, 0.0], [1.0, 2.0, 0.5], 0.0))
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    bf = brute_force_offline(program([0.0, 0.0, 0.0], [1.0, 2.0, 0.5], 0.0))
    assert np.array_equal(bf.powers, np.zeros((3, 1))) and bf.objective == 0.0
    assert solve_offline(program([3.0], [0.0], 5.0)).objective == pytest.approx(0.0, abs=1e-12)
    assert brute_force_offline(program([3.0], [0.0], 5.0)).objective == 0.0


def test_brute_force_guards_size():
    with pytest.raises(InstanceTooLarge):
        brute_force_offline(program(np.ones(20), np.ones(20), 5.0))


def test_kkt_hand_optimum_and_non_optimal_point():
    prog = program([0.0], [1.0], 5.0)
    opt = OfflineSolution(np.array([[5.0]]), np.array([[0.0]]), np.array([[5.0], [0.0]]), math.log(6))
    assert kkt_residual(opt, prog) < 1e-8
    bad = OfflineSolution(np.array([[2.0]]), np.array([[0.0]]), np.array([[5.0], [3.0]]), math.log(3))
    assert kkt_residual(bad, prog) > 1e-3


@pytest.mark.parametrize("k", [1, 3])
def test_solver_beats_random_feasible_policies(k):
    rng = np.random.default_rng(100 + k)
    cfg = SystemConfig(k=k, harvest_mean=5, harvest_var=3)
    for _ in range(5):
        ep = generate_episode(rng, cfg, 12)
        sol = solve_offline(build_offline_program(ep, cfg))
        assert sol.kkt_residual < 1e-6
        for _ in range(100):
            B = cfg.initial_batteries()
            total = 0.0
            for n in range(12):
                p = rng.uniform(0, 1, k) * np.minimum(B, cfg.p_max)
                total += np.log1p(p @ ep.gains[n])
                B = battery_step(B, ep.energies[n], p, cfg.b_max)
            assert total <= sol.objective + 1e-9


def test_solution_is_consistent_with_recursion():
    cfg = SystemConfig(k=2, harvest_mean=8, harvest_var=4)
    ep = generate_episode(np.random.default_rng(7), cfg, 20)
    sol = solve_offline(build_offline_program(ep, cfg))
    B = cfg.initial_batteries()
    assert np.allclose(sol.batteries[0], B)
    for n in range(20):
        assert np.all(sol.powers[n] >= 0) and np.all(sol.powers[n] <= np.minimum(B, cfg.p_max))
        B = battery_step(B, ep.energies[n], sol.powers[n], cfg.b_max)
        assert np.allclose(sol.batteries[n + 1], B, atol=1e-12)
    assert np.all(sol.spills >= 0)


@pytest.mark.parametrize("seed", range(5))
def test_matches_grid_oracle_small(seed):
    rng = np.random.default_rng(seed)
    cfg = SystemConfig(harvest_mean=rng.uniform(2, 10), harvest_var=rng.uniform(1, 4))
    prog = build_offline_program(generate_episode(rng, cfg, 3), cfg)
    assert solve_offline(prog).objective == pytest.approx(brute_force_offline(prog).objective, abs=1e-3)


def test_gradient_matches_finite_differences():
    prog = program([[1.0, 2.0], [3.0, 0.5]], [[0.7, 1.3], [2.0, 0.1]], 4.0)
    x = np.random.default_rng(1).uniform(0.1, 2.0, prog.num_variables)
    f = lambda v: -prog.objective(prog.unpack(v)[0])
    h = 1e-6
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
    assert np.allclose(prog.gradient(x), fd, atol=1e-7)


def test_handles_flat_terminal_spill_face():
    # K=5 instance whose free final spill used to stall the dual residual
    rng = np.random.default_rng(581)
    cfg = SystemConfig(k=5, harvest_mean=5, harvest_var=3.5)
    for _ in range(20):
        ep = generate_episode(rng, cfg, 20)
        assert solve_offline(build_offline_program(ep, cfg)).kkt_residual < 1e-6


def test_block_reduction_matches_benchmark():
    from ehpower.policyeval import offline_benchmark

    cfg = SystemConfig(k=2)
    ep = generate_episode(np.random.default_rng(3), cfg, 20)
    rps, objs = offline_benchmark(ep, cfg, 20)
    assert rps == pytest.approx(solve_offline(build_offline_program(ep, cfg)).objective / 20, rel=1e-12)
    assert len(objs) == 1


def test_program_validation():
    with pytest.raises(ValueError):
        build_offline_program(EpisodeRealization(np.ones((3, 2)), np.ones((3, 2))), SystemConfig(k=1))
