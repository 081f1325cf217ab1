import math

import numpy as np
import pytest
from scipy import integrate

from ehpower.envsim import SlotState, SystemConfig
from ehpower.mdp import (MdpError, Quantizer, TabularMdp, build_mdp, exhaustive_best_gain,
                         mdp_policy_act, policy_gain, quantize_channel, quantize_harvest,
                         read_policy, relative_value_iteration, write_policy)


def test_channel_quantizer_equiprobable_and_ordered():
    q = quantize_channel(8)
    assert np.allclose(q.probs, 0.125)
    assert np.all(np.diff(q.values) > 0)
    assert q.values @ q.probs == pytest.approx(1.0, abs=1e-12)


def test_channel_two_levels_against_quadrature():
    q = quantize_channel(2)
    assert q.edges[1] == pytest.approx(math.log(2), abs=1e-15)
    lo = integrate.quad(lambda x: x * math.exp(-x), 0, math.log(2))[0] / 0.5
    hi = integrate.quad(lambda x: x * math.exp(-x), math.log(2), np.inf)[0] / 0.5
    assert q.values[0] == pytest.approx(lo, abs=1e-12)
    assert q.values[1] == pytest.approx(hi, abs=1e-10)


def test_harvest_quantizer_mean_preserved():
    from ehpower.envsim import truncated_mean

    q = quantize_harvest(2.0, 4.0, 8)
    assert np.allclose(q.probs, 0.125)
    assert np.all(np.diff(q.values) > 0) and q.values[0] >= 0
    assert q.values @ q.probs == pytest.approx(truncated_mean(2.0, 4.0), rel=1e-9)


def test_quantizer_index_and_round_trip():
    q = quantize_channel(4)
    assert q.index(0.0) == 0 and q.index(100.0) == 3
    assert q.index(q.edges[1]) == 1
    back = Quantizer.from_dict(q.to_dict())
    assert np.array_equal(back.edges, q.edges) and np.array_equal(back.values, q.values)


def test_transition_rows_are_stochastic_and_bounded():
    mdp = build_mdp(SystemConfig(b_max=6, p_max=4, harvest_mean=3, harvest_var=2), 1, 1, 3, 3)
    T = mdp.to_tabular()
    rows = T.P[T.feasible]
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    assert mdp.next_battery.max() <= len(mdp.battery_grid) - 1
    assert np.all(mdp.battery_grid <= 6)


def test_zero_harvest_chain_has_zero_gain():
    cfg = SystemConfig(b_max=5, p_max=3, b_init=0)
    mdp = build_mdp(cfg, harvest=Quantizer.point_mass(0.0), channel_levels=2)
    pol = relative_value_iteration(mdp)
    assert pol.gain == pytest.approx(0.0, abs=1e-8)
    assert np.all(pol.actions[0] == 0)
    assert mdp_policy_act(pol, (0.0, 0.0, 1.0)) == 0.0


def test_single_state_gain_is_reward():
    T = TabularMdp(np.ones((1, 1, 1)), np.array([[0.37]]))
    assert relative_value_iteration(T).gain == pytest.approx(0.37, abs=1e-9)


def toy_mdp():
    P = np.array([
        [[0.9, 0.1], [0.2, 0.8]],
        [[0.7, 0.3], [0.05, 0.95]],
    ])
    R = np.array([[1.0, 0.0], [2.0, 1.5]])
    return TabularMdp(P, R)


def test_toy_matches_enumeration():
    T = toy_mdp()
    best, act = exhaustive_best_gain(T)
    pol = relative_value_iteration(T, tol=1e-12)
    assert pol.gain == pytest.approx(best, abs=1e-6)
    assert policy_gain(T, pol.actions) == pytest.approx(best, abs=1e-9)


def test_gain_shifts_with_reward_constant():
    T = toy_mdp()
    base = relative_value_iteration(T, tol=1e-12).gain
    shifted = relative_value_iteration(TabularMdp(T.P, T.R + 3.25), tol=1e-12).gain
    assert shifted - base == pytest.approx(3.25, abs=1e-9)


def test_factored_and_tabular_backups_agree():
    mdp = build_mdp(SystemConfig(b_max=3, p_max=2, harvest_mean=1, harvest_var=1), 1, 1, 2, 2)
    fac = relative_value_iteration(mdp, tol=1e-11)
    ref = int(np.ravel_multi_index((3, 1, 1), mdp.shape))
    tab = relative_value_iteration(mdp.to_tabular(), tol=1e-11, ref_state=ref)
    assert fac.gain == pytest.approx(tab.gain, abs=1e-8)


def test_larger_battery_never_lowers_gain():
    small = relative_value_iteration(build_mdp(SystemConfig(b_max=8, p_max=6, harvest_mean=3), 1, 1, 4, 4))
    large = relative_value_iteration(build_mdp(SystemConfig(b_max=12, p_max=6, harvest_mean=3), 1, 1, 4, 4))
    assert large.gain >= small.gain - 1e-9


def test_greedy_policy_is_feasible_everywhere():
    mdp = build_mdp(SystemConfig(), 1, 1, 4, 4)
    pol = relative_value_iteration(mdp)
    a = pol.actions
    assert np.all(mdp.feasible[np.arange(len(mdp.battery_grid))[:, None, None], a])


def test_deployment_mapping():
    mdp = build_mdp(SystemConfig(), 1, 1, 8, 8)
    pol = relative_value_iteration(mdp)
    e, g = mdp.harvest.values[3], mdp.channel.values[5]
    ei, gi = mdp.harvest.index(e), mdp.channel.index(g)
    assert (ei, gi) == (3, 5)
    assert mdp_policy_act(pol, (7.0, e, g)) == mdp.action_grid[pol.actions[7, 3, 5]]
    # continuous battery floors to the grid level below
    assert mdp_policy_act(pol, (7.4, e, g)) == mdp.action_grid[pol.actions[7, 3, 5]]
    assert mdp_policy_act(pol, (0.0, e, g)) == 0.0
    state = SlotState(np.array([e]), np.array([7.4]), np.array([g]))
    assert mdp_policy_act(pol, state) == mdp_policy_act(pol, (7.4, e, g))


def test_policy_file_round_trip(tmp_path):
    mdp = build_mdp(SystemConfig(b_max=6, p_max=4), 1, 1, 3, 3)
    pol = relative_value_iteration(mdp)
    path = tmp_path / "pol.csv"
    write_policy(pol, path)
    back = read_policy(path)
    assert np.array_equal(back.actions, pol.actions)
    assert back.gain == pol.gain
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = (rng.uniform(0, 6), rng.uniform(0, 20), rng.exponential())
        assert mdp_policy_act(back, s) == mdp_policy_act(pol, s)


def test_rejects_multinode():
    with pytest.raises(MdpError):
        build_mdp(SystemConfig(k=2))
