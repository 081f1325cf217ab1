"""Discretized-MDP baseline for a single energy-harvesting link (K = 1).

State is (battery level, harvest level, channel level).  Harvest and channel
are i.i.d. across slots, so the expected continuation value only depends on
the next battery level and the Bellman backup factorizes.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import _kernels
from .envsim import SlotState, SystemConfig


class MdpError(RuntimeError):
    pass


@dataclass
class Quantizer:
    """Equiprobable bins of a scalar distribution with conditional-mean representatives."""

    edges: np.ndarray  # (L+1,), edges[0] is the support's lower end, edges[-1] may be inf
    values: np.ndarray  # (L,)
    probs: np.ndarray  # (L,)

    @property
    def levels(self) -> int:
        return len(self.values)

    def index(self, x):
        return np.searchsorted(self.edges[1:-1], x, side="right")

    def to_dict(self) -> dict:
        return {"edges": [float(v) for v in self.edges], "values": self.values.tolist(),
                "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Quantizer":
        return cls(np.array(d["edges"], float), np.array(d["values"], float),
                   np.array(d["probs"], float))

    @classmethod
    def point_mass(cls, value: float) -> "Quantizer":
        return cls(np.array([0.0, np.inf]), np.array([float(value)]), np.array([1.0]))


def quantize_channel(levels: int = 8) -> Quantizer:
    """Exponential(1) power gain in ``levels`` equiprobable bins."""
    if levels < 2:
        raise ValueError("need at least 2 levels")
    q = np.arange(levels + 1) / levels
    with np.errstate(divide="ignore"):
        edges = -np.log1p(-q)
    a, b = edges[:-1], edges[1:]
    # integral of x e^{-x} over [a, b] is (a+1)e^{-a} - (b+1)e^{-b}
    tail_b = np.where(np.isinf(b), 0.0, (b + 1) * np.exp(-np.where(np.isinf(b), 0.0, b)))
    mass = (a + 1) * np.exp(-a) - tail_b
    values = mass / (1.0 / levels)
    return Quantizer(edges, values, np.full(levels, 1.0 / levels))


def quantize_harvest(m: float, v: float, levels: int = 8) -> Quantizer:
    """Nonnegative truncated N(m, v) in ``levels`` equiprobable bins."""
    if levels < 1:
        raise ValueError("need at least 1 level")
    sd = np.sqrt(v)
    lo = -m / sd
    dist = stats.truncnorm(lo, np.inf, loc=m, scale=sd)
    edges = dist.ppf(np.arange(levels + 1) / levels)
    edges[0], edges[-1] = 0.0, np.inf
    za, zb = (edges[:-1] - m) / sd, (edges[1:] - m) / sd
    values = stats.truncnorm(za, zb, loc=m, scale=sd).mean()
    return Quantizer(edges, np.asarray(values, float), np.full(levels, 1.0 / levels))


@dataclass
class DiscretizedMdp:
    battery_grid: np.ndarray  # (nb,)
    action_grid: np.ndarray  # (na,)
    harvest: Quantizer
    channel: Quantizer
    next_battery: np.ndarray  # (nb, ne, na) index into battery_grid
    feasible: np.ndarray  # (nb, na)
    reward: np.ndarray  # (ng, na)
    b_max: float
    p_max: float
    battery_step: float

    @property
    def shape(self):
        return (len(self.battery_grid), self.harvest.levels, self.channel.levels)

    @property
    def num_states(self) -> int:
        return int(np.prod(self.shape))

    @property
    def num_actions(self) -> int:
        return len(self.action_grid)

    def transition_row(self, b: int, e: int, g: int, a: int) -> np.ndarray:
        """Next-state distribution over the flattened (b, e, g) states."""
        if not self.feasible[b, a]:
            raise MdpError(f"action {a} infeasible at battery level {b}")
        row = np.zeros(self.shape)
        row[self.next_battery[b, e, a]] = np.outer(self.harvest.probs, self.channel.probs)
        return row.ravel()

    def to_tabular(self) -> "TabularMdp":
        S, A = self.num_states, self.num_actions
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        feas = np.zeros((S, A), dtype=bool)
        for s, (b, e, g) in enumerate(itertools.product(*map(range, self.shape))):
            for a in range(A):
                if self.feasible[b, a]:
                    feas[s, a] = True
                    P[s, a] = self.transition_row(b, e, g, a)
                    R[s, a] = self.reward[g, a]
        return TabularMdp(P, R, feas)


@dataclass
class TabularMdp:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    feasible: np.ndarray | None = None  # (S, A)

    def __post_init__(self):
        if self.feasible is None:
            self.feasible = np.ones(self.R.shape, dtype=bool)


@dataclass
class MdpPolicy:
    actions: np.ndarray  # action index per state; (nb, ne, ng) or (S,)
    gain: float
    values: np.ndarray = field(repr=False)
    sweeps: int = 0
    mdp: DiscretizedMdp | TabularMdp | None = field(default=None, repr=False)


def build_mdp(config: SystemConfig, battery_step: float = 1.0, power_step: float = 1.0,
              harvest_levels: int = 8, channel_levels: int = 8,
              harvest: Quantizer | None = None, channel: Quantizer | None = None) -> DiscretizedMdp:
    if config.k != 1:
        raise MdpError("the discretized MDP baseline is point-to-point only (k = 1)")
    harvest = harvest or quantize_harvest(config.harvest_mean, config.harvest_var, harvest_levels)
    channel = channel or quantize_channel(channel_levels)
    nb = int(np.floor(config.b_max / battery_step + 1e-9)) + 1
    na = int(np.floor(config.p_max / power_step + 1e-9)) + 1
    bgrid = np.arange(nb) * battery_step
    agrid = np.arange(na) * power_step
    feasible = agrid[None, :] <= np.minimum(bgrid, config.p_max)[:, None] + 1e-12
    level = bgrid[:, None, None] + harvest.values[None, :, None] - agrid[None, None, :]
    level = np.clip(level, 0.0, config.b_max)
    nxt = np.minimum(np.floor(level / battery_step + 0.5).astype(np.int64), nb - 1)
    nxt = np.where(feasible[:, None, :], nxt, 0)
    reward = np.log1p(np.outer(channel.values, agrid))
    if not feasible[:, 0].all():  # pragma: no cover - p = 0 is always allowed
        raise MdpError("zero action infeasible somewhere")
    return DiscretizedMdp(bgrid, agrid, harvest, channel, nxt, feasible, reward,
                          float(config.b_max), float(config.p_max), float(battery_step))


def relative_value_iteration(mdp, tol: float = 1e-8, max_sweeps: int = 200_000,
                             tau: float = 0.1, ref_state=None) -> MdpPolicy:
    """Average-reward relative value iteration.

    Iterates V <- tau V + (1 - tau) T V (the aperiodicity transform, same
    optimal policies, gain scaled by 1 - tau) and re-centres on a reference
    state.  Stops when the span of the Bellman increment is below ``tol``.
    """
    if not 0 <= tau < 1:
        raise ValueError("tau must be in [0, 1)")
    if isinstance(mdp, DiscretizedMdp):
        nb, ne, ng = mdp.shape
        ref = ref_state if ref_state is not None else (nb - 1, ne // 2, ng // 2)
        V = np.zeros(mdp.shape)
        reward = np.ascontiguousarray(mdp.reward)
        nxt = np.ascontiguousarray(mdp.next_battery)
        feas = np.ascontiguousarray(mdp.feasible)
        pe, pg = mdp.harvest.probs, mdp.channel.probs

        def backup(V):
            return _kernels.bellman_backup(V, reward, nxt, feas, pe, pg, tau)
    else:
        ref = ref_state if ref_state is not None else 0
        V = np.zeros(mdp.R.shape[0])
        Rm = np.where(mdp.feasible, mdp.R, -np.inf)

        def backup(V):
            Q = Rm + mdp.P @ V
            act = np.argmax(Q, axis=1)
            return tau * V + (1 - tau) * Q[np.arange(len(V)), act], act

    for sweep in range(1, max_sweeps + 1):
        TV, act = backup(V)
        d = (TV - V) / (1 - tau)
        lo, hi = float(d.min()), float(d.max())
        V = TV - TV[ref]
        if hi - lo < tol:
            _, act = backup(V)
            return MdpPolicy(act, 0.5 * (hi + lo), V, sweep, mdp)
    raise MdpError(f"relative value iteration did not converge in {max_sweeps} sweeps "
                   f"(span {hi - lo:.3e})")


def policy_gain(mdp: TabularMdp, actions) -> float:
    """Long-run average reward of a stationary deterministic policy (unichain)."""
    S = len(actions)
    idx = np.arange(S)
    P = mdp.P[idx, actions]
    r = mdp.R[idx, actions]
    # pi (P - I) = 0, sum pi = 1
    A = np.vstack([(P - np.eye(S)).T, np.ones(S)])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return float(pi @ r)


def exhaustive_best_gain(mdp: TabularMdp, max_policies: int = 2_000_000):
    """Best gain over every deterministic stationary policy; returns (gain, actions)."""
    choices = [np.flatnonzero(row) for row in mdp.feasible]
    total = int(np.prod([len(c) for c in choices], dtype=float))
    if total > max_policies:
        raise MdpError(f"{total} policies is too many to enumerate")
    best, best_act = -np.inf, None
    for combo in itertools.product(*choices):
        g = policy_gain(mdp, np.array(combo))
        if g > best + 1e-12:
            best, best_act = g, np.array(combo)
    return best, best_act


def mdp_policy_act(policy: MdpPolicy, state) -> float:
    """Deploy the lookup table on a continuous K=1 state.

    Battery floors to the grid, so the table never sees more energy than is
    available; the result is clamped to min(B, P_max) anyway.
    """
    mdp = policy.mdp
    if isinstance(state, SlotState):
        B, e, g = float(state.battery[0]), float(state.harvested[0]), float(state.channel[0])
    else:
        B, e, g = map(float, state)
    bi = min(int(np.floor(B / mdp.battery_step + 1e-9)), len(mdp.battery_grid) - 1)
    ei = int(mdp.harvest.index(e))
    gi = int(mdp.channel.index(g))
    a = mdp.action_grid[policy.actions[bi, ei, gi]]
    return float(min(max(a, 0.0), B, mdp.p_max))


# -- persistence ------------------------------------------------------------

CSV_COLUMNS = ["battery_idx", "harvest_idx", "channel_idx", "battery", "harvest",
               "channel", "action_idx", "action"]


def write_policy(policy: MdpPolicy, path) -> None:
    """Lookup table as CSV plus a JSON sidecar holding the grids and gain."""
    mdp = policy.mdp
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for b, e, g in itertools.product(*map(range, mdp.shape)):
            a = int(policy.actions[b, e, g])
            w.writerow([b, e, g, repr(float(mdp.battery_grid[b])), repr(float(mdp.harvest.values[e])),
                        repr(float(mdp.channel.values[g])), a, repr(float(mdp.action_grid[a]))])
    meta = {
        "gain": policy.gain,
        "sweeps": policy.sweeps,
        "b_max": mdp.b_max,
        "p_max": mdp.p_max,
        "battery_step": mdp.battery_step,
        "battery_grid": mdp.battery_grid.tolist(),
        "action_grid": mdp.action_grid.tolist(),
        "harvest": mdp.harvest.to_dict(),
        "channel": mdp.channel.to_dict(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def read_policy(path) -> MdpPolicy:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    harvest, channel = Quantizer.from_dict(meta["harvest"]), Quantizer.from_dict(meta["channel"])
    bgrid = np.array(meta["battery_grid"], float)
    agrid = np.array(meta["action_grid"], float)
    actions = np.full((len(bgrid), harvest.levels, channel.levels), -1, dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            actions[int(row["battery_idx"]), int(row["harvest_idx"]), int(row["channel_idx"])] = \
                int(row["action_idx"])
    if (actions < 0).any():
        raise MdpError(f"{path}: lookup table is incomplete")
    feasible = agrid[None, :] <= np.minimum(bgrid, meta["p_max"])[:, None] + 1e-12
    mdp = DiscretizedMdp(bgrid, agrid, harvest, channel, np.zeros_like(actions), feasible,
                         np.log1p(np.outer(channel.values, agrid)), meta["b_max"], meta["p_max"],
                         meta["battery_step"])
    return MdpPolicy(actions, float(meta["gain"]), np.zeros(actions.shape), meta["sweeps"], mdp)
