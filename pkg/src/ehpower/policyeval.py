"""Online rollouts, the block-wise offline benchmark, and report tables."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envsim import (EpisodeRealization, InfeasibleActionError, SlotState, SystemConfig,
                     generate_episode)
from .offline import build_offline_program, solve_offline
from .seeding import substream


# -- policies ---------------------------------------------------------------


class Policy:
    """Maps the current state to K transmit energies."""

    descriptor = "policy"

    def act(self, state: SlotState) -> np.ndarray:
        raise NotImplementedError


class ZeroPolicy(Policy):
    descriptor = "zero"

    def act(self, state):
        return np.zeros(state.k)


class GreedyPolicy(Policy):
    """Spend everything allowed every slot."""

    def __init__(self, p_max):
        self.p_max = p_max
        self.descriptor = "greedy"

    def act(self, state):
        return np.minimum(state.battery, self.p_max)


class DnnPolicy(Policy):
    def __init__(self, checkpoint, p_max):
        self.checkpoint = checkpoint
        self.p_max = p_max
        self.descriptor = f"dnn-h{checkpoint.params.architecture.hidden_count}"

    def act(self, state):
        return dnn_policy_act(self.checkpoint, state, self.p_max)


class MdpLookupPolicy(Policy):
    def __init__(self, mdp_policy):
        from .mdp import mdp_policy_act

        self._act = mdp_policy_act
        self.policy = mdp_policy
        self.descriptor = "mdp"

    def act(self, state):
        if state.k != 1:
            raise ValueError("MDP lookup policy is point-to-point only")
        return np.array([self._act(self.policy, state)])


def clamp_power(raw, battery, p_max) -> np.ndarray:
    """Project onto [0, min(B, P_max)] per node; identity on feasible input."""
    return np.minimum(np.maximum(raw, 0.0), np.minimum(battery, p_max))


def dnn_policy_act(checkpoint, state: SlotState, p_max: float) -> np.ndarray:
    from .neuralnet import forward_single

    if checkpoint.k != state.k:
        raise ValueError(f"checkpoint is for K={checkpoint.k}, state has K={state.k}")
    x = state.features()
    if checkpoint.stats is not None:
        x = checkpoint.stats.apply(x)
    return clamp_power(forward_single(checkpoint.params, x), state.battery, p_max)


class FeasibilityWrapper(Policy):
    """Clamps any policy's output into the feasible box; ``strict`` raises instead."""

    def __init__(self, inner: Policy, p_max: float, strict: bool = False):
        self.inner = inner
        self.p_max = p_max
        self.strict = strict
        self.descriptor = inner.descriptor

    def act(self, state):
        raw = np.asarray(self.inner.act(state), dtype=float).reshape(state.k)
        out = clamp_power(raw, state.battery, self.p_max)
        if self.strict and not np.array_equal(out, raw):
            raise InfeasibleActionError(f"{self.descriptor} emitted {raw} with battery {state.battery}")
        return out


# -- rollouts ---------------------------------------------------------------


@dataclass
class Rollout:
    total_rate: float
    slots: int
    powers: np.ndarray | None = None  # (N, K)
    batteries: np.ndarray | None = None  # (N+1, K)

    @property
    def rps(self) -> float:
        return self.total_rate / self.slots


def rollout(policy: Policy, realization: EpisodeRealization, config: SystemConfig,
            initial_battery=None, record: bool = False, strict: bool = False) -> Rollout:
    """Run a policy slot by slot under the clipped battery recursion."""
    wrapped = policy if isinstance(policy, FeasibilityWrapper) else FeasibilityWrapper(policy, config.p_max, strict)
    N, K = realization.energies.shape
    B = config.initial_batteries() if initial_battery is None else np.array(initial_battery, dtype=float)
    E, G = realization.energies, realization.gains
    powers = np.empty((N, K)) if record else None
    batts = np.empty((N + 1, K)) if record else None
    total = 0.0
    for n in range(N):
        if record:
            batts[n] = B
        p = wrapped.act(SlotState(E[n], B, G[n]))
        total += float(np.log1p(p @ G[n]))
        if record:
            powers[n] = p
        # battery_step's feasibility check is redundant after the clamp
        B = np.minimum(np.maximum(B + E[n] - p, 0.0), config.b_max)
    if record:
        batts[N] = B
    return Rollout(total, N, powers, batts)


def offline_benchmark(realization: EpisodeRealization, config: SystemConfig, block_len: int = 20):
    """Offline RPS on consecutive blocks, carrying the offline terminal battery forward.

    Returns (rps, block_objectives).
    """
    N = realization.horizon
    if N % block_len:
        raise ValueError(f"stream length {N} is not a multiple of block length {block_len}")
    B = config.initial_batteries()
    objs = np.empty(N // block_len)
    for i, start in enumerate(range(0, N, block_len)):
        prog = build_offline_program(realization.block(start, start + block_len), config, B)
        sol = solve_offline(prog)
        objs[i] = sol.objective
        B = np.clip(sol.batteries[-1], 0.0, config.b_max)
    return float(objs.sum() / N), objs


@dataclass
class PolicyReport:
    policy: str
    slots: int
    policy_rps: float
    offline_rps: float
    ratio: float
    config: dict
    seed: int
    block_len: int = 20
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "PolicyReport":
        return cls(**json.loads(text))


def evaluation_stream(config: SystemConfig, num_slots: int, seed: int) -> EpisodeRealization:
    return generate_episode(substream(seed, "eval"), config, num_slots)


def _benchmark_task(args):
    realization, config, block_len = args
    return offline_benchmark(realization, config, block_len)[0]


def evaluate_policy(policy: Policy, config: SystemConfig, num_slots: int, seed: int | None = None,
                    block_len: int = 20, strict: bool = False, jobs: int = 1) -> PolicyReport:
    """RPS of ``policy`` and of the offline benchmark on the same evaluation stream.

    The stream comes from the ``eval`` substream of ``seed`` so it never
    overlaps the training episodes.  ``jobs > 1`` runs the benchmark in a
    worker process while the policy rolls out.
    """
    if num_slots < 1:
        raise ValueError("num_slots must be >= 1")
    seed = config.seed if seed is None else seed
    stream = evaluation_stream(config, num_slots, seed)
    if jobs > 1:
        with ProcessPoolExecutor(1) as pool:
            fut = pool.submit(_benchmark_task, (stream, config, block_len))
            res = rollout(policy, stream, config, strict=strict)
            offline = fut.result()
    else:
        res = rollout(policy, stream, config, strict=strict)
        offline = offline_benchmark(stream, config, block_len)[0]
    return PolicyReport(
        policy=policy.descriptor,
        slots=num_slots,
        policy_rps=res.rps,
        offline_rps=offline,
        ratio=100.0 * res.rps / offline if offline > 0 else float("nan"),
        config=config.to_dict(),
        seed=seed,
        block_len=block_len,
    )


def generate_report(reports, path, sweep: str = "m") -> None:
    """Table-shaped CSV: sweep value, offline RPS, policy RPS, percentage."""
    key = {"m": "harvest_mean", "v": "harvest_var"}[sweep]
    rows = sorted(reports, key=lambda r: r.config[key])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([sweep, "offline_rps", "policy_rps", "percentage"])
        for r in rows:
            w.writerow([repr(float(r.config[key])), repr(r.offline_rps), repr(r.policy_rps),
                        repr(100.0 * r.policy_rps / r.offline_rps)])


def read_report(path) -> PolicyReport:
    return PolicyReport.from_json(Path(path).read_text())
