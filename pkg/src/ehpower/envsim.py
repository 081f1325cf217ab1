"""Channel and harvesting models, battery dynamics, and per-slot rates."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import battery_rollout

CONFIG_KEYS = ("k", "b_max", "p_max", "harvest_mean", "harvest_var", "b_init", "seed")


class ConfigError(ValueError):
    pass


class InfeasibleActionError(ValueError):
    """A policy asked for energy it does not have (or a negative amount)."""


@dataclass(frozen=True)
class SystemConfig:
    k: int = 1
    b_max: float = 20.0
    p_max: float = 15.0
    harvest_mean: float = 10.0
    harvest_var: float = 1.0
    b_init: float | None = None  # None -> b_max / 2
    seed: int = 0
    energy_unit_joules: float = 1e-2

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if not 0 < self.p_max <= self.b_max:
            raise ConfigError(f"need 0 < p_max <= b_max, got p_max={self.p_max}, b_max={self.b_max}")
        if self.harvest_mean < 0 or self.harvest_var <= 0:
            raise ConfigError("need harvest_mean >= 0 and harvest_var > 0")
        if self.b_init is not None and not 0 <= self.b_init <= self.b_max:
            raise ConfigError(f"b_init={self.b_init} outside [0, b_max]")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def initial_battery(self) -> float:
        return self.b_max / 2 if self.b_init is None else float(self.b_init)

    def initial_batteries(self) -> np.ndarray:
        return np.full(self.k, self.initial_battery)

    def replace(self, **changes) -> "SystemConfig":
        changes = {key: val for key, val in changes.items() if val is not None}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {key: getattr(self, key) for key in CONFIG_KEYS}
        d["b_init"] = self.initial_battery
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, val in d.items():
            kw[key] = int(val) if key in ("k", "seed") else float(val)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SystemConfig":
        return cls.from_dict(read_config_file(path))


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` (or ``key: value``) file; ``#`` starts a comment."""
    text = Path(path).read_text()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, val = line.split(sep, 1)
                break
        else:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip().lower()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = float(val.strip())
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad number {val.strip()!r}") from None
    return out


@dataclass
class SlotState:
    harvested: np.ndarray
    battery: np.ndarray
    channel: np.ndarray

    @property
    def k(self) -> int:
        return len(self.battery)

    def features(self) -> np.ndarray:
        """Network input, ordered harvest || battery || channel."""
        return np.concatenate([self.harvested, self.battery, self.channel])


@dataclass
class EpisodeRealization:
    energies: np.ndarray  # (N, K)
    gains: np.ndarray  # (N, K)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.gains = np.asarray(self.gains, dtype=float)
        if self.energies.ndim != 2 or self.energies.shape != self.gains.shape:
            raise ValueError(
                f"energies {self.energies.shape} and gains {self.gains.shape} must be equal (N, K)"
            )
        if (self.energies < 0).any() or (self.gains < 0).any():
            raise ValueError("energies and gains must be nonnegative")

    @property
    def horizon(self) -> int:
        return self.energies.shape[0]

    @property
    def k(self) -> int:
        return self.energies.shape[1]

    def block(self, start: int, stop: int) -> "EpisodeRealization":
        return EpisodeRealization(self.energies[start:stop], self.gains[start:stop])


# -- stochastic models ------------------------------------------------------


def sample_channel_gains(rng: np.random.Generator, k) -> np.ndarray:
    """Rayleigh fading power gains: exponential with unit mean.

    ``k`` is a node count or a full output shape.
    """
    return rng.exponential(1.0, size=k)


def sample_harvest(rng: np.random.Generator, m: float, v: float, k) -> np.ndarray:
    """Harvested energy from N(m, v) truncated at zero, by rejection."""
    if v <= 0:
        raise ValueError("harvest variance must be positive")
    sd = np.sqrt(v)
    out = rng.normal(m, sd, size=k)
    bad = out < 0
    while bad.any():
        out[bad] = rng.normal(m, sd, size=int(bad.sum()))
        bad = out < 0
    return out


def truncated_mean(m: float, v: float) -> float:
    """Mean of N(m, v) conditioned on being nonnegative."""
    from scipy.stats import norm

    sd = np.sqrt(v)
    a = -m / sd
    return m + sd * norm.pdf(a) / norm.sf(a)


# -- dynamics ---------------------------------------------------------------


def battery_step(B, e, p, b_max):
    """One slot of the battery recursion: min([B + e - p]^+, b_max)."""
    B = np.asarray(B, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p > B):
        raise InfeasibleActionError(f"infeasible transmit energy p={p} with battery B={B}")
    out = np.minimum(np.maximum(B + e - p, 0.0), b_max)
    return float(out) if out.ndim == 0 else out


def battery_trajectory(b0, energies, powers, b_max) -> np.ndarray:
    """Battery levels (N+1, K) for a fixed power schedule; powers are not checked."""
    energies = np.ascontiguousarray(energies, dtype=float)
    powers = np.ascontiguousarray(powers, dtype=float)
    b0 = np.broadcast_to(np.asarray(b0, dtype=float), (energies.shape[1],)).copy()
    return battery_rollout(b0, energies, powers, float(b_max))


def slot_rate(p, g) -> float:
    """Sum rate ln(1 + sum_k p_k g_k) in nats."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"power shape {p.shape} != gain shape {g.shape}")
    return float(np.log1p(np.dot(p, g)))


def generate_episode(rng: np.random.Generator, config: SystemConfig, n: int) -> EpisodeRealization:
    if n < 1:
        raise ValueError("horizon must be >= 1")
    shape = (n, config.k)
    energies = sample_harvest(rng, config.harvest_mean, config.harvest_var, shape)
    gains = sample_channel_gains(rng, shape)
    return EpisodeRealization(energies, gains)
