"""Supervised dataset of (harvest, battery, gain) states labelled with offline-optimal powers."""
from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envsim import SystemConfig, generate_episode
from .offline import SolverError, build_offline_program, solve_offline
from .seeding import substream

FLOAT_FMT = "%.17g"  # exact float64 round trip


class DatasetError(ValueError):
    pass


@dataclass
class FeatureStats:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, features):
        return (np.asarray(features, dtype=float) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["scale"], float))


@dataclass
class Dataset:
    features: np.ndarray  # (P, 3K), columns E || B || G
    labels: np.ndarray  # (P, K)
    k: int
    horizon: int
    provenance: dict = field(default_factory=dict)
    normalization_stats: FeatureStats | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, 3 * self.k)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1, self.k)
        if len(self.features) != len(self.labels):
            raise DatasetError("feature and label row counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    @property
    def batteries(self) -> np.ndarray:
        return self.features[:, self.k:2 * self.k]


def _episode_points(config: SystemConfig, horizon: int, seed: int, index: int):
    for attempt in range(2):
        rng = substream(seed, "dataset", index) if attempt == 0 else substream(seed, "retry", index)
        episode = generate_episode(rng, config, horizon)
        try:
            sol = solve_offline(build_offline_program(episode, config))
        except SolverError:
            if attempt:
                raise
            continue
        feats = np.hstack([episode.energies, sol.batteries[:-1], episode.gains])
        return feats, sol.powers
    raise AssertionError("unreachable")


def _episode_chunk(args):
    config, horizon, seed, start, stop = args
    out = [_episode_points(config, horizon, seed, i) for i in range(start, stop)]
    return np.vstack([f for f, _ in out]), np.vstack([p for _, p in out])


def generate_training_set(config: SystemConfig, num_episodes: int, horizon: int = 20,
                          seed: int | None = None, jobs: int = 1) -> Dataset:
    """Solve ``num_episodes`` offline programs and emit one point per slot.

    Episode ``i`` draws from its own substream, so the result is identical for
    any ``jobs``.  A solver failure resamples the episode once, then aborts.
    """
    if num_episodes < 1:
        raise DatasetError("num_episodes must be >= 1")
    seed = config.seed if seed is None else seed
    bounds = np.linspace(0, num_episodes, max(1, min(num_episodes, 8 * jobs)) + 1).astype(int)
    tasks = [(config, horizon, seed, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_episode_chunk, tasks))
    else:
        parts = [_episode_chunk(t) for t in tasks]
    feats = np.vstack([f for f, _ in parts])
    labels = np.vstack([p for _, p in parts])
    prov = {"config": config.to_dict(), "seed": seed, "episodes": num_episodes, "horizon": horizon}
    return Dataset(feats, labels, config.k, horizon, prov)


def split_train_validation(dataset: Dataset, n_val: int, rng: np.random.Generator):
    """Uniform random disjoint split; returns (train, validation)."""
    if not 0 < n_val < len(dataset):
        raise DatasetError(f"n_val={n_val} must lie in (0, {len(dataset)})")
    perm = rng.permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def normalize_features(train: Dataset, validation: Dataset | None = None):
    """Standardize features with training-split statistics.

    Apply once: the map is affine, so applying it to already-normalized data
    shifts it again.  Returns (train, validation, stats).
    """
    if len(train) == 0:
        raise DatasetError("cannot normalize an empty training set")
    mean = train.features.mean(axis=0)
    scale = train.features.std(axis=0)
    flat = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if flat.any():
        warnings.warn(f"zero-variance feature columns {np.flatnonzero(flat).tolist()}; scale set to 1")
        scale = np.where(flat, 1.0, scale)
    stats = FeatureStats(mean, scale)

    def norm(ds):
        if ds is None:
            return None
        return replace(ds, features=stats.apply(ds.features), normalization_stats=stats)

    return norm(train), norm(validation), stats


# -- persistence ------------------------------------------------------------


def column_names(k: int):
    return [f"{p}_{i}" for p in "ebgp" for i in range(1, k + 1)]


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_dataset(dataset: Dataset, path, write_metadata: bool = True) -> None:
    """CSV with a ``k=..,n=..,points=..`` line, a column header, then 17-digit rows."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(f"k={dataset.k},n={dataset.horizon},points={len(dataset)}\n")
        fh.write(",".join(column_names(dataset.k)) + "\n")
        if len(dataset):
            np.savetxt(fh, np.hstack([dataset.features, dataset.labels]), fmt=FLOAT_FMT, delimiter=",")
    tmp.replace(path)
    if write_metadata:
        meta = dict(dataset.provenance)
        meta["k"] = dataset.k
        meta["horizon"] = dataset.horizon
        meta["points"] = len(dataset)
        meta["sha256"] = file_sha256(path)
        if dataset.normalization_stats is not None:
            meta["normalization_stats"] = dataset.normalization_stats.to_dict()
        metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
        try:
            head = dict(item.split("=", 1) for item in first.split(","))
            k, n, points = int(head["k"]), int(head["n"]), int(head["points"])
        except (ValueError, KeyError):
            raise DatasetError(f"{path}: malformed header line {first!r}") from None
        names = fh.readline().strip().split(",")
        if names != column_names(k):
            raise DatasetError(f"{path}: header says k={k} but columns are {len(names)} wide")
        rows = []
        for lineno, line in enumerate(fh, 3):
            if not line.strip():
                continue
            cells = line.split(",")
            if len(cells) != 4 * k:
                raise DatasetError(f"{path}:{lineno}: expected {4 * k} fields, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field") from None
    data = np.array(rows, dtype=float).reshape(-1, 4 * k)
    if len(data) != points:
        raise DatasetError(f"{path}: header promises {points} rows, found {len(data)}")
    prov, stats = {}, None
    meta_file = metadata_path(path)
    if meta_file.exists():
        prov = json.loads(meta_file.read_text())
        if "normalization_stats" in prov:
            stats = FeatureStats.from_dict(prov.pop("normalization_stats"))
        for key in ("k", "horizon", "points", "sha256"):
            prov.pop(key, None)
    return Dataset(data[:, :3 * k], data[:, 3 * k:], k, n, prov, stats)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
