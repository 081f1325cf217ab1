"""Fully connected Leaky-ReLU network mapping a 3K state to K transmit energies.

Forward/backward passes, Adam training with best-validation checkpointing,
and a JSON checkpoint format.  Weight matrices are (N_out, N_in) and act on
row-vector batches as ``A @ W.T + b``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import mlp_forward_flat
from .seeding import substream

CHECKPOINT_FORMAT = "ehpower-mlp"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite pre-activation at layer {layer}")
        self.layer = layer


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class CheckpointError(ValueError):
    pass


@dataclass
class MlpArchitecture:
    sizes: list
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")

    @property
    def hidden_count(self) -> int:
        return len(self.sizes) - 2

    @property
    def multiplications(self) -> int:
        return sum(a * b for a, b in zip(self.sizes[1:], self.sizes[:-1]))


def build_architecture(k: int, hidden_layers: int = 30, leaky_slope: float = 0.01) -> MlpArchitecture:
    """Input 3K, first hidden 30K, then widths alternate: repeat, shrink by 2K; output K.

    With the default 30 hidden layers the last hidden pair is 2K wide.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= hidden_layers <= 30:
        raise ValueError(f"hidden_layers must be in [1, 30], got {hidden_layers}")
    sizes = [3 * k, 30 * k]
    for j in range(3, hidden_layers + 2):  # layer index j, input layer is j = 1
        sizes.append(sizes[-1] if j % 2 else sizes[-1] - 2 * k)
    sizes.append(k)
    return MlpArchitecture(sizes, leaky_slope)


@dataclass
class MlpParameters:
    architecture: MlpArchitecture
    weights: list
    biases: list
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        sizes = self.architecture.sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count does not match architecture")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[j + 1], sizes[j]) or b.shape != (sizes[j + 1],):
                raise ValueError(f"layer {j + 1}: got W{W.shape}, b{b.shape} for sizes {sizes[j:j + 2]}")

    def copy(self) -> "MlpParameters":
        return MlpParameters(self.architecture, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    def flat(self):
        if self._flat is None:
            self._flat = (
                np.concatenate([w.ravel() for w in self.weights]),
                np.concatenate(self.biases),
                np.array(self.architecture.sizes, dtype=np.int64),
            )
        return self._flat

    def vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_vector(self, v) -> "MlpParameters":
        ws, bs, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(v[i:i + w.size].reshape(w.shape).copy())
            i += w.size
            bs.append(v[i:i + b.size].copy())
            i += b.size
        return MlpParameters(self.architecture, ws, bs)


def init_parameters(arch: MlpArchitecture, rng: np.random.Generator) -> MlpParameters:
    """He-style fan-in Gaussian init, gain adjusted for the leaky slope; zero biases."""
    gain = 2.0 / (1.0 + arch.leaky_slope ** 2)
    ws, bs = [], []
    for n_in, n_out in zip(arch.sizes[:-1], arch.sizes[1:]):
        ws.append(rng.normal(0.0, math.sqrt(gain / n_in), size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    return MlpParameters(arch, ws, bs)


class MultiplyCounter:
    def __init__(self):
        self.count = 0


def _leaky(z, slope):
    return np.where(z >= 0, z, slope * z)


def forward(params: MlpParameters, x, counter: MultiplyCounter | None = None) -> np.ndarray:
    """Network output for one input vector or a (B, 3K) batch; the head is linear."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.architecture.sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != {params.architecture.sizes[0]}")
    slope = params.architecture.leaky_slope
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        if counter is not None:
            counter.count += a.shape[0] * W.size
        if not np.isfinite(z).all():
            raise NonFiniteError(j + 2)
        a = z if j == last else _leaky(z, slope)
    return a[0] if single else a


def forward_single(params: MlpParameters, x) -> np.ndarray:
    """Fast path for one state vector (compiled kernel when numba is on)."""
    flat_w, flat_b, sizes = params.flat()
    return mlp_forward_flat(flat_w, flat_b, sizes, np.ascontiguousarray(x, dtype=float),
                            params.architecture.leaky_slope)


def loss(params: MlpParameters, X, Y) -> float:
    """Mean over the batch of the squared Euclidean error."""
    out = forward(params, np.atleast_2d(X))
    Y = np.atleast_2d(Y)
    if out.shape != Y.shape:
        raise ValueError(f"output shape {out.shape} != label shape {Y.shape}")
    return float(np.sum((out - Y) ** 2) / len(Y))


def loss_gradient(params: MlpParameters, X, Y):
    """Loss and exact gradients ``(loss, dW list, db list)`` by reverse accumulation."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if len(X) == 0:
        raise ValueError("empty batch")
    slope = params.architecture.leaky_slope
    acts, pres = [X], []
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ W.T + b
        if not np.isfinite(z).all():
            raise NonFiniteError(j + 2)
        pres.append(z)
        acts.append(z if j == last else _leaky(z, slope))
    out = acts[-1]
    if out.shape != Y.shape:
        raise ValueError(f"output shape {out.shape} != label shape {Y.shape}")
    n = len(Y)
    diff = out - Y
    value = float(np.sum(diff ** 2) / n)
    dz = 2.0 * diff / n
    dWs, dbs = [None] * (last + 1), [None] * (last + 1)
    for j in range(last, -1, -1):
        dWs[j] = dz.T @ acts[j]
        dbs[j] = dz.sum(axis=0)
        if j:
            da = dz @ params.weights[j]
            dz = da * np.where(pres[j - 1] >= 0, 1.0, slope)
    return value, dWs, dbs


def kink_distance(params: MlpParameters, X) -> float:
    """Smallest |pre-activation| over hidden units; finite differences need it well above the step."""
    a = np.atleast_2d(np.asarray(X, dtype=float))
    best = np.inf
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ W.T + b
        best = min(best, float(np.min(np.abs(z))))
        a = _leaky(z, params.architecture.leaky_slope)
    return best


def gradient_check(params: MlpParameters, X, Y, step: float = 1e-6) -> float:
    """Max over parameter tensors of ||analytic - central FD|| / max(||analytic||, ||FD||)."""
    _, dWs, dbs = loss_gradient(params, X, Y)
    v = params.vector()
    fd = np.empty_like(v)
    for i in range(len(v)):
        old = v[i]
        v[i] = old + step
        up = loss(params.with_vector(v), X, Y)
        v[i] = old - step
        down = loss(params.with_vector(v), X, Y)
        v[i] = old
        fd[i] = (up - down) / (2 * step)
    worst, i = 0.0, 0
    for g in [t for pair in zip(dWs, dbs) for t in pair]:
        f = fd[i:i + g.size]
        i += g.size
        scale = max(np.linalg.norm(g), np.linalg.norm(f))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(g.ravel() - f) / scale))
    return worst


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    optimizer: str = "adam"
    patience: int = 20
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("learning_rate", "batch_size", "epochs", "patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    params: MlpParameters
    train_loss: list
    val_loss: list
    best_epoch: int
    final_params: MlpParameters | None = field(default=None, repr=False)

    def curves_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), 1):
            lines.append(f"{i},{a!r},{b!r}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: MlpParameters, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.weights + params.biases]
        self.v = [np.zeros_like(a) for a in params.weights + params.biases]
        self.t = 0

    def step(self, params: MlpParameters, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params.weights + params.biases, grads)):
            self.m[i] *= self.b1
            self.m[i] += (1 - self.b1) * g
            self.v[i] *= self.b2
            self.v[i] += (1 - self.b2) * g * g
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


class Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params.weights + params.biases, grads):
            p -= self.lr * g


def train(train_set, validation_set, architecture: MlpArchitecture, config: TrainConfig,
          log=None) -> TrainResult:
    """Minibatch training; returns the parameters with the lowest validation loss.

    ``train_set``/``validation_set`` are normalized datasets (anything with
    ``features`` and ``labels``).  Validation labels only feed the curve and
    early stopping.
    """
    X, Y = train_set.features, train_set.labels
    Xv, Yv = validation_set.features, validation_set.labels
    if X.shape[1] != architecture.sizes[0] or Y.shape[1] != architecture.sizes[-1]:
        raise ValueError(f"data widths {X.shape[1]}->{Y.shape[1]} do not fit {architecture.sizes}")
    rng = substream(config.seed, "train")
    params = init_parameters(architecture, rng)
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else Sgd(params, config.learning_rate)
    best, best_val, best_epoch = params.copy(), np.inf, 0
    tr_curve, val_curve = [], []
    n = len(X)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            try:
                value, dW, db = loss_gradient(params, X[idx], Y[idx])
            except NonFiniteError as exc:
                res = TrainResult(best, tr_curve, val_curve, best_epoch, params)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", res) from exc
            grads = dW + db
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > config.clip_norm:
                grads = [g * (config.clip_norm / norm) for g in grads]
            opt.step(params, grads)
            params._flat = None
            total += value * len(idx)
        tr_curve.append(total / n)
        try:
            v = loss(params, Xv, Yv)
        except NonFiniteError:
            v = float("nan")
        val_curve.append(v)
        if log:
            log(f"epoch {epoch:4d}  train {tr_curve[-1]:.6g}  val {v:.6g}")
        if not math.isfinite(v) or not math.isfinite(tr_curve[-1]):
            res = TrainResult(best, tr_curve, val_curve, best_epoch, params)
            raise TrainingDiverged(f"epoch {epoch}: validation loss {v}", res)
        if v < best_val:
            best, best_val, best_epoch = params.copy(), v, epoch
        elif epoch - best_epoch >= config.patience:
            break
    return TrainResult(best, tr_curve, val_curve, best_epoch, params)


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    params: MlpParameters
    stats: object | None = None  # datagen.FeatureStats
    train_config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.params.architecture.sizes[-1]


def checkpoint_dict(params: MlpParameters, stats=None, train_config=None, provenance=None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {"sizes": params.architecture.sizes, "leaky_slope": params.architecture.leaky_slope},
        "normalization": None if stats is None else {"mean": stats.mean.tolist(), "scale": stats.scale.tolist()},
        "train_config": train_config or {},
        "provenance": provenance or {},
        "layers": [{"weight": W.tolist(), "bias": b.tolist()} for W, b in zip(params.weights, params.biases)],
    }


def save_checkpoint(params: MlpParameters, stats, path, train_config=None, provenance=None) -> None:
    if isinstance(train_config, TrainConfig):
        train_config = asdict(train_config)
    text = json.dumps(checkpoint_dict(params, stats, train_config, provenance), sort_keys=True)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n")
    tmp.replace(path)


def load_checkpoint(path, expect_k: int | None = None) -> Checkpoint:
    from .datagen import FeatureStats

    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint at line {exc.lineno} column {exc.colno} "
                              f"(char {exc.pos}): {exc.msg}") from None
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    try:
        arch = MlpArchitecture(d["architecture"]["sizes"], float(d["architecture"]["leaky_slope"]))
        ws = [np.array(layer["weight"], dtype=float) for layer in d["layers"]]
        bs = [np.array(layer["bias"], dtype=float) for layer in d["layers"]]
        params = MlpParameters(arch, ws, bs)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: schema/shape mismatch: {exc}") from None
    if not all(np.isfinite(a).all() for a in ws + bs):
        raise CheckpointError(f"{path}: non-finite weights")
    stats = None
    if d.get("normalization") is not None:
        stats = FeatureStats.from_dict(d["normalization"])
        if stats.mean.shape != (arch.sizes[0],) or stats.scale.shape != (arch.sizes[0],):
            raise CheckpointError(f"{path}: normalization stats do not match input width")
    ck = Checkpoint(params, stats, d.get("train_config", {}), d.get("provenance", {}))
    if arch.sizes[0] != 3 * ck.k:
        raise CheckpointError(f"{path}: input width {arch.sizes[0]} is not 3 x output width {ck.k}")
    if expect_k is not None and ck.k != expect_k:
        raise CheckpointError(f"{path}: checkpoint is for K={ck.k}, expected K={expect_k}")
    return ck


def params_digest(params: MlpParameters) -> str:
    return hashlib.sha256(params.vector().tobytes()).hexdigest()
