"""Finite-horizon offline throughput maximization.

With all harvests and gains known in advance, the power schedule solves

    maximize   sum_n log(1 + sum_k g_nk p_nk)
    subject to 0 <= p_nk <= min(B_nk, P_max),  s_nk >= 0,
               B_{n+1,k} = B_nk + e_nk - p_nk - s_nk,  0 <= B_{n+1,k} <= B_max.

The spill ``s`` absorbs overflow so every constraint stays linear.  Batteries
are eliminated through the recursion, leaving per node the rows (in this
order, N rows per family except the last)::

    -p_n <= 0
    -s_n <= 0
     p_n <= P_max
     p_n + sum_{i<n}(p_i + s_i) <= B_1 + sum_{i<n} e_i          (p_n <= B_n)
    -sum_{i<=n}(p_i + s_i)      <= B_max - B_1 - sum_{i<=n} e_i (B_{n+1} <= B_max)
     sum_{i<=N}(p_i + s_i)      <= B_1 + sum_{i<=N} e_i          (B_{N+1} >= 0)

B_{n+1} >= 0 for n < N is implied by p_{n+1} <= B_{n+1} and p_{n+1} >= 0.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .envsim import EpisodeRealization, SystemConfig

ROW_FAMILIES = ("p_nonneg", "s_nonneg", "p_cap", "p_battery", "b_upper")


PLATEAU_TOL = 1e-7


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class InstanceTooLarge(ValueError):
    pass


@functools.lru_cache(maxsize=64)
def node_constraint_matrix(n: int) -> np.ndarray:
    """Per-node constraint matrix (5N+1, 2N); columns are p_1..p_N then s_1..s_N."""
    eye = np.eye(n)
    strict = np.tril(np.ones((n, n)), -1)
    incl = np.tril(np.ones((n, n)))
    z = np.zeros((n, n))
    G0 = np.vstack(
        [
            np.hstack([-eye, z]),
            np.hstack([z, -eye]),
            np.hstack([eye, z]),
            np.hstack([eye + strict, strict]),
            np.hstack([-incl, -incl]),
            np.ones((1, 2 * n)),
        ]
    )
    G0.setflags(write=False)
    return G0


@dataclass
class OfflineProgram:
    energies: np.ndarray  # (N, K)
    gains: np.ndarray  # (N, K)
    initial_battery: np.ndarray  # (K,)
    b_max: float
    p_max: float

    @property
    def horizon(self) -> int:
        return self.energies.shape[0]

    @property
    def k(self) -> int:
        return self.energies.shape[1]

    @property
    def num_variables(self) -> int:
        return 2 * self.horizon * self.k

    @property
    def num_constraints(self) -> int:
        return (5 * self.horizon + 1) * self.k

    def node_rhs(self) -> np.ndarray:
        """Right-hand sides (5N+1, K) matching ``node_constraint_matrix``."""
        N, K = self.energies.shape
        B1 = self.initial_battery
        csum = np.cumsum(self.energies, axis=0)
        before = np.vstack([np.zeros((1, K)), csum[:-1]])
        return np.vstack(
            [
                np.zeros((N, K)),
                np.zeros((N, K)),
                np.full((N, K), self.p_max),
                B1 + before,
                self.b_max - B1 - csum,
                (B1 + csum[-1])[None, :],
            ]
        )

    # Dense form in slot-major order: variable (n, kind, k) -> n*2K + kind*K + k,
    # row (n, family, k) -> n*5K + family*K + k, then the K terminal rows.

    def _node_to_dense(self):
        N, K = self.energies.shape
        rows = np.empty((5 * N + 1, K), dtype=np.int64)
        cols = np.empty((2 * N, K), dtype=np.int64)
        ks = np.arange(K)
        for fam in range(5):
            for n in range(N):
                rows[fam * N + n] = n * 5 * K + fam * K + ks
        rows[5 * N] = 5 * N * K + ks
        for kind in range(2):
            for n in range(N):
                cols[kind * N + n] = n * 2 * K + kind * K + ks
        return rows, cols

    def constraint_system(self):
        """Dense ``(G, h, row_slot, col_slot)`` with G x <= h."""
        N, K = self.energies.shape
        G0 = node_constraint_matrix(N)
        h0 = self.node_rhs()
        rows, cols = self._node_to_dense()
        G = np.zeros((self.num_constraints, self.num_variables))
        h = np.empty(self.num_constraints)
        for k in range(K):
            G[np.ix_(rows[:, k], cols[:, k])] = G0
            h[rows[:, k]] = h0[:, k]
        row_slot = np.minimum(np.arange(self.num_constraints) // (5 * K), N - 1)
        col_slot = np.arange(self.num_variables) // (2 * K)
        return G, h, row_slot, col_slot

    def pack(self, powers, spills) -> np.ndarray:
        N, K = self.energies.shape
        x = np.empty((N, 2, K))
        x[:, 0] = powers
        x[:, 1] = spills
        return x.reshape(-1)

    def unpack(self, x):
        x = np.asarray(x).reshape(self.horizon, 2, self.k)
        return x[:, 0].copy(), x[:, 1].copy()

    def objective(self, powers) -> float:
        return float(np.sum(np.log1p(np.sum(self.gains * powers, axis=1))))

    def gradient(self, x) -> np.ndarray:
        """Gradient of the negated objective at the dense point ``x``."""
        p, _ = self.unpack(x)
        u = 1.0 + np.sum(self.gains * p, axis=1)
        grad = np.zeros((self.horizon, 2, self.k))
        grad[:, 0] = -self.gains / u[:, None]
        return grad.reshape(-1)


@dataclass
class OfflineSolution:
    powers: np.ndarray  # (N, K)
    spills: np.ndarray  # (N, K)
    batteries: np.ndarray  # (N+1, K)
    objective: float
    kkt_residual: float = float("nan")
    duals: np.ndarray | None = field(default=None, repr=False)  # dense row order
    iterations: int = 0


def build_offline_program(episode: EpisodeRealization, config: SystemConfig,
                          initial_battery=None) -> OfflineProgram:
    if episode.k != config.k:
        raise ValueError(f"episode has K={episode.k}, config has K={config.k}")
    b0 = config.initial_batteries() if initial_battery is None else initial_battery
    b0 = np.broadcast_to(np.asarray(b0, dtype=float), (config.k,)).copy()
    if np.any(b0 < 0) or np.any(b0 > config.b_max):
        raise ValueError("initial battery outside [0, b_max]")
    return OfflineProgram(
        energies=np.array(episode.energies, dtype=float),
        gains=np.array(episode.gains, dtype=float),
        initial_battery=b0,
        b_max=float(config.b_max),
        p_max=float(config.p_max),
    )


def _settle(program: OfflineProgram, powers):
    """Clip powers into their caps and spill only what overflows (the clipped recursion)."""
    N, K = powers.shape
    p = np.empty_like(powers)
    b = np.empty((N + 1, K))
    s = np.empty_like(powers)
    b[0] = program.initial_battery
    for n in range(N):
        p[n] = np.clip(powers[n], 0.0, np.minimum(b[n], program.p_max))
        level = b[n] + program.energies[n] - p[n]
        b[n + 1] = np.minimum(level, program.b_max)
        s[n] = level - b[n + 1]
    return p, s, b


def solve_offline(program: OfflineProgram, tol: float = 1e-6, max_iter: int = 200,
                  feas_tol: float = 1e-9, gap_tol: float = 1e-10) -> OfflineSolution:
    """Optimal offline schedule via a structured primal-dual interior-point method.

    ``tol`` bounds the relative objective gap; ``feas_tol``/``gap_tol`` bound the
    stationarity, primal and per-constraint complementarity residuals.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    N, K = program.energies.shape
    G0 = node_constraint_matrix(N)
    h0 = np.ascontiguousarray(program.node_rhs())
    gains = np.ascontiguousarray(program.gains)
    x0 = np.zeros((2 * N, K))
    x0[:N] = 0.5 * np.minimum(program.p_max, np.maximum(program.energies, 0.1))
    x0[N:] = 0.1
    x, lam, z, iters, ok, res_d, res_p, mu = _kernels.ipm_solve(
        G0, h0, gains, x0, max_iter, feas_tol, gap_tol
    )
    objective = program.objective(x[:N])
    gap = mu * lam.size
    # a stalled run is still usable when it sits within the looser plateau band
    plateau = max(res_d, res_p) <= PLATEAU_TOL
    if not (ok or plateau) or gap > tol * (1.0 + abs(objective)):
        raise SolverError(
            f"interior point did not converge in {iters + 1} iterations "
            f"(dual {res_d:.2e}, primal {res_p:.2e}, mu {mu:.2e})",
            residual=max(res_d, res_p, mu),
        )
    p, s, b = _settle(program, x[:N])
    rows, _ = program._node_to_dense()
    duals = np.empty(program.num_constraints)
    duals[rows.ravel()] = lam.ravel()
    sol = OfflineSolution(p, s, b, program.objective(p), duals=duals, iterations=int(iters))
    sol.kkt_residual = kkt_residual(sol, program)
    return sol


def _kkt_violation(program, x, lam, G, h) -> float:
    slack = h - G @ x
    stat = program.gradient(x) + G.T @ lam
    return float(max(
        np.max(np.abs(stat)),
        np.max(np.abs(lam * slack)),
        np.max(np.maximum(-slack, 0.0)),
        np.max(np.maximum(-lam, 0.0)),
    ))


def kkt_residual(solution: OfflineSolution, program: OfflineProgram,
                 use_solution_duals: bool = True) -> float:
    """Largest stationarity / complementarity / feasibility violation.

    Uses the solver's multipliers when present (and allowed); otherwise the
    multipliers are fitted by nonnegative least squares on
    [G^T; diag(slack)] lam ~ [-grad; 0], so any point gets a certificate.
    """
    from scipy.optimize import nnls

    G, h, _, _ = program.constraint_system()
    x = program.pack(solution.powers, solution.spills)
    if use_solution_duals and solution.duals is not None:
        lam = solution.duals
    else:
        slack = np.maximum(h - G @ x, 0.0)
        A = np.vstack([G.T, np.diag(slack)])
        rhs = np.concatenate([-program.gradient(x), np.zeros(len(h))])
        lam, _ = nnls(A, rhs, maxiter=50 * A.shape[1])
    return _kkt_violation(program, x, lam, G, h)


def brute_force_offline(program: OfflineProgram, grid_step: float = 0.05,
                        max_points: float = 1e8, chunk: int = 4096) -> OfflineSolution:
    """Exhaustive search over a power grid; the oracle for ``solve_offline``.

    Each (slot, node) takes values on {0, step, 2 step, ...} below its cap
    min(B, P_max) plus the cap itself.  Spill is whatever overflows B_max.
    """
    N, K = program.energies.shape
    levels = np.arange(0.0, program.p_max, grid_step)
    per_var = len(levels) + 1
    if float(per_var) ** (N * K) > max_points:
        raise InstanceTooLarge(f"{per_var}^{N * K} grid points exceeds {max_points:g}")

    # candidate index c < len(levels) means levels[c]; c == len(levels) means the cap
    combos = np.stack(np.meshgrid(*[np.arange(per_var)] * K, indexing="ij"), -1).reshape(-1, K)

    def expand(batt, n):
        cap = np.minimum(batt, program.p_max)  # (F, K)
        lv = np.append(levels, np.inf)[combos]  # (C, K)
        ok = np.all((lv[None] < cap[:, None]) | (combos[None] == len(levels)), axis=2)
        rows, cidx = np.nonzero(ok)
        p = np.where(combos[cidx] == len(levels), cap[rows], lv[cidx])
        rate = np.log1p(p @ program.gains[n])
        return rows, p, rate

    batt = program.initial_battery[None, :].copy()
    obj = np.zeros(1)
    hist = np.zeros((1, 0, K))
    for n in range(N - 1):
        rows, p, rate = expand(batt, n)
        batt = np.minimum(batt[rows] + program.energies[n] - p, program.b_max)
        obj = obj[rows] + rate
        hist = np.concatenate([hist[rows], p[:, None, :]], axis=1)

    best, best_sched = -np.inf, None
    for lo in range(0, len(obj), chunk):
        sl = slice(lo, lo + chunk)
        rows, p, rate = expand(batt[sl], N - 1)
        tot = obj[sl][rows] + rate
        i = int(np.argmax(tot))
        if tot[i] > best:
            best = float(tot[i])
            best_sched = np.vstack([hist[sl][rows[i]], p[i][None, :]])

    p, s, b = _settle(program, best_sched)
    return OfflineSolution(p, s, b, program.objective(p))
