"""Hot numeric kernels.

Each kernel is a plain function written in the numpy subset numba compiles.
``_accel.jit`` compiles it or leaves it as Python; helpers whose bodies are
scalar loops get a vectorized numpy twin when numba is off.
"""
import numpy as np

from ._accel import USE_NUMBA, jit

# ---------------------------------------------------------------------------
# small linear-algebra / step helpers


if USE_NUMBA:

    @jit
    def cho_solve(L, b):
        n = L.shape[0]
        y = np.empty(n)
        for i in range(n):
            acc = b[i]
            for j in range(i):
                acc -= L[i, j] * y[j]
            y[i] = acc / L[i, i]
        x = np.empty(n)
        for i in range(n - 1, -1, -1):
            acc = y[i]
            for j in range(i + 1, n):
                acc -= L[j, i] * x[j]
            x[i] = acc / L[i, i]
        return x

    @jit
    def max_step(v, dv):
        # largest a in (0, inf] with v + a*dv >= 0; v > 0 assumed
        a = np.inf
        vf = v.ravel()
        df = dv.ravel()
        for i in range(vf.size):
            if df[i] < 0.0:
                r = -vf[i] / df[i]
                if r < a:
                    a = r
        return a

else:
    from scipy.linalg import solve_triangular

    def cho_solve(L, b):
        y = solve_triangular(L, b, lower=True, check_finite=False)
        return solve_triangular(L.T, y, lower=False, check_finite=False)

    def max_step(v, dv):
        neg = dv < 0.0
        if not neg.any():
            return np.inf
        return float(np.min(-v[neg] / dv[neg]))


# ---------------------------------------------------------------------------
# offline program: primal-dual interior point


@jit
def _slot_affinity(x, gains):
    # 1 + sum_k g_nk p_nk per slot
    N = gains.shape[0]
    return 1.0 + np.sum(gains * x[:N], axis=1)


@jit
def _normal_matrix(G0, w, gains, u):
    m0, n2 = G0.shape
    N, K = gains.shape
    nv = n2 * K
    M = np.zeros((nv, nv))
    G0T = np.ascontiguousarray(G0.T)
    for k in range(K):
        WG = G0 * w[:, k:k + 1]
        M[k * n2:(k + 1) * n2, k * n2:(k + 1) * n2] = G0T @ WG
    for n in range(N):
        c = 1.0 / (u[n] * u[n])
        for k in range(K):
            gk = gains[n, k] * c
            for j in range(K):
                M[k * n2 + n, j * n2 + n] += gk * gains[n, j]
    return M


@jit
def _newton_direction(L, M, G0, G0T, rd, rp, rc, z, lam):
    n2, K = rd.shape
    rhs = np.ascontiguousarray((-rd - G0T @ ((rc + lam * rp) / z)).T).ravel()
    dxv = cho_solve(L, rhs)
    # L factors a shifted M; refinement recovers the unshifted solution
    for _ in range(3):
        dxv = dxv + cho_solve(L, rhs - M @ dxv)
    dx = np.ascontiguousarray(dxv.reshape(K, n2).T)
    dz = -rp - G0 @ dx
    dlam = (rc - lam * dz) / z
    return dx, dz, dlam


@jit
def ipm_solve(G0, h, gains, x, max_iter, feas_tol, gap_tol):
    """Maximize sum_n log(1 + sum_k g_nk p_nk) subject to G0 x_k <= h_k per node.

    ``x`` is (2N, K): rows [0, N) are transmit energies, rows [N, 2N) spills.
    Mehrotra predictor-corrector with infeasible start, so programs whose
    feasible set has no interior (empty batteries) are handled.

    Returns (x, lam, z, iterations, converged, dual_res, primal_res, mu).
    """
    m0, n2 = G0.shape
    N = gains.shape[0]
    m = m0 * h.shape[1]
    G0T = np.ascontiguousarray(G0.T)
    x = x.copy()
    hscale = 1.0 + np.max(np.abs(h))
    z = np.maximum(h - G0 @ x, 1.0)
    lam = np.ones_like(h)
    res_d = np.inf
    res_p = np.inf
    mu = np.inf
    converged = False
    it = 0
    best = np.inf
    best_x = x.copy()
    best_lam = lam.copy()
    best_z = z.copy()
    best_res = (np.inf, np.inf, np.inf)
    stale = 0
    for it in range(max_iter):
        u = _slot_affinity(x, gains)
        grad = np.zeros_like(x)
        grad[:N] = -gains / u.reshape(N, 1)
        rd = grad + G0T @ lam
        rp = G0 @ x + z - h
        mu = np.sum(z * lam) / m
        res_d = np.max(np.abs(rd))
        res_p = np.max(np.abs(rp)) / hscale
        if res_d <= feas_tol and res_p <= feas_tol and mu <= gap_tol:
            converged = True
            break
        # flat optimal faces (e.g. a free final spill) can stall the dual
        # residual; keep the best iterate and stop once progress ends
        merit = max(res_d, res_p, mu)
        stale = 0 if merit < 0.5 * best else stale + 1
        if merit < best:
            best = merit
            best_x[:] = x
            best_lam[:] = lam
            best_z[:] = z
            best_res = (res_d, res_p, mu)
        if stale >= 15:
            break
        M = _normal_matrix(G0, lam / z, gains, u)
        # lam/z spans many decades near the optimum; a relative diagonal
        # shift keeps the factorization from losing definiteness to rounding
        Ms = M.copy()
        shift = 1e-13 * np.max(np.diag(M))
        for i in range(M.shape[0]):
            Ms[i, i] += shift
        L = np.linalg.cholesky(Ms)

        # predictor
        rc = -z * lam
        dx, dz, dlam = _newton_direction(L, M, G0, G0T, rd, rp, rc, z, lam)
        a_aff = min(1.0, max_step(z, dz), max_step(lam, dlam))
        mu_aff = np.sum((z + a_aff * dz) * (lam + a_aff * dlam)) / m
        sigma = (mu_aff / mu) ** 3

        # corrector
        rc = sigma * mu - z * lam - dz * dlam
        dx, dz, dlam = _newton_direction(L, M, G0, G0T, rd, rp, rc, z, lam)
        a = min(1.0, 0.99 * min(max_step(z, dz), max_step(lam, dlam)))
        # stay inside the log domain
        while np.min(_slot_affinity(x + a * dx, gains)) <= 0.0:
            a *= 0.5
        x += a * dx
        z += a * dz
        lam += a * dlam
    if converged:
        return x, lam, z, it, True, res_d, res_p, mu
    return best_x, best_lam, best_z, it, False, best_res[0], best_res[1], best_res[2]


# ---------------------------------------------------------------------------
# dynamics / policies


@jit
def battery_rollout(b0, energies, powers, b_max):
    """Battery trajectory (N+1, K) under the clipped recursion for fixed powers."""
    N, K = energies.shape
    out = np.empty((N + 1, K))
    out[0] = b0
    for n in range(N):
        for k in range(K):
            b = out[n, k] + energies[n, k] - powers[n, k]
            if b < 0.0:
                b = 0.0
            elif b > b_max:
                b = b_max
            out[n + 1, k] = b
    return out


@jit
def mlp_forward_flat(flat_w, flat_b, sizes, x, slope):
    """Single-sample forward pass over weights packed row-major, layer after layer."""
    a = x.copy()
    wo = 0
    bo = 0
    nl = sizes.size - 1
    for j in range(nl):
        n_in = sizes[j]
        n_out = sizes[j + 1]
        W = flat_w[wo:wo + n_out * n_in].reshape(n_out, n_in)
        zj = W @ a + flat_b[bo:bo + n_out]
        if j < nl - 1:
            zj = np.where(zj >= 0.0, zj, slope * zj)
        a = zj
        wo += n_out * n_in
        bo += n_out
    return a


# ---------------------------------------------------------------------------
# factored Bellman backup for the discretized point-to-point chain


if USE_NUMBA:

    @jit
    def bellman_backup(V, reward, next_b, feasible, pe, pg, tau):
        """One relative-value-iteration sweep with the aperiodicity transform.

        V: (nb, ne, ng) values, reward: (ng, na), next_b: (nb, ne, na) ints,
        feasible: (nb, na) bools.  Returns (TV, greedy action index).
        """
        nb, ne, ng = V.shape
        na = reward.shape[1]
        W = np.zeros(nb)
        for b in range(nb):
            acc = 0.0
            for e in range(ne):
                for g in range(ng):
                    acc += pe[e] * pg[g] * V[b, e, g]
            W[b] = acc
        TV = np.empty_like(V)
        act = np.zeros((nb, ne, ng), dtype=np.int64)
        for b in range(nb):
            for e in range(ne):
                for g in range(ng):
                    best = -np.inf
                    besta = 0
                    for a in range(na):
                        if not feasible[b, a]:
                            continue
                        q = reward[g, a] + W[next_b[b, e, a]]
                        if q > best:
                            best = q
                            besta = a
                    TV[b, e, g] = tau * V[b, e, g] + (1.0 - tau) * best
                    act[b, e, g] = besta
        return TV, act

else:

    def bellman_backup(V, reward, next_b, feasible, pe, pg, tau):
        W = np.einsum("beg,e,g->b", V, pe, pg)
        # Q[b, e, g, a]
        Q = reward[None, None, :, :] + W[next_b][:, :, None, :]
        Q = np.where(feasible[:, None, None, :], Q, -np.inf)
        act = np.argmax(Q, axis=-1)
        best = np.take_along_axis(Q, act[..., None], axis=-1)[..., 0]
        return tau * V + (1.0 - tau) * best, act.astype(np.int64)
