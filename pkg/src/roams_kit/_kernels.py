"""Compiled inner loops for the Kalman recursions.

All filters in the package (plain, mean-shift zero-gain, threshold, fast-updating
threshold and the huberized-innovation benchmark filter) are one kernel with
different knobs, so reductions between them hold bitwise.
"""

import functools

import numba as nb
import numpy as np

STATUS_OK = 0
STATUS_SINGULAR = 1
STATUS_NOT_PSD = 2
STATUS_NONFINITE = 3

COND_LIMIT = 1e12
PSD_TOL = 1e-10


@nb.njit(cache=True)
def _cholesky(S, L):
    p = S.shape[0]
    for i in range(p):
        for j in range(p):
            L[i, j] = 0.0
    for j in range(p):
        d = S[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 0.0:
            return False
        ljj = np.sqrt(d)
        L[j, j] = ljj
        for i in range(j + 1, p):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / ljj
    return True


@nb.njit(cache=True)
def _forward(L, b, z):
    p = L.shape[0]
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * z[k]
        z[i] = s / L[i, i]


@nb.njit(cache=True)
def _backward(L, z, x):
    # solves L^T x = z
    p = L.shape[0]
    for i in range(p - 1, -1, -1):
        s = z[i]
        for k in range(i + 1, p):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


@nb.njit(cache=True)
def _condition(S):
    p = S.shape[0]
    if p == 1:
        return 1.0 if S[0, 0] > 0.0 else np.inf
    if p == 2:
        half_tr = 0.5 * (S[0, 0] + S[1, 1])
        dev = np.sqrt(0.25 * (S[0, 0] - S[1, 1]) ** 2 + S[0, 1] * S[1, 0])
        lo = half_tr - dev
        hi = half_tr + dev
        if not lo > 0.0:
            return np.inf
        return hi / lo
    ev = np.linalg.eigvalsh(S)
    if not ev[0] > 0.0:
        return np.inf
    return ev[-1] / ev[0]


@functools.lru_cache(maxsize=None)
def _compiled_pass(p_dim, q_dim):
    # sizes as closure constants let the compiler unroll the small matrix
    # loops (about 2x faster); each (p, q) is compiled and cached separately

    @nb.njit(cache=True)
    def kalman_pass(A, Phi, obs_cov, state_cov, mu0, cov0, y, missing, zero_gain,
                    gamma, c, b, huber_k):
        """Forward pass over ``y`` (n x p).

        Gain is zeroed where ``missing`` or ``zero_gain`` is set, or where the
        Mahalanobis innovation exceeds ``c``.  At flagged (zero-gain, observed)
        points the filtered covariance is ``b`` times the predicted one.  A finite
        ``huber_k`` shrinks the innovation by ``min(1, huber_k / MD)`` in the mean
        update.  ``gamma`` rows are subtracted from the residual in ``md2_adj``.
        """
        n = y.shape[0]
        p = p_dim
        q = q_dim
        xp = np.empty((n, q))
        Pp = np.empty((n, q, q))
        yp = np.empty((n, p))
        S = np.empty((n, p, p))
        K = np.zeros((n, q, p))
        xf = np.empty((n, q))
        Pf = np.empty((n, q, q))
        resid = np.full((n, p), np.nan)
        logdet = np.full(n, np.nan)
        md2 = np.full(n, np.nan)
        md2_adj = np.full(n, np.nan)
        flagged = np.zeros(n, dtype=np.bool_)

        x = mu0.copy()
        P = cov0.copy()
        tmp = np.empty((q, q))
        AP = np.empty((p, q))
        L = np.empty((p, p))
        r = np.empty(p)
        z = np.empty(p)
        W = np.empty((p, q))
        col = np.empty(p)
        sol = np.empty(p)

        for t in range(n):
            # prediction
            for i in range(q):
                s = 0.0
                for j in range(q):
                    s += Phi[i, j] * x[j]
                xp[t, i] = s
            for i in range(q):
                for j in range(q):
                    s = 0.0
                    for k in range(q):
                        s += Phi[i, k] * P[k, j]
                    tmp[i, j] = s
            for i in range(q):
                for j in range(q):
                    s = state_cov[i, j]
                    for k in range(q):
                        s += tmp[i, k] * Phi[j, k]
                    Pp[t, i, j] = s
            for i in range(q):
                for j in range(i + 1, q):
                    m = 0.5 * (Pp[t, i, j] + Pp[t, j, i])
                    Pp[t, i, j] = m
                    Pp[t, j, i] = m
            for i in range(p):
                s = 0.0
                for j in range(q):
                    s += A[i, j] * xp[t, j]
                yp[t, i] = s
            for i in range(p):
                for j in range(q):
                    s = 0.0
                    for k in range(q):
                        s += A[i, k] * Pp[t, k, j]
                    AP[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = obs_cov[i, j]
                    for k in range(q):
                        s += AP[i, k] * A[j, k]
                    S[t, i, j] = s
            for i in range(p):
                for j in range(i + 1, p):
                    m = 0.5 * (S[t, i, j] + S[t, j, i])
                    S[t, i, j] = m
                    S[t, j, i] = m

            if missing[t]:
                for i in range(q):
                    xf[t, i] = xp[t, i]
                    for j in range(q):
                        Pf[t, i, j] = Pp[t, i, j]
                x[:] = xf[t]
                P[:, :] = Pf[t]
                continue

            if not _cholesky(S[t], L):
                return (xp, Pp, yp, S, K, xf, Pf, resid, logdet, md2, md2_adj,
                        flagged, STATUS_SINGULAR, t)
            if _condition(S[t]) > COND_LIMIT:
                return (xp, Pp, yp, S, K, xf, Pf, resid, logdet, md2, md2_adj,
                        flagged, STATUS_SINGULAR, t)

            for i in range(p):
                r[i] = y[t, i] - yp[t, i]
                resid[t, i] = r[i]
            _forward(L, r, z)
            d2 = 0.0
            ld = 0.0
            for i in range(p):
                d2 += z[i] * z[i]
                ld += np.log(L[i, i])
            md2[t] = d2
            logdet[t] = 2.0 * ld
            shifted = False
            for i in range(p):
                if gamma[t, i] != 0.0:
                    shifted = True
            if shifted:
                for i in range(p):
                    col[i] = r[i] - gamma[t, i]
                _forward(L, col, z)
                d2s = 0.0
                for i in range(p):
                    d2s += z[i] * z[i]
                md2_adj[t] = d2s
            else:
                md2_adj[t] = d2

            md = np.sqrt(d2)
            if zero_gain[t] or md > c:
                flagged[t] = True
                for i in range(q):
                    xf[t, i] = xp[t, i]
                    for j in range(q):
                        Pf[t, i, j] = b * Pp[t, i, j]
            else:
                # W = S^{-1} A P, K = W^T
                for j in range(q):
                    for i in range(p):
                        col[i] = AP[i, j]
                    _forward(L, col, z)
                    _backward(L, z, sol)
                    for i in range(p):
                        W[i, j] = sol[i]
                        K[t, j, i] = sol[i]
                w = 1.0
                if md > huber_k:
                    w = huber_k / md
                for i in range(q):
                    s = 0.0
                    if w == 1.0:
                        for k in range(p):
                            s += K[t, i, k] * r[k]
                    else:
                        for k in range(p):
                            s += K[t, i, k] * (w * r[k])
                    xf[t, i] = xp[t, i] + s
                for i in range(q):
                    for j in range(q):
                        s = 0.0
                        for k in range(p):
                            s += K[t, i, k] * AP[k, j]
                        Pf[t, i, j] = Pp[t, i, j] - s
                for i in range(q):
                    for j in range(i + 1, q):
                        m = 0.5 * (Pf[t, i, j] + Pf[t, j, i])
                        Pf[t, i, j] = m
                        Pf[t, j, i] = m
                for i in range(q):
                    if Pf[t, i, i] < -PSD_TOL:
                        return (xp, Pp, yp, S, K, xf, Pf, resid, logdet, md2,
                                md2_adj, flagged, STATUS_NOT_PSD, t)
            for i in range(q):
                if not np.isfinite(xf[t, i]):
                    return (xp, Pp, yp, S, K, xf, Pf, resid, logdet, md2, md2_adj,
                            flagged, STATUS_NONFINITE, t)
            x[:] = xf[t]
            P[:, :] = Pf[t]

        return (xp, Pp, yp, S, K, xf, Pf, resid, logdet, md2, md2_adj, flagged,
                STATUS_OK, -1)

    return kalman_pass


def kalman_pass(A, Phi, obs_cov, state_cov, mu0, cov0, y, missing, zero_gain,
                gamma, c, b, huber_k):
    """Dispatch to the kernel compiled for ``(p, q)``; see the inner docstring."""
    return _compiled_pass(y.shape[1], Phi.shape[0])(
        A, Phi, obs_cov, state_cov, mu0, cov0, y, missing, zero_gain, gamma, c, b, huber_k)
