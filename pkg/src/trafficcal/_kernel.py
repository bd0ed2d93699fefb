"""Compiled batch simulator: many (parameter, boundary) pairs straight to detector windows.

Same arithmetic as :mod:`trafficcal.ctm` (and the relaxed operators of
:mod:`trafficcal.smooth` when ``tau``/``beta`` are positive), but it
returns only the stacked observation array.  Row ``n`` of the parameter
arrays is simulated against boundary ``bidx[n]``, so a search can share
one boundary across many candidate parameter sets.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# fail codes
OK = -1
_NEGLIGIBLE = 38.0  # exp(-38) < 2**-54


@njit(cache=True, inline="always")
def _min3(a, b, c, tau):
    m = min(a, min(b, c))
    if tau <= 0.0:
        return m
    # terms below half an ulp of 1 cannot change the sum, so skipping them is exact
    s = 1.0
    n_min = 0
    for x in (a, b, c):
        d = (x - m) / tau
        if d == 0.0 and n_min == 0:
            n_min = 1
        elif d < _NEGLIGIBLE:
            s += math.exp(-d)
    if s == 1.0:
        return m
    return m - tau * math.log(s)


@njit(cache=True, inline="always")
def _positive(x, tau):
    if tau <= 0.0:
        return max(x, 0.0)
    if x > _NEGLIGIBLE * tau:
        return x
    return max(x, 0.0) + tau * math.log1p(math.exp(-abs(x) / tau))


@njit(cache=True, inline="always")
def _capacity(rho, qn, qd, v, beta):
    crit = qn / v
    if beta <= 0.0:
        return qn if rho <= crit else qd
    z = beta * (crit - rho)
    if z >= 0:
        sig = 1.0 / (1.0 + math.exp(-z))
    else:
        ez = math.exp(z)
        sig = ez / (1.0 + ez)
    return qd + (qn - qd) * sig


@njit(cache=True, fastmath={"nsz", "arcp", "contract", "afn", "reassoc"})
def simulate_observe(rho0, alpha, eta, v_down, bidx, v, qn, qd, rmax, w, lengths, U, dt, m, tau, beta,
                     literal, check):
    """Returns ``(obs[N, 3K, T/m], fail[N, 2])``; ``fail[n] = (t, k)`` of the first bound violation or -1."""
    N = bidx.shape[0]
    K = lengths.shape[0]
    T = alpha.shape[2] - 1
    n_obs = T // m
    obs = np.zeros((N, 3 * K, n_obs))
    fail = np.full((N, 2), OK, dtype=np.int64)
    rho = np.empty(K)
    q = np.empty(K)
    r = np.empty(K)
    f = np.empty(K)
    out = np.empty(K)
    spd = np.empty(K)
    sup = np.empty(K)
    sr = np.empty(K)
    sf = np.empty(K)
    sfv = np.empty(K)
    sfree = np.empty(K)
    for n in range(N):
        b = bidx[n]
        for k in range(K):
            rho[k] = rho0[b, k]
            q[k] = 0.0
            sr[k] = 0.0
            sf[k] = 0.0
            sfv[k] = 0.0
            sfree[k] = 0.0
        for t in range(T + 1):
            vd = v_down[b, t]
            for k in range(K):
                sup[k] = w[n, k] * (rmax[n, k] - rho[k])
                r[k] = _min3(alpha[b, k, t] + q[k] / dt, U[k], sup[k], tau)
            for k in range(K - 1):
                send = v[n, k] * rho[k]
                cap = _capacity(rho[k], qn[n, k], qd[n, k], v[n, k], beta)
                rec = _positive(sup[k + 1] - r[k + 1], tau)
                tot = _min3(send, cap, rec, tau)
                f[k] = eta[b, k, t] * tot
                if literal:
                    out[k] = f[k] / (1.0 - eta[b, k, t])
                    carried = f[k]
                else:
                    out[k] = tot
                    carried = tot
                spd[k] = carried / rho[k] if rho[k] > 0.0 else v[n, k]
            f[K - 1] = vd * rho[K - 1]
            if literal:
                out[K - 1] = f[K - 1] / (1.0 - eta[b, K - 1, t])
            else:
                out[K - 1] = f[K - 1]
            spd[K - 1] = vd
            if t >= 1:
                for k in range(K):
                    sr[k] += r[k]
                    sf[k] += f[k]
                    sfv[k] += f[k] * spd[k]
                    sfree[k] += v[n, k] if k < K - 1 else vd
                if t % m == 0:
                    j = t // m - 1
                    for k in range(K):
                        obs[n, k, j] = sr[k] / m
                        obs[n, K + k, j] = sf[k] / m
                        if sf[k] > 1e-12:
                            obs[n, 2 * K + k, j] = sfv[k] / sf[k]
                        else:
                            obs[n, 2 * K + k, j] = sfree[k] / m
                        sr[k] = 0.0
                        sf[k] = 0.0
                        sfv[k] = 0.0
                        sfree[k] = 0.0
            if t == T:
                break
            bad = False
            for k in range(K):
                inflow = r[k]
                if k > 0:
                    inflow += f[k - 1]
                rho[k] = rho[k] + dt / lengths[k] * (inflow - out[k])
                q[k] = q[k] + dt * (alpha[b, k, t] - r[k])
                if check and not bad:
                    tol = 1e-9 * rmax[n, k]
                    if rho[k] < -tol or rho[k] > rmax[n, k] + tol or not math.isfinite(rho[k]):
                        fail[n, 0] = t
                        fail[n, 1] = k
                        bad = True
            if bad:
                break
    return obs, fail
