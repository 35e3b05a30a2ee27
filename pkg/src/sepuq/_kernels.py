"""Compiled inner loop of the Metropolis-within-Gibbs sampler.

The kernel is written once as plain Python over numpy arrays.  When numba
is importable and ``SEPUQ_DISABLE_NUMBA`` is unset (or "0"), it is compiled
with ``@njit``; otherwise the same function runs interpreted.  Random numbers
are drawn by the caller, so both paths produce identical chains.  The flag
is read at import time.
"""

from __future__ import annotations

import math
import os

import numpy as np

_DISABLED = os.environ.get("SEPUQ_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def gp_column(theta, j, inputs, weights, lower, sa2, s12, length, mu_out, work):
    """GP predictive means of a_{., j} at ``theta`` into ``mu_out``; returns the variance."""
    g = inputs.shape[0]
    for q in range(g):
        d = (theta - inputs[q]) / length
        work[q] = sa2 * math.exp(-0.5 * d * d)
    for i in range(weights.shape[0]):
        acc = 0.0
        for q in range(g):
            acc += weights[i, j, q] * work[q]
        mu_out[i] = acc
    # forward substitution L v = k, in place
    quad = 0.0
    for q in range(g):
        acc = work[q]
        for r in range(q):
            acc -= lower[q, r] * work[r]
        work[q] = acc / lower[q, q]
        quad += work[q] * work[q]
    return sa2 - quad + s12


@njit(cache=True)
def column_log_prior(a, j, mu, var):
    """sum_i log N(a_ij; mu_i, var) without the 2 pi constant."""
    acc = 0.0
    for i in range(a.shape[0]):
        d = a[i, j] - mu[i]
        acc -= 0.5 * d * d / var
    return acc - 0.5 * a.shape[0] * math.log(var)


@njit(cache=True)
def _prod_others(a, i, j):
    p = 1.0
    for r in range(a.shape[1]):
        if r != j:
            p *= a[i, r]
    return p


@njit(cache=True)
def sweep_chunk(theta, a, prod, pred, col_mu, col_var, col_lp, loglik,
                y, V, sigma_y, theta0, sigma0,
                inputs, weights, lower, sa2, s12, length,
                step_theta, step_a, z_theta, u_theta, z_a, u_a,
                acc_theta, acc_a, trace):
    """Run ``z_theta.shape[0]`` sweeps, updating the chain state in place.

    State: ``theta`` (N2,), ``a`` (N1, N2), ``prod[i] = prod_j a_ij``,
    ``pred = sum_i prod[i] V[i]``, ``col_mu``/``col_var`` the GP predictive
    moments of each column at its theta, ``col_lp[j]`` its log prior and
    ``loglik[0]`` the Gaussian log likelihood.  ``trace`` receives theta
    after every sweep.
    """
    n1, n2 = a.shape
    m = y.shape[0]
    inv2s2 = 0.5 / (sigma_y * sigma_y)
    mu_new = np.empty(n1)
    a_col = np.empty(n1)
    prod_new = np.empty(n1)
    pred_new = np.empty(m)
    work = np.empty(inputs.shape[0])
    a_tmp = np.empty((n1, n2))
    for s in range(z_theta.shape[0]):
        for j in range(n2):
            # theta_j move; a_{., j} is carried along by the shift of the GP mean
            th_new = theta[j] + step_theta[j] * z_theta[s, j]
            var_new = gp_column(th_new, j, inputs, weights, lower, sa2, s12, length,
                                mu_new, work)
            for i in range(n1):
                a_col[i] = a[i, j] + mu_new[i] - col_mu[i, j]
            for i in range(n1):
                prod_new[i] = a_col[i] * _prod_others(a, i, j)
            ll_new = 0.0
            for k in range(m):
                acc = 0.0
                for i in range(n1):
                    acc += prod_new[i] * V[i, k]
                pred_new[k] = acc
                d = y[k] - acc
                ll_new -= inv2s2 * d * d
            for i in range(n1):
                a_tmp[i, j] = a_col[i]
            lp_new = column_log_prior(a_tmp, j, mu_new, var_new)
            dz_new = (th_new - theta0) / sigma0
            dz_old = (theta[j] - theta0) / sigma0
            delta = ll_new - loglik[0] + lp_new - col_lp[j] - 0.5 * (dz_new * dz_new - dz_old * dz_old)
            if math.log(u_theta[s, j]) < delta:
                theta[j] = th_new
                for i in range(n1):
                    a[i, j] = a_col[i]
                    prod[i] = prod_new[i]
                    col_mu[i, j] = mu_new[i]
                for k in range(m):
                    pred[k] = pred_new[k]
                col_var[j] = var_new
                col_lp[j] = lp_new
                loglik[0] = ll_new
                acc_theta[j] += 1
        for j in range(n2):
            for i in range(n1):
                old = a[i, j]
                new = old + step_a[i, j] * z_a[s, i, j]
                p_new = new * _prod_others(a, i, j)
                dp = p_new - prod[i]
                ll_new = 0.0
                for k in range(m):
                    d = y[k] - (pred[k] + dp * V[i, k])
                    ll_new -= inv2s2 * d * d
                d_old = old - col_mu[i, j]
                d_new = new - col_mu[i, j]
                dlp = -0.5 * (d_new * d_new - d_old * d_old) / col_var[j]
                if math.log(u_a[s, i, j]) < ll_new - loglik[0] + dlp:
                    a[i, j] = new
                    prod[i] = p_new
                    for k in range(m):
                        pred[k] += dp * V[i, k]
                    col_lp[j] += dlp
                    loglik[0] = ll_new
                    acc_a[i, j] += 1
        for j in range(n2):
            trace[s, j] = theta[j]


BACKEND = "numba" if HAVE_NUMBA else "python"
