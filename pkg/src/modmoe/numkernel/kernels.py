"""Row-wise numeric kernels with two interchangeable backends.

The autodiff ops call ``kernels.<name>`` through the module so the backend
can be switched at runtime. ``MODMOE_KERNELS=numpy`` forces the pure numpy
path; the default is numba when it imports, numpy otherwise.

All kernels take 2-D C-contiguous float64 arrays and work along the last
axis. The two backends agree to ~1e-15 but are not bitwise identical.
"""

from __future__ import annotations

import math
import os
import sys

import numpy as np
from scipy.special import erf

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------

def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _np_gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def _np_layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_bwd(gy, xhat, rstd, gamma):
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    dxhat = gy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _np_xent_fwd(logits, targets, weights):
    """Weighted mean of -log softmax(logits)[target]; returns (loss, probs)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    probs = e / s[:, None]
    nll = np.log(s) - z[np.arange(z.shape[0]), targets]
    return float((weights * nll).sum() / weights.sum()), probs


def _np_xent_bwd(probs, targets, weights, g):
    grad = probs.copy()
    grad[np.arange(grad.shape[0]), targets] -= 1.0
    grad *= (g * weights / weights.sum())[:, None]
    return grad


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_gelu_fwd(x):
        out = np.empty_like(x)
        n, m = x.shape
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def _nb_gelu_bwd(x, gy):
        out = np.empty_like(x)
        n, m = x.shape
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
                pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
                out[i, j] = gy[i, j] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def _nb_softmax_fwd(x):
        out = np.empty_like(x)
        n, m = x.shape
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(y, gy):
        out = np.empty_like(y)
        n, m = y.shape
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gy[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gamma, beta):
        n, m = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / math.sqrt(var + LN_EPS)
            rstd[i] = r
            for j in range(m):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(gy, xhat, rstd, gamma):
        n, m = gy.shape
        dx = np.empty_like(gy)
        dgamma = np.zeros(m)
        dbeta = np.zeros(m)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(m):
                d = gy[i, j] * gamma[j]
                m1 += d
                m2 += d * xhat[i, j]
                dgamma[j] += gy[i, j] * xhat[i, j]
                dbeta[j] += gy[i, j]
            m1 /= m
            m2 /= m
            for j in range(m):
                dx[i, j] = rstd[i] * (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _nb_xent_core(logits, targets, weights):
        n, m = logits.shape
        probs = np.empty_like(logits)
        total = 0.0
        wsum = 0.0
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, m):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(m):
                e = math.exp(logits[i, j] - mx)
                probs[i, j] = e
                s += e
            for j in range(m):
                probs[i, j] /= s
            total += weights[i] * (math.log(s) - (logits[i, targets[i]] - mx))
            wsum += weights[i]
        return total / wsum, probs

    def _nb_xent_fwd(logits, targets, weights):
        loss, probs = _nb_xent_core(logits, targets, weights)
        return float(loss), probs

    @njit(cache=True)
    def _nb_xent_bwd(probs, targets, weights, g):
        n, m = probs.shape
        out = np.empty_like(probs)
        wsum = 0.0
        for i in range(n):
            wsum += weights[i]
        for i in range(n):
            c = g * weights[i] / wsum
            for j in range(m):
                out[i, j] = probs[i, j] * c
            out[i, targets[i]] -= c
        return out


_NAMES = (
    "gelu_fwd", "gelu_bwd", "softmax_fwd", "softmax_bwd",
    "layernorm_fwd", "layernorm_bwd", "xent_fwd", "xent_bwd",
)

BACKEND = ""


def use_backend(name: str) -> None:
    """Rebind the public kernel names to ``numba`` or ``numpy``."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prefix = "_nb_" if name == "numba" else "_np_"
    module = sys.modules[__name__]
    for n in _NAMES:
        setattr(module, n, getattr(module, prefix + n))
    BACKEND = name


use_backend(os.environ.get("MODMOE_KERNELS", "numba" if HAVE_NUMBA else "numpy"))
