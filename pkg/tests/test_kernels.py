import os
import subprocess
import sys

import numpy as np
import pytest

from modmoe.numkernel import kernels

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def _inputs(rng):
    x = rng.standard_normal((13, 7))
    g = rng.standard_normal((13, 7))
    gamma = rng.standard_normal(7)
    beta = rng.standard_normal(7)
    logits = rng.standard_normal((13, 5))
    targets = rng.integers(0, 5, 13)
    w = rng.random(13)
    return x, g, gamma, beta, logits, targets, w


def _run_all(rng):
    x, g, gamma, beta, logits, targets, w = _inputs(rng)
    y, xhat, rstd = kernels.layernorm_fwd(x, gamma, beta)
    sm = kernels.softmax_fwd(x)
    loss, probs = kernels.xent_fwd(logits, targets, w)
    return [
        kernels.gelu_fwd(x), kernels.gelu_bwd(x, g), sm, kernels.softmax_bwd(sm, g),
        y, xhat, rstd, *kernels.layernorm_bwd(g, xhat, rstd, gamma),
        np.array(loss), probs, kernels.xent_bwd(probs, targets, w, 0.7),
    ]


def test_backends_agree(rng):
    try:
        kernels.use_backend("numpy")
        a = _run_all(np.random.default_rng(0))
        kernels.use_backend("numba")
        b = _run_all(np.random.default_rng(0))
    finally:
        kernels.use_backend("numba")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")


def test_env_flag_selects_numpy():
    code = "from modmoe.numkernel import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, MODMOE_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"


def test_gelu_matches_erf_definition():
    from scipy.special import erf

    x = np.linspace(-5, 5, 101)[None, :]
    np.testing.assert_allclose(kernels.gelu_fwd(x), 0.5 * x * (1 + erf(x / np.sqrt(2))), rtol=1e-14)
