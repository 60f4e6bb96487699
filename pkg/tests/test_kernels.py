import json
import os
import subprocess
import sys

import numpy as np
import pytest

from metaland import kernels, models

from conftest import DESK, TINY, perturbed_params
from oracles import fd_hessian, mlp_logits

requires_numba = pytest.mark.skipif(not kernels.USE_NUMBA, reason="numba disabled")


@requires_numba
def test_row_dot_paths_agree(rng):
    a = rng.standard_normal((9, 20))
    a[a < 0] = 0.0
    w = rng.standard_normal((20, 7))
    np.testing.assert_allclose(kernels._row_dot(a, w), kernels._row_dot_numpy(a, w), rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(kernels._row_dot(a, w), a @ w, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("fn", [kernels._row_dot, kernels._row_dot_numpy])
def test_row_dot_batch_independent(fn, rng):
    a = rng.standard_normal((11, 64))
    w = rng.standard_normal((64, 64))
    full = fn(a, w)
    for i in (0, 5, 10):
        assert fn(a[i:i + 1], w)[0].tobytes() == full[i].tobytes()


def test_hvp_matches_dense_fd_hessian(rng):
    x = rng.standard_normal((12, 8))
    y = rng.integers(0, 5, 12)
    p = perturbed_params(TINY, 0)
    H = fd_hessian(lambda q: kernels.loss_grad(q, TINY.dims, x, y)[1], p)
    v = rng.standard_normal(TINY.n_params)
    hv = kernels.hvp(p, TINY.dims, x, y, v)
    assert np.linalg.norm(hv - H @ v) / np.linalg.norm(H @ v) < 1e-4


_SCRIPT = """
import json, sys
import numpy as np
from metaland import kernels, models
spec = models.PROFILES["desk"]
r = np.random.default_rng(0)
p = models.init_params(spec, 0) + 0.3 * r.standard_normal(spec.n_params)
x = r.standard_normal((10, 20)); y = r.integers(0, 5, 10); v = r.standard_normal(spec.n_params)
l, g = kernels.loss_grad(p, spec.dims, x, y)
print(json.dumps({"numba": kernels.USE_NUMBA, "loss": l, "grad": g.tolist(),
                  "hvp": kernels.hvp(p, spec.dims, x, y, v).tolist(),
                  "logits": kernels.logits(p, spec.dims, x).tolist()}))
"""


def test_env_flag_selects_numpy_path():
    env = dict(os.environ, METALAND_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True, check=True)
    res = json.loads(out.stdout)
    assert res["numba"] is False
    r = np.random.default_rng(0)
    p = models.init_params(DESK, 0) + 0.3 * r.standard_normal(DESK.n_params)
    x = r.standard_normal((10, 20))
    y = r.integers(0, 5, 10)
    v = r.standard_normal(DESK.n_params)
    loss, grad = kernels.loss_grad(p, DESK.dims, x, y)
    assert abs(res["loss"] - loss) <= 1e-13 * abs(loss)
    np.testing.assert_allclose(res["grad"], grad, rtol=1e-11, atol=1e-15)
    np.testing.assert_allclose(res["hvp"], kernels.hvp(p, DESK.dims, x, y, v), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(res["logits"], mlp_logits(DESK.dims, p, x), rtol=1e-12, atol=1e-13)
