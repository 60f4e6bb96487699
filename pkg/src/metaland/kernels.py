"""Hot MLP kernels on flat parameter vectors.

Loss, gradient and exact Hessian-vector product (Pearlmutter R-operator) of
the mean softmax cross-entropy of a ReLU multilayer perceptron.  These carry
the inner loops (meta-test adaptation, power iteration, second-order
meta-gradients) and are compiled with numba when available.

Set ``METALAND_NUMBA=0`` before import to force the pure-numpy path.

Parameter layout, layers in forward order: ``W`` of shape (fan_in, fan_out)
row-major, then the bias of length fan_out.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

USE_NUMBA = njit is not None and os.environ.get("METALAND_NUMBA", "1").lower() not in ("0", "false", "no")


def optional_njit(func):
    if USE_NUMBA:
        return njit(cache=True, nogil=True)(func)
    return func


def _row_dot_loops(a, w):
    out = np.zeros((a.shape[0], w.shape[1]))
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            aik = a[i, k]
            if aik != 0.0:
                for j in range(w.shape[1]):
                    out[i, j] += aik * w[k, j]
    return out


def _row_dot_numpy(a, w):
    # reduction over axis 1 adds the k-slices in order for every row
    return (a[:, :, None] * w[None, :, :]).sum(axis=1)


# ``a @ w`` with a per-row summation order that does not depend on the batch,
# so logits do not change with batch composition (BLAS blocking would make
# them differ in the last bits).  Used for logits only; the training kernels
# keep BLAS.
_row_dot = njit(cache=True, nogil=True)(_row_dot_loops) if USE_NUMBA else _row_dot_numpy


@optional_njit
def _logits(params, dims, x):
    a = x
    off = 0
    n_layers = dims.shape[0] - 1
    for l in range(n_layers):
        fi = dims[l]
        fo = dims[l + 1]
        w = params[off:off + fi * fo].reshape((fi, fo))
        off += fi * fo
        b = params[off:off + fo]
        off += fo
        z = _row_dot(a, w) + b
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
        else:
            a = z
    return a


@optional_njit
def _softmax_rows(z):
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        m = z[i, 0]
        for j in range(1, z.shape[1]):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(z.shape[1]):
            out[i, j] = np.exp(z[i, j] - m)
            s += out[i, j]
        for j in range(z.shape[1]):
            out[i, j] /= s
    return out


@optional_njit
def _xent_from_logits(z, y):
    total = 0.0
    for i in range(z.shape[0]):
        m = z[i, 0]
        for j in range(1, z.shape[1]):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(z.shape[1]):
            s += np.exp(z[i, j] - m)
        total += np.log(s) - (z[i, y[i]] - m)
    return total / z.shape[0]


@optional_njit
def _forward_cache(params, dims, x):
    """Pre-activations and activations per layer (activations[0] is x)."""
    n_layers = dims.shape[0] - 1
    acts = [x]
    pres = []
    off = 0
    a = x
    for l in range(n_layers):
        fi = dims[l]
        fo = dims[l + 1]
        w = params[off:off + fi * fo].reshape((fi, fo))
        off += fi * fo
        b = params[off:off + fo]
        off += fo
        z = np.dot(a, w) + b
        pres.append(z)
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return pres, acts


@optional_njit
def _loss_grad(params, dims, x, y):
    n_layers = dims.shape[0] - 1
    pres, acts = _forward_cache(params, dims, x)
    z = pres[n_layers - 1]
    loss = _xent_from_logits(z, y)
    delta = _softmax_rows(z)
    batch = x.shape[0]
    for i in range(batch):
        delta[i, y[i]] -= 1.0
    delta /= batch
    grad = np.empty_like(params)
    off = params.shape[0]
    for l in range(n_layers - 1, -1, -1):
        fi = dims[l]
        fo = dims[l + 1]
        off -= fo
        grad[off:off + fo] = delta.sum(axis=0)
        off -= fi * fo
        a = acts[l]
        grad[off:off + fi * fo] = np.dot(a.T, delta).reshape(fi * fo)
        if l > 0:
            w = params[off:off + fi * fo].reshape((fi, fo))
            delta = np.dot(delta, w.T) * (pres[l - 1] > 0.0)
    return loss, grad


@optional_njit
def _hvp(params, dims, x, y, v):
    n_layers = dims.shape[0] - 1
    batch = x.shape[0]
    # forward + R-forward
    acts = [x]
    racts = [np.zeros_like(x)]
    masks = []
    off = 0
    a = x
    ra = racts[0]
    z = x
    rz = x
    for l in range(n_layers):
        fi = dims[l]
        fo = dims[l + 1]
        w = params[off:off + fi * fo].reshape((fi, fo))
        vw = v[off:off + fi * fo].reshape((fi, fo))
        off += fi * fo
        b = params[off:off + fo]
        vb = v[off:off + fo]
        off += fo
        z = np.dot(a, w) + b
        rz = np.dot(ra, w) + np.dot(a, vw) + vb
        if l < n_layers - 1:
            mask = (z > 0.0) * 1.0
            masks.append(mask)
            a = z * mask
            ra = rz * mask
            acts.append(a)
            racts.append(ra)
    s = _softmax_rows(z)
    delta = s.copy()
    for i in range(batch):
        delta[i, y[i]] -= 1.0
    delta /= batch
    srz = (s * rz).sum(axis=1)
    rdelta = s * (rz - srz.reshape((batch, 1))) / batch
    out = np.empty_like(params)
    off = params.shape[0]
    for l in range(n_layers - 1, -1, -1):
        fi = dims[l]
        fo = dims[l + 1]
        off -= fo
        out[off:off + fo] = rdelta.sum(axis=0)
        off -= fi * fo
        out[off:off + fi * fo] = (np.dot(racts[l].T, delta) + np.dot(acts[l].T, rdelta)).reshape(fi * fo)
        if l > 0:
            w = params[off:off + fi * fo].reshape((fi, fo))
            vw = v[off:off + fi * fo].reshape((fi, fo))
            m = masks[l - 1]
            new_delta = np.dot(delta, w.T) * m
            rdelta = (np.dot(rdelta, w.T) + np.dot(delta, vw.T)) * m
            delta = new_delta
    return out


def _prep(params, dims, x, y=None):
    params = np.ascontiguousarray(params, dtype=np.float64)
    dims = np.ascontiguousarray(dims, dtype=np.int64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if y is not None:
        y = np.ascontiguousarray(y, dtype=np.int64)
    return params, dims, x, y


def logits(params, dims, x) -> np.ndarray:
    params, dims, x, _ = _prep(params, dims, x)
    return _logits(params, dims, x)


def loss(params, dims, x, y) -> float:
    params, dims, x, y = _prep(params, dims, x, y)
    return float(_xent_from_logits(_logits(params, dims, x), y))


def loss_grad(params, dims, x, y) -> tuple[float, np.ndarray]:
    params, dims, x, y = _prep(params, dims, x, y)
    value, grad = _loss_grad(params, dims, x, y)
    return float(value), grad


def hvp(params, dims, x, y, v) -> np.ndarray:
    params, dims, x, y = _prep(params, dims, x, y)
    return _hvp(params, dims, x, y, np.ascontiguousarray(v, dtype=np.float64))
