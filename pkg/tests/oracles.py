"""Independent reference computations used only by the tests."""
import mpmath
import numpy as np


def unflatten(dims, params):
    layers, off = [], 0
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = params[off:off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = params[off:off + fo]
        off += fo
        layers.append((w, b))
    assert off == params.size
    return layers


def mlp_logits(dims, params, x):
    """Straight-line forward pass, written without the package's helpers."""
    h = np.asarray(x, dtype=np.float64)
    layers = unflatten(list(dims), np.asarray(params))
    for i, (w, b) in enumerate(layers):
        h = h.dot(w) + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def mlp_loss(dims, params, x, y):
    return xent(mlp_logits(dims, params, x), np.asarray(y))


def xent_mp(logits, labels, dps=50):
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, lab in zip(np.asarray(logits), labels):
            vals = [mpmath.mpf(float(v)) for v in row]
            total += mpmath.log(mpmath.fsum(mpmath.exp(v) for v in vals)) - vals[int(lab)]
        return total / len(labels)


def central_diff(f, x, coords, eps=1e-5):
    out = []
    for c in coords:
        xp = x.copy()
        xm = x.copy()
        xp[c] += eps
        xm[c] -= eps
        out.append((f(xp) - f(xm)) / (2 * eps))
    return np.array(out)


def fd_hessian(grad_fn, x, eps=1e-5):
    """Dense Hessian, one column per central difference of gradients."""
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * eps)
    return 0.5 * (H + H.T)


def rel_err(a, b, floor=0.0):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, np.abs(a - b) / np.where(denom > 0, denom, 1.0), 0.0)
    return r


def adam_reference(params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written as a plain loop over steps."""
    p = np.array(params, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    path = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        path.append(p.copy())
    return path


def pairwise_loop(vectors, include_self=False):
    n = len(vectors)
    vals = [float(np.dot(vectors[i], vectors[j]))
            for i in range(n) for j in range(n) if i < j or (include_self and i >= j)]
    return float(np.mean(vals))
