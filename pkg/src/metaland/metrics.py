"""Objective-landscape diagnostics for adapted meta-test solutions."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import kernels, models
from .algorithms import AdaptationTrace, _map, eval_start
from .models import ModelSpec


@dataclass
class MetricRecord:
    epoch: int
    avg_target_accuracy: float
    avg_support_loss: float
    avg_spectral_norm: float
    trajectory_coherence: float
    gradient_coherence: float
    avg_trajectory_norm: float
    n_tasks_per_metric: dict = field(default_factory=dict)
    undefined_direction_count: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def write_csv(records, path_or_buffer) -> None:
    names = MetricRecord.field_names()
    own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
    fh = open(path_or_buffer, "w", newline="", encoding="utf-8") if own else path_or_buffer
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in records:
            row = asdict(r)
            row["n_tasks_per_metric"] = json.dumps(row["n_tasks_per_metric"], sort_keys=True)
            w.writerow([repr(row[n]) if isinstance(row[n], float) else row[n] for n in names])
    finally:
        if own:
            fh.close()


def read_jsonl(path) -> list[MetricRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MetricRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# curvature


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    eigenvalue: float
    iterations: int
    converged: bool

    def __float__(self) -> float:
        return self.value


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], dim: int, tol: float = 1e-6,
                    max_iters: int = 500, seed: int = 0) -> PowerIterationResult:
    """Largest-magnitude eigenvalue of a symmetric operator given as ``matvec``.

    Stops when successive Rayleigh quotients agree to ``tol`` relatively.
    A zero product on the first iterate yields 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = None
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return PowerIterationResult(0.0, 0.0, it, True)
        lam = float(v @ w)
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return PowerIterationResult(abs(lam), lam, it, True)
        prev = lam
        v = w / nw
    return PowerIterationResult(abs(lam), lam, max_iters, False)


def spectral_norm(spec: ModelSpec, theta: np.ndarray, support, tol: float = 1e-6,
                  max_iters: int = 500, seed: int = 0) -> PowerIterationResult:
    """Spectral norm of the support-loss Hessian at ``theta`` via exact HVPs."""
    x, y = support
    if len(y) == 0:
        raise ValueError("empty support set")
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    dims = spec.dims
    return power_iteration(lambda v: kernels.hvp(theta, dims, x, y, v), spec.n_params, tol, max_iters, seed)


def spectral_norms(spec: ModelSpec, traces, episodes, tol: float = 1e-6, max_iters: int = 500,
                   seed: int = 0, jobs: int = 1) -> list[PowerIterationResult]:
    if len(traces) != len(episodes):
        raise ValueError("one trace per episode required")
    items = list(zip(traces, episodes))
    return _map(lambda te: spectral_norm(spec, te[0].solution, te[1].support, tol, max_iters, seed), items, jobs)


def avg_spectral_norm(spec: ModelSpec, traces, episodes, tol: float = 1e-6, max_iters: int = 500,
                      seed: int = 0, jobs: int = 1) -> float:
    if not traces:
        raise ValueError("no traces")
    res = spectral_norms(spec, traces, episodes, tol, max_iters, seed, jobs)
    return float(np.mean([r.value for r in res]))


# ---------------------------------------------------------------------------
# coherence


def pairwise_mean(vectors, include_self: bool = False) -> float:
    """Mean inner product over unordered pairs ``i < j`` (or all ``i, j``).

    Uses ``(|sum v|^2 - sum |v|^2) / (n (n - 1))``, which is O(n d).
    """
    vs = np.asarray(vectors, dtype=np.float64)
    n = vs.shape[0]
    total = vs.sum(axis=0)
    sq_total = float(total @ total)
    if include_self:
        if n < 1:
            raise ValueError("need at least one vector")
        return sq_total / (n * n)
    if n < 2:
        raise ValueError("need at least two vectors for a pairwise mean")
    sq_each = float(np.einsum("ij,ij->", vs, vs))
    return (sq_total - sq_each) / (n * (n - 1))


def defined_directions(traces) -> tuple[list[np.ndarray], int]:
    dirs = [t.direction for t in traces]
    ok = [d for d in dirs if d is not None]
    return ok, len(dirs) - len(ok)


def trajectory_coherence(traces: list[AdaptationTrace], include_self: bool = False) -> float:
    """Average cosine between adaptation directions of different tasks."""
    dirs, _ = defined_directions(traces)
    if len(dirs) < 2:
        raise ValueError(f"need >= 2 defined trajectory directions, have {len(dirs)}")
    return pairwise_mean(dirs, include_self)


def meta_test_gradients(spec: ModelSpec, theta: np.ndarray, episodes, head_replace=None,
                        jobs: int = 1) -> list[np.ndarray]:
    """``g_i = -grad L(support_i; theta)`` per episode."""

    def one(ep):
        s, start = eval_start(spec, theta, ep, head_replace)
        return -models.loss_grad(s, start, *ep.support)[1]

    return _map(one, list(episodes), jobs)


def gradient_coherence(spec: ModelSpec, theta: np.ndarray, episodes, head_replace=None,
                       include_self: bool = False, jobs: int = 1) -> float:
    """Average inner product of meta-test gradients at ``theta`` (not normalised)."""
    if len(episodes) < 2 and not include_self:
        raise ValueError("need at least two episodes")
    return pairwise_mean(meta_test_gradients(spec, theta, episodes, head_replace, jobs), include_self)


# ---------------------------------------------------------------------------
# trajectory summaries


def trajectory_norm_stats(traces) -> tuple[float, float]:
    if not traces:
        raise ValueError("no traces")
    norms = np.array([t.norm for t in traces])
    return float(norms.mean()), float(norms.std())


def support_loss_stats(traces) -> float:
    """Mean support loss at the adapted solutions."""
    if not traces:
        raise ValueError("no traces")
    return float(np.mean([t.support_losses[-1] for t in traces]))


def records_to_jsonl(records) -> str:
    buf = io.StringIO()
    for r in records:
        buf.write(r.to_json() + "\n")
    return buf.getvalue()
