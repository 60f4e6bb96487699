"""MAML, first-order MAML, trajectory-regularized MAML and a finetuning baseline.

Two routes compute the second-order meta-gradient:

* ``backend="kernel"`` (default) back-propagates through the inner loop by
  hand: ``u <- (I - alpha * H(theta_t)) u`` for ``t = T-1 .. 0`` using exact
  Hessian-vector products from :mod:`metaland.kernels`.
* ``backend="graph"`` records the whole inner loop on an autodiff graph and
  differentiates through it.

Both are exact; they are checked against each other and against finite
differences in the test-suite.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .autodiff import Graph, Node, gradient
from .models import ModelSpec
from .tasks import ClassPool, Episode, supervised_batch

ALGORITHMS = ("maml", "fomaml", "maml_reg", "finetune")


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.05
    beta: float = 0.001
    T: int = 5
    n: int = 4
    gamma: float = 0.0
    order: str = "second"
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    leave_one_out: bool = False
    backend: str = "kernel"

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta > 0 and self.T >= 1 and self.n >= 1 and self.gamma >= 0):
            raise ValueError(f"invalid hyperparameters {self}")
        if self.order not in ("second", "first"):
            raise ValueError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.backend not in ("kernel", "graph"):
            raise ValueError(f"backend must be 'kernel' or 'graph', got {self.backend!r}")


@dataclass
class AdaptationTrace:
    """Iterates of one inner-loop run.

    ``support_losses[t]`` is the support loss at iterate ``t`` with
    ``t = 0`` the start point, so it has ``T + 1`` entries.
    """

    start: np.ndarray
    iterates: list
    support_losses: list
    nodes: list | None = field(default=None, repr=False)

    @property
    def solution(self) -> np.ndarray:
        return self.iterates[-1] if self.iterates else self.start

    @property
    def displacement(self) -> np.ndarray:
        return self.solution - self.start

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.displacement))

    @property
    def direction(self) -> np.ndarray | None:
        """Unit displacement, or None when the run did not move."""
        d = self.displacement
        nrm = np.linalg.norm(d)
        if nrm == 0.0:
            return None
        return d / nrm


def inner_adapt(spec: ModelSpec, theta, episode: Episode, alpha: float, T: int,
                differentiable: bool = False) -> AdaptationTrace:
    """``T`` full-batch gradient-descent steps on the support loss.

    ``theta`` may be a graph node; the iterates are then recorded as nodes
    (``trace.nodes``) and, with ``differentiable=True``, the inner gradients
    stay differentiable so a later gradient flows through the whole loop.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    sx, sy = episode.support
    if len(sy) == 0:
        raise ValueError("empty support set")
    if isinstance(theta, Node):
        g = theta.graph
        cur = theta
        nodes, losses = [], []
        for _ in range(T):
            loss = models.loss(spec, cur, sx, sy)
            losses.append(float(loss.value))
            (grad,) = gradient(g, loss, [cur], differentiable=differentiable).result
            cur = g.sub(cur, g.scale(grad, alpha))
            nodes.append(cur)
        losses.append(float(models.loss(spec, cur.value, sx, sy)))
        return AdaptationTrace(theta.value, [n.value for n in nodes], losses, nodes)

    theta = np.asarray(theta, dtype=np.float64)
    cur = theta
    iterates, losses = [], []
    for _ in range(T):
        value, grad = models.loss_grad(spec, cur, sx, sy)
        losses.append(value)
        cur = cur - alpha * grad
        iterates.append(cur)
    losses.append(models.loss(spec, cur, sx, sy))
    return AdaptationTrace(theta, iterates, losses)


# ---------------------------------------------------------------------------
# regularizer


def regularizer_corrections(traces, gamma: float, leave_one_out: bool = False):
    """Per-task offsets ``gamma * grad(Omega)`` and the number of skipped tasks.

    ``Omega_i = -dir_i . dir_mean`` differentiated w.r.t. the adapted solution
    with the start point and the batch-mean direction held fixed.  Tasks
    whose direction is undefined get ``None`` (no correction).
    """
    dirs = [t.direction for t in traces]
    defined = [d for d in dirs if d is not None]
    skipped = len(dirs) - len(defined)
    if gamma == 0.0 or not defined:
        return [None] * len(traces), skipped
    total = np.zeros_like(defined[0])
    for d in defined:
        total = total + d
    mean = total / len(defined)
    out = []
    for tr, d in zip(traces, dirs):
        if d is None:
            out.append(None)
            continue
        if leave_one_out:
            if len(defined) < 2:
                out.append(None)
                skipped += 1
                continue
            mu = (total - d) / (len(defined) - 1)
        else:
            mu = mean
        grad_omega = (-mu + float(d @ mu) * d) / tr.norm
        out.append(gamma * grad_omega)
    return out, skipped


def corrected_solution(trace: AdaptationTrace, offset) -> np.ndarray:
    return trace.solution if offset is None else trace.solution - offset


# ---------------------------------------------------------------------------
# meta-gradients


def _kernel_task_grad(spec, trace, episode, hp, offset):
    tx, ty = episode.target
    _, u = models.loss_grad(spec, corrected_solution(trace, offset), tx, ty)
    if hp.order == "second":
        sx, sy = episode.support
        points = [trace.start] + trace.iterates[:-1]
        for p in reversed(points):
            u = u - hp.alpha * models.kernels.hvp(p, spec.dims, sx, sy, u)
    return u


def _graph_meta(spec, theta, tasks, hp, gamma):
    g = Graph()
    th = g.input("theta", theta)
    traces = [inner_adapt(spec, th, ep, hp.alpha, hp.T, differentiable=hp.order == "second")
              for ep in tasks]
    offsets, skipped = regularizer_corrections(traces, gamma, hp.leave_one_out)
    grads = []
    for ep, tr, off in zip(tasks, traces, offsets):
        sol = tr.nodes[-1] if off is None else g.sub(tr.nodes[-1], g.constant(off))
        tx, ty = ep.target
        (grad,) = gradient(g, models.loss(spec, sol, tx, ty), [th]).result
        grads.append(grad.value)
    return grads, traces, offsets, skipped


def _meta(spec, theta, tasks, hp, gamma):
    if len(tasks) != hp.n:
        raise ValueError(f"expected a batch of {hp.n} tasks, got {len(tasks)}")
    if hp.backend == "graph":
        grads, traces, offsets, skipped = _graph_meta(spec, theta, tasks, hp, gamma)
    else:
        traces = [inner_adapt(spec, theta, ep, hp.alpha, hp.T) for ep in tasks]
        offsets, skipped = regularizer_corrections(traces, gamma, hp.leave_one_out)
        grads = [_kernel_task_grad(spec, tr, ep, hp, off) for tr, ep, off in zip(traces, tasks, offsets)]
    # fixed summation order (by task id) so a permuted batch gives the same bits
    order = sorted(range(len(tasks)), key=lambda i: _id_key(tasks[i].task_id))
    total = np.zeros_like(grads[0])
    for i in order:
        total = total + grads[i]
    return total / len(grads), traces, offsets, skipped


def _id_key(task_id):
    return tuple((0, v) if isinstance(v, (int, np.integer)) else (1, str(v)) for v in task_id)


def maml_meta_gradient(spec: ModelSpec, theta: np.ndarray, tasks: list, hp: HyperParams) -> np.ndarray:
    """Average target-loss gradient w.r.t. the shared start point.

    ``hp.order == "second"`` differentiates through the inner loop;
    ``"first"`` uses the target gradient at the adapted solution as is.
    """
    return _meta(spec, theta, tasks, hp, 0.0)[0]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> tuple[AdamState, np.ndarray]:
    if state.m.shape != params.shape or grad.shape != params.shape:
        raise ValueError("optimizer state, params and grad must share a shape")
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return AdamState(m, v, t), params - lr * m_hat / (np.sqrt(v_hat) + eps)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def maml_step(spec, theta, tasks, hp: HyperParams, state: AdamState):
    grad = maml_meta_gradient(spec, theta, tasks, hp)
    _check_finite(grad, "meta-gradient")
    return adam_step(state, theta, grad, hp.beta, hp.b1, hp.b2, hp.eps)


def regularized_meta_step(spec, theta, tasks, hp: HyperParams, state: AdamState):
    """One meta-iteration of trajectory-regularized MAML.

    Returns ``(new_theta, new_state, diagnostics)``.  With ``hp.gamma == 0``
    this is exactly ``maml_step``.
    """
    if hp.gamma > 0 and len(tasks) < 2:
        raise ValueError("the regularizer needs at least two tasks per batch")
    grad, traces, offsets, skipped = _meta(spec, theta, tasks, hp, hp.gamma)
    _check_finite(grad, "meta-gradient")
    state, new_theta = adam_step(state, theta, grad, hp.beta, hp.b1, hp.b2, hp.eps)
    diag = {
        "skipped_corrections": skipped,
        "correction_norm": float(np.mean([np.linalg.norm(o) for o in offsets if o is not None] or [0.0])),
    }
    return new_theta, state, diag


# ---------------------------------------------------------------------------
# finetuning baseline


def finetune_train_epoch(spec: ModelSpec, params: np.ndarray, pool: ClassPool, batch_size: int,
                         iters: int, seed_path: tuple, state: AdamState, lr: float,
                         b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """``iters`` Adam steps of supervised cross-entropy over all meta-train classes.

    Returns ``(params, state, mean_loss)``; mean_loss is NaN when ``iters == 0``.
    """
    if spec.n_way != pool.config.n_train_classes:
        raise ValueError(
            f"baseline head has {spec.n_way} outputs but there are {pool.config.n_train_classes} train classes"
        )
    losses = []
    for it in range(iters):
        x, y = supervised_batch(pool, batch_size, (*seed_path, it))
        value, grad = models.loss_grad(spec, params, x, y)
        _check_finite(grad, f"baseline gradient at iteration {it}")
        losses.append(value)
        state, params = adam_step(state, params, grad, lr, b1, b2, eps)
    return params, state, (float(np.mean(losses)) if losses else float("nan"))


# ---------------------------------------------------------------------------
# meta-test evaluation


def head_seed(base: int, episode: Episode) -> list[int]:
    return [int(base)] + [int(v) for v in episode.task_id[1:]]


def eval_start(spec: ModelSpec, theta: np.ndarray, episode: Episode, head_replace: int | None):
    """Start point for one meta-test task: ``theta`` itself, or with a fresh head."""
    if head_replace is None:
        return spec, theta
    return models.replace_head(spec, theta, episode.n_way, head_seed(head_replace, episode))


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def meta_test_evaluate(spec: ModelSpec, theta: np.ndarray, episodes: list, alpha: float, T: int,
                       head_replace: int | None = None, jobs: int = 1):
    """Adapt to every episode and score the target set.

    Returns ``(mean_target_accuracy, traces, per_task_accuracy)``.  For the
    finetuning baseline pass ``head_replace`` (a seed); each episode then
    starts from ``theta`` with a freshly initialised ``n_way`` head.
    """
    if not episodes:
        raise ValueError("no episodes to evaluate")

    def one(ep):
        s, start = eval_start(spec, theta, ep, head_replace)
        tr = inner_adapt(s, start, ep, alpha, T)
        tx, ty = ep.target
        return tr, models.accuracy(s, tr.solution, tx, ty)

    results = _map(one, episodes, jobs)
    traces = [r[0] for r in results]
    accs = np.array([r[1] for r in results])
    return float(np.mean(accs)), traces, accs


def eval_spec(spec: ModelSpec, n_way: int, head_replace: int | None) -> ModelSpec:
    return spec if head_replace is None else replace(spec, n_way=n_way)
