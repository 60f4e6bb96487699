"""Reverse-mode automatic differentiation over an explicit computation graph.

Nodes are recorded eagerly (define-by-run) and never mutated afterwards.
Backward rules are themselves written in terms of graph operations, so a
gradient computed with ``differentiable=True`` is an ordinary set of nodes
that can be differentiated again.  This is what second-order MAML and exact
Hessian-vector products are built on.

Example::

    g = Graph()
    x = g.input("x", 3.0)
    loss = x * x
    (dx,) = gradient(g, loss, [x]).result
    dx.value  # 6.0
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Graph",
    "Node",
    "GradHandle",
    "gradient",
    "hvp",
]


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    pass


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Node:
    """A single recorded operation.  Operators build new nodes in the same graph."""

    __slots__ = ("graph", "id", "op", "parents", "attrs", "value", "name")

    def __init__(self, graph, id_, op, parents, attrs, value, name=None):
        self.graph = graph
        self.id = id_
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.id}<{self.op}{label} shape={self.shape}>"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise GraphError("nodes belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    @property
    def T(self):
        return self.graph.transpose(self)


# ---------------------------------------------------------------------------
# forward kernels, keyed by op name: f(parent_values, attrs) -> value


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _xent(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = shifted[np.arange(z.shape[0]), labels]
    return np.array(np.mean(logsumexp - picked))


def _embed(x: list, a: dict) -> np.ndarray:
    out = np.zeros(a["size"])
    out[a["start"]:a["stop"]] = x[0].reshape(-1)
    return out


_FORWARD: dict[str, Callable] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "scale": lambda v, a: v[0] * a["c"],
    "matmul": lambda v, a: v[0] @ v[1],
    "transpose": lambda v, a: np.ascontiguousarray(v[0].T),
    "relu": lambda v, a: np.where(v[0] > 0.0, v[0], 0.0),
    "step": lambda v, a: (v[0] > 0.0).astype(np.float64),
    "sum": lambda v, a: np.array(np.sum(v[0])),
    "sum_to": lambda v, a: _sum_to(v[0], a["shape"]),
    "broadcast": lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "slice": lambda v, a: v[0][a["start"]:a["stop"]].reshape(a["shape"]),
    "embed": _embed,
    "softmax": lambda v, a: _softmax(v[0]),
    "softmax_xent": lambda v, a: _xent(v[0], a["labels"]),
}


def _check_binary(op: str, x: np.ndarray, y: np.ndarray) -> None:
    if op == "matmul":
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")
    elif op in ("add", "sub", "mul"):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(f"{op}: cannot broadcast {x.shape} with {y.shape}") from None


class Graph:
    """Append-only list of nodes; parents always precede their children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._inputs: dict[str, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, parents: tuple, attrs: dict, value: np.ndarray, name=None) -> Node:
        node = Node(self, len(self.nodes), op, parents, attrs, value, name)
        self.nodes.append(node)
        return node

    def _apply(self, op: str, parents: tuple, **attrs) -> Node:
        vals = [p.value for p in parents]
        if len(vals) == 2:
            _check_binary(op, vals[0], vals[1])
        return self._record(op, tuple(p.id for p in parents), attrs, _FORWARD[op](vals, attrs))

    # leaves -----------------------------------------------------------------
    def input(self, name: str, value) -> Node:
        if name in self._inputs:
            raise GraphError(f"duplicate input name {name!r}")
        node = self._record("input", (), {}, _as_array(value), name)
        self._inputs[name] = node
        return node

    def constant(self, value) -> Node:
        return self._record("const", (), {}, _as_array(value))

    # operations -------------------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        return self._apply("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._apply("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._apply("mul", (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._apply("scale", (a,), c=float(c))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._apply("matmul", (a, b))

    def transpose(self, a: Node) -> Node:
        return self._apply("transpose", (a,))

    def relu(self, a: Node) -> Node:
        return self._apply("relu", (a,))

    def step(self, a: Node) -> Node:
        """Indicator ``a > 0``; treated as locally constant by differentiation."""
        return self._apply("step", (a,))

    def sum(self, a: Node) -> Node:
        return self._apply("sum", (a,))

    def sum_to(self, a: Node, shape: tuple) -> Node:
        shape = tuple(shape)
        if a.shape == shape:
            return a
        return self._apply("sum_to", (a,), shape=shape)

    def broadcast(self, a: Node, shape: tuple) -> Node:
        shape = tuple(shape)
        if a.shape == shape:
            return a
        return self._apply("broadcast", (a,), shape=shape)

    def reshape(self, a: Node, shape: tuple) -> Node:
        shape = tuple(shape)
        if int(np.prod(shape)) != a.value.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape} at {a!r}")
        return self._apply("reshape", (a,), shape=shape)

    def slice(self, a: Node, start: int, stop: int, shape: tuple | None = None) -> Node:
        """``a[start:stop]`` of a flat vector, optionally viewed with ``shape``."""
        if a.value.ndim != 1 or not 0 <= start <= stop <= a.value.size:
            raise ShapeError(f"slice [{start}:{stop}] invalid for {a!r}")
        shape = (stop - start,) if shape is None else tuple(shape)
        return self._apply("slice", (a,), start=start, stop=stop, shape=shape)

    def embed(self, a: Node, start: int, stop: int, size: int) -> Node:
        return self._apply("embed", (a,), start=start, stop=stop, size=size)

    def softmax(self, z: Node) -> Node:
        return self._apply("softmax", (z,))

    def softmax_xent(self, logits: Node, labels) -> Node:
        """Mean cross-entropy of row-wise softmax(logits) against integer labels."""
        labels = np.asarray(labels, dtype=np.int64)
        if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
        if logits.shape[0] == 0:
            raise ShapeError("softmax_xent: empty batch")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise GraphError(f"labels out of range [0, {logits.shape[1]})")
        return self._apply("softmax_xent", (logits,), labels=labels)

    def vdot(self, a: Node, b: Node) -> Node:
        return self.sum(self.mul(a, b))

    # re-execution -----------------------------------------------------------
    def forward(self, inputs: Mapping[str, object], outputs: Iterable[Node] | None = None) -> dict:
        """Re-evaluate the graph with new input values.

        Returns ``{node: value}`` for ``outputs`` (all nodes when omitted).  The
        stored node values are left untouched, so one graph may be replayed from
        several threads at once.
        """
        unknown = set(inputs) - set(self._inputs)
        if unknown:
            raise GraphError(f"unknown inputs: {sorted(unknown)}")
        if outputs is None:
            wanted = None
            last = len(self.nodes) - 1
        else:
            outputs = list(outputs)
            wanted = {n.id for n in outputs}
            last = max(wanted, default=-1)
        vals: list = [None] * (last + 1)
        for node in self.nodes[: last + 1]:
            if node.op == "input":
                if node.name in inputs:
                    v = _as_array(inputs[node.name])
                    if v.shape != node.value.shape:
                        raise ShapeError(
                            f"input {node.name!r}: expected shape {node.value.shape}, got {v.shape}"
                        )
                else:
                    v = node.value
            elif node.op == "const":
                v = node.value
            else:
                pv = [vals[p] for p in node.parents]
                if len(pv) == 2:
                    try:
                        _check_binary(node.op, pv[0], pv[1])
                    except ShapeError as err:
                        raise ShapeError(f"{err} at {node!r}") from None
                v = _FORWARD[node.op](pv, node.attrs)
            vals[node.id] = v
        if wanted is None:
            return {n: vals[n.id] for n in self.nodes}
        return {n: vals[n.id] for n in outputs}


# ---------------------------------------------------------------------------
# backward rules: vjp(graph, node, parent_nodes, upstream) -> tuple of adjoints


def _vjp_add(g, node, ps, up):
    return g.sum_to(up, ps[0].shape), g.sum_to(up, ps[1].shape)


def _vjp_sub(g, node, ps, up):
    return g.sum_to(up, ps[0].shape), g.sum_to(g.scale(up, -1.0), ps[1].shape)


def _vjp_mul(g, node, ps, up):
    a, b = ps
    return g.sum_to(g.mul(up, b), a.shape), g.sum_to(g.mul(up, a), b.shape)


def _vjp_matmul(g, node, ps, up):
    a, b = ps
    return g.matmul(up, g.transpose(b)), g.matmul(g.transpose(a), up)


def _vjp_relu(g, node, ps, up):
    # subgradient at exactly 0 is 0
    return (g.mul(up, g.step(ps[0])),)


def _vjp_softmax(g, node, ps, up):
    s = node
    inner = g.sum_to(g.mul(up, s), (s.shape[0], 1))
    return (g.mul(s, g.sub(up, inner)),)


def _vjp_xent(g, node, ps, up):
    (z,) = ps
    labels = node.attrs["labels"]
    onehot = np.zeros(z.shape)
    onehot[np.arange(z.shape[0]), labels] = 1.0
    d = g.scale(g.sub(g.softmax(z), g.constant(onehot)), 1.0 / z.shape[0])
    return (g.mul(d, up),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": lambda g, n, ps, up: (g.scale(up, n.attrs["c"]),),
    "matmul": _vjp_matmul,
    "transpose": lambda g, n, ps, up: (g.transpose(up),),
    "relu": _vjp_relu,
    "step": lambda g, n, ps, up: (None,),
    "sum": lambda g, n, ps, up: (g.broadcast(up, ps[0].shape),),
    "sum_to": lambda g, n, ps, up: (g.broadcast(up, ps[0].shape),),
    "broadcast": lambda g, n, ps, up: (g.sum_to(up, ps[0].shape),),
    "reshape": lambda g, n, ps, up: (g.reshape(up, ps[0].shape),),
    "slice": lambda g, n, ps, up: (
        g.embed(up, n.attrs["start"], n.attrs["stop"], ps[0].value.size),
    ),
    "embed": lambda g, n, ps, up: (g.slice(up, n.attrs["start"], n.attrs["stop"], ps[0].shape),),
    "softmax": _vjp_softmax,
    "softmax_xent": _vjp_xent,
}


@dataclass(frozen=True)
class GradHandle:
    root: Node
    wrt: tuple
    result: tuple

    @property
    def values(self) -> list[np.ndarray]:
        return [r.value for r in self.result]


class _Mirror:
    """Scratch graph used for non-differentiable backward passes.

    Each node of the source graph is represented by a constant on first use,
    so the backward rules run unchanged but nothing is recorded upstream.
    """

    def __init__(self, source: Graph):
        self.source = source
        self.scratch = Graph()
        self._map: dict[int, Node] = {}

    def __call__(self, node: Node) -> Node:
        m = self._map.get(node.id)
        if m is None:
            m = self.scratch.constant(node.value)
            m.attrs = node.attrs  # rules read e.g. labels from attrs
            self._map[node.id] = m
        return m


def gradient(graph: Graph, loss: Node, wrt: Sequence[Node], differentiable: bool = False) -> GradHandle:
    """Reverse-mode gradient of scalar ``loss`` with respect to each node of ``wrt``.

    With ``differentiable=True`` every backward operation is recorded in
    ``graph``; the returned nodes can then be fed to another ``gradient`` call.
    Otherwise the result nodes are constants.  Nodes that ``loss`` does not
    depend on get a zero gradient.
    """
    if loss.graph is not graph:
        raise GraphError("loss does not belong to this graph")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
    wrt = tuple(wrt)

    if differentiable:
        g, lift = graph, (lambda n: n)
    else:
        mirror = _Mirror(graph)
        g, lift = mirror.scratch, mirror

    # only nodes between wrt and loss need adjoints
    lo = min((w.id for w in wrt), default=loss.id)
    relevant = np.zeros(loss.id + 1, dtype=bool)
    for w in wrt:
        if w.id <= loss.id:
            relevant[w.id] = True
    nodes = graph.nodes
    for node in nodes[lo: loss.id + 1]:
        if not relevant[node.id] and any(relevant[p] for p in node.parents if p >= lo):
            relevant[node.id] = True

    wrt_ids = {w.id for w in wrt}
    adj: dict[int, Node] = {}
    if relevant[loss.id]:
        adj[loss.id] = g.constant(np.ones(loss.shape))
    for nid in range(loss.id, lo - 1, -1):
        up = adj.get(nid) if nid in wrt_ids else adj.pop(nid, None)
        if up is None:
            continue
        node = nodes[nid]
        rule = _VJP.get(node.op)
        if rule is None:
            continue
        parents = [nodes[p] for p in node.parents]
        contribs = rule(g, lift(node), [lift(p) for p in parents], up)
        for p, c in zip(parents, contribs):
            if c is None or not relevant[p.id]:
                continue
            prev = adj.get(p.id)
            adj[p.id] = c if prev is None else g.add(prev, c)

    result = []
    for w in wrt:
        a = adj.get(w.id)
        if a is None:
            res = graph.constant(np.zeros(w.shape))
        elif differentiable:
            res = a
        else:
            res = graph.constant(a.value)
        result.append(res)
    return GradHandle(root=loss, wrt=wrt, result=tuple(result))


def hvp(graph: Graph, loss: Node, wrt: Sequence[Node], v) -> np.ndarray:
    """Exact Hessian-vector product ``H v`` of ``loss`` w.r.t. the concatenated ``wrt``.

    Computed as the gradient of ``<grad loss, v>``; nothing is approximated.
    """
    wrt = tuple(wrt)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    sizes = [w.value.size for w in wrt]
    if v.size != sum(sizes):
        raise ShapeError(f"hvp: |v|={v.size} but parameters total {sum(sizes)}")
    grads = gradient(graph, loss, wrt, differentiable=True).result
    offsets = np.cumsum([0] + sizes)
    dot = None
    for gnode, a, b in zip(grads, offsets[:-1], offsets[1:]):
        term = graph.vdot(gnode, graph.constant(v[a:b].reshape(gnode.shape)))
        dot = term if dot is None else graph.add(dot, term)
    second = gradient(graph, dot, wrt, differentiable=False).result
    return np.concatenate([s.value.reshape(-1) for s in second])
