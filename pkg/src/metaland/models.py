"""ReLU multilayer perceptron classifiers on flat parameter vectors."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import Graph, Node

MAGIC = b"MLND"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_way: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.n_way < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"invalid model spec {self}")

    @property
    def dims(self) -> np.ndarray:
        return np.array((self.input_dim, *self.hidden_dims, self.n_way), dtype=np.int64)

    @property
    def n_params(self) -> int:
        d = self.dims
        return int(sum((fi + 1) * fo for fi, fo in zip(d[:-1], d[1:])))

    @property
    def head_start(self) -> int:
        """Offset of the final layer's weights in the flat vector."""
        return self.n_params - (int(self.dims[-2]) + 1) * self.n_way

    def layers(self):
        """Yield ``(w_start, w_stop, (fan_in, fan_out), b_stop)`` per layer."""
        off = 0
        d = [int(v) for v in self.dims]
        for fi, fo in zip(d[:-1], d[1:]):
            yield off, off + fi * fo, (fi, fo), off + fi * fo + fo
            off += (fi + 1) * fo

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["n_way"]))


PROFILES = {
    "desk": ModelSpec(20, (64, 64), 5),
    "tiny": ModelSpec(8, (16,), 5),
}


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for w0, w1, (fi, fo), _ in spec.layers():
        bound = xavier_bound(fi, fo)
        params[w0:w1] = rng.uniform(-bound, bound, size=fi * fo)
    return params


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` copies, W shaped (fan_in, fan_out)."""
    _check_params(spec, params)
    params = np.asarray(params, dtype=np.float64)
    return [(params[w0:w1].reshape(shape).copy(), params[w1:b1].copy())
            for w0, w1, shape, b1 in spec.layers()]


def flatten(layers) -> np.ndarray:
    """Inverse of :func:`unflatten`."""
    return np.concatenate([np.concatenate((np.ravel(w), np.ravel(b))) for w, b in layers])


def _check_params(spec: ModelSpec, params) -> None:
    size = params.value.size if isinstance(params, Node) else np.size(params)
    if size != spec.n_params:
        raise ValueError(f"parameter vector has {size} entries, spec needs {spec.n_params}")


def graph_logits(graph: Graph, spec: ModelSpec, theta: Node, inputs) -> Node:
    """Record the forward pass of ``spec`` at flat parameters ``theta`` in ``graph``."""
    a = inputs if isinstance(inputs, Node) else graph.constant(inputs)
    n_layers = len(spec.dims) - 1
    for l, (w0, w1, shape, b1) in enumerate(spec.layers()):
        w = graph.slice(theta, w0, w1, shape)
        b = graph.slice(theta, w1, b1)
        a = graph.add(graph.matmul(a, w), b)
        if l < n_layers - 1:
            a = graph.relu(a)
    return a


def forward_logits(spec: ModelSpec, params, inputs):
    """Logits of shape (batch, n_way).

    ``params`` may be an array (evaluated directly) or a graph node, in which
    case the result is a node differentiable to any order.
    """
    _check_params(spec, params)
    x = inputs.value if isinstance(inputs, Node) else np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs of shape {x.shape} do not match input_dim={spec.input_dim}")
    if isinstance(params, Node):
        return graph_logits(params.graph, spec, params, inputs)
    return kernels.logits(params, spec.dims, x)


def loss(spec: ModelSpec, params, inputs, labels):
    """Mean cross-entropy over the given samples."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("loss over an empty sample set")
    if labels.min() < 0 or labels.max() >= spec.n_way:
        raise ValueError(f"labels must lie in [0, {spec.n_way})")
    if isinstance(params, Node):
        return params.graph.softmax_xent(forward_logits(spec, params, inputs), labels)
    _check_params(spec, params)
    return kernels.loss(params, spec.dims, inputs, labels)


def loss_grad(spec: ModelSpec, params: np.ndarray, inputs, labels) -> tuple[float, np.ndarray]:
    return kernels.loss_grad(params, spec.dims, inputs, labels)


def accuracy(spec: ModelSpec, params: np.ndarray, inputs, labels) -> float:
    pred = np.argmax(forward_logits(spec, params, inputs), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def replace_head(spec: ModelSpec, params: np.ndarray, new_way: int, seed: int) -> tuple[ModelSpec, np.ndarray]:
    """Swap the final layer for a freshly Xavier-initialised ``new_way``-class head."""
    if new_way < 2:
        raise ValueError("new_way must be at least 2")
    _check_params(spec, params)
    new_spec = replace(spec, n_way=int(new_way))
    fan_in = int(spec.dims[-2])
    body = np.asarray(params)[: spec.head_start]
    rng = np.random.default_rng(seed)
    bound = xavier_bound(fan_in, new_way)
    head_w = rng.uniform(-bound, bound, size=fan_in * new_way)
    out = np.concatenate([body, head_w, np.zeros(new_way)])
    return new_spec, out


# checkpoints ----------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_vector(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def read_vector(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", raw[8:16])
    if len(raw) != 16 + 8 * count:
        raise CheckpointError(f"{path}: expected {count} parameters, file holds {(len(raw) - 16) / 8:g}")
    return np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray, *, seed: int, epoch: int,
                    algorithm: str, extra: dict | None = None) -> Path:
    _check_params(spec, params)
    path = Path(path)
    write_vector(path, params)
    meta = {"model": spec.to_dict(), "seed": int(seed), "epoch": int(epoch), "algorithm": algorithm}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray, dict]:
    params = read_vector(path)
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: missing sidecar {sidecar_path(path).name}") from None
    spec = ModelSpec.from_dict(meta["model"])
    if params.size != spec.n_params:
        raise CheckpointError(
            f"{path}: model spec expects {spec.n_params} parameters, found {params.size}"
        )
    return spec, params, meta
