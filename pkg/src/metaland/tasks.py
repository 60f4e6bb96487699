"""Synthetic few-shot classification tasks built from Gaussian class prototypes.

Classes are prototype vectors drawn once from a master seed and split into
disjoint meta-train and meta-test pools.  An episode picks ``m`` classes of
one split, draws ``k`` support and ``q`` target samples per class around the
prototypes, and optionally passes all inputs through a task-specific random
rotation.

Every random draw is keyed by ``(master_seed, split, *seed_path)`` through
``numpy.random.SeedSequence`` spawn keys, so an episode never depends on
which episodes were sampled before it.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

SPLITS = {"train": 0, "test": 1}

# spawn-key prefixes for the independent random streams
_PROTOTYPES = 0
_EPISODE = 1
_SUPERVISED = 2


@dataclass(frozen=True)
class TaskDistributionConfig:
    input_dim: int = 20
    n_train_classes: int = 64
    n_test_classes: int = 24
    prototype_scale: float = 1.0
    noise_scale: float = 0.5
    rotate_per_task: bool = True
    master_seed: int = 0


@dataclass(frozen=True)
class ClassPool:
    config: TaskDistributionConfig
    prototypes: np.ndarray = field(repr=False)

    def classes(self, split: str) -> np.ndarray:
        c = self.config
        if split == "train":
            return np.arange(c.n_train_classes)
        if split == "test":
            return np.arange(c.n_train_classes, c.n_train_classes + c.n_test_classes)
        raise ValueError(f"unknown split {split!r}")


@dataclass(frozen=True)
class Episode:
    task_id: tuple
    classes: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    n_way: int
    k_shot: int

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return self.support_x, self.support_y

    @property
    def target(self) -> tuple[np.ndarray, np.ndarray]:
        return self.target_x, self.target_y


def _rng(master_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def build_pool(config: TaskDistributionConfig) -> ClassPool:
    n = config.n_train_classes + config.n_test_classes
    if config.n_train_classes < 0 or config.n_test_classes < 0 or config.input_dim < 1:
        raise ValueError(f"invalid task distribution {config}")
    rng = _rng(config.master_seed, _PROTOTYPES)
    prototypes = config.prototype_scale * rng.standard_normal((n, config.input_dim))
    return ClassPool(config, prototypes)


def sample_task(pool: ClassPool, split: str, m: int, k: int, q: int, seed_path: tuple) -> Episode:
    classes = pool.classes(split)
    if m > classes.size:
        raise ValueError(f"{m}-way task requested but the {split} split has {classes.size} classes")
    if m < 1 or k < 1 or q < 1:
        raise ValueError("n_way, k_shot and targets-per-class must all be >= 1")
    cfg = pool.config
    rng = _rng(cfg.master_seed, _EPISODE, SPLITS[split], *seed_path)
    # draw order doubles as the label permutation
    chosen = rng.choice(classes, size=m, replace=False)
    rot = random_rotation(rng, cfg.input_dim) if cfg.rotate_per_task else None

    def draw(per_class: int):
        mu = np.repeat(pool.prototypes[chosen], per_class, axis=0)
        x = mu + cfg.noise_scale * rng.standard_normal(mu.shape)
        if rot is not None:
            x = x @ rot.T
        return x, np.repeat(np.arange(m), per_class)

    sx, sy = draw(k)
    tx, ty = draw(q)
    return Episode((split, *seed_path), chosen, sx, sy, tx, ty, m, k)


def tag_code(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def fixed_eval_set(pool: ClassPool, m: int, k: int, q: int, count: int, tag, split: str = "test") -> list[Episode]:
    """``count`` meta-test episodes, identical on every call with the same tag."""
    code = tag_code(tag)
    return [sample_task(pool, split, m, k, q, (2**31 + code, i)) for i in range(count)]


def supervised_batch(pool: ClassPool, batch_size: int, seed_path: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Un-rotated mini-batch over all meta-train classes, labelled by class index."""
    cfg = pool.config
    if cfg.n_train_classes < 1:
        raise ValueError("pool has no meta-train classes")
    rng = _rng(cfg.master_seed, _SUPERVISED, *seed_path)
    y = rng.integers(0, cfg.n_train_classes, size=batch_size)
    x = pool.prototypes[y] + cfg.noise_scale * rng.standard_normal((batch_size, cfg.input_dim))
    return x, y
