import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaland import tasks
from metaland.tasks import TaskDistributionConfig


def pool_with(**kw):
    return tasks.build_pool(TaskDistributionConfig(**kw))


class TestPool:
    def test_deterministic(self):
        a = pool_with(master_seed=11)
        b = pool_with(master_seed=11)
        assert a.prototypes.tobytes() == b.prototypes.tobytes()
        assert a.prototypes.tobytes() != pool_with(master_seed=12).prototypes.tobytes()

    def test_default_split_shape(self):
        pool = tasks.build_pool(TaskDistributionConfig())
        assert pool.prototypes.shape == (88, 20)
        assert pool.classes("train").size == 64 and pool.classes("test").size == 24
        assert not set(pool.classes("train")) & set(pool.classes("test"))

    def test_prototype_mean_clt_bound(self):
        scale = 2.0
        pool = pool_with(n_train_classes=1000, n_test_classes=0, prototype_scale=scale, master_seed=5)
        assert np.all(np.abs(pool.prototypes.mean(axis=0)) < 4 * scale / math.sqrt(1000))
        assert pool.prototypes.std() == pytest.approx(scale, rel=0.05)

    def test_unknown_split(self, tiny_pool):
        with pytest.raises(ValueError):
            tiny_pool.classes("valid")


class TestSampleTask:
    def test_deterministic(self, tiny_pool):
        a = tasks.sample_task(tiny_pool, "train", 5, 1, 3, (4, 2))
        b = tasks.sample_task(tiny_pool, "train", 5, 1, 3, (4, 2))
        for f in ("classes", "support_x", "support_y", "target_x", "target_y"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert a.task_id == ("train", 4, 2)

    def test_order_independent(self, tiny_pool):
        # an episode does not depend on which episodes were drawn before it
        late = tasks.sample_task(tiny_pool, "train", 5, 1, 3, (9, 9))
        for i in range(5):
            tasks.sample_task(tiny_pool, "train", 5, 1, 3, (0, i))
        assert tasks.sample_task(tiny_pool, "train", 5, 1, 3, (9, 9)).support_x.tobytes() == late.support_x.tobytes()

    def test_zero_noise_unrotated_support_is_prototype(self):
        pool = pool_with(noise_scale=0.0, rotate_per_task=False, master_seed=2)
        ep = tasks.sample_task(pool, "train", 5, 1, 2, (0, 0))
        np.testing.assert_array_equal(ep.support_x, pool.prototypes[ep.classes])

    def test_zero_noise_rotated_support_is_rotated_prototype(self):
        pool = pool_with(noise_scale=0.0, master_seed=2)
        ep = tasks.sample_task(pool, "train", 20, 1, 2, (0, 0))
        mu = pool.prototypes[ep.classes]
        assert not np.allclose(ep.support_x, mu)
        # 20 prototypes in 20 dimensions pin down the map; it must be orthogonal
        rot = np.linalg.solve(mu, ep.support_x)
        np.testing.assert_allclose(rot @ rot.T, np.eye(20), atol=1e-9)
        np.testing.assert_allclose(ep.target_x[::2], ep.support_x, atol=1e-12)

    def test_rotation_is_orthogonal(self):
        r = tasks.random_rotation(np.random.default_rng(0), 20)
        np.testing.assert_allclose(r @ r.T, np.eye(20), atol=1e-13)

    def test_label_balance_and_range(self, tiny_pool):
        ep = tasks.sample_task(tiny_pool, "test", 4, 3, 7, (1, 1))
        assert ep.support_x.shape == (12, 8) and ep.target_x.shape == (28, 8)
        assert np.array_equal(np.bincount(ep.support_y, minlength=4), [3] * 4)
        assert np.array_equal(np.bincount(ep.target_y, minlength=4), [7] * 4)
        assert len(set(ep.classes)) == 4

    def test_support_and_target_disjoint(self, tiny_pool):
        ep = tasks.sample_task(tiny_pool, "train", 5, 5, 5, (0, 1))
        assert not {r.tobytes() for r in ep.support_x} & {r.tobytes() for r in ep.target_x}

    def test_labels_permuted_by_seed(self):
        pool = pool_with(master_seed=0)
        orders = {tuple(np.argsort(tasks.sample_task(pool, "train", 5, 1, 1, (0, i)).classes)) for i in range(30)}
        assert len(orders) > 1

    def test_class_subsets_differ(self):
        pool = pool_with(master_seed=1)
        subsets = [frozenset(tasks.sample_task(pool, "train", 5, 1, 1, (0, i)).classes) for i in range(200)]
        # collision probability per pair is 1/C(64,5) ~ 1.3e-7
        assert len(set(subsets)) == 200

    def test_errors(self, tiny_pool):
        with pytest.raises(ValueError, match="11-way"):
            tasks.sample_task(tiny_pool, "test", 11, 1, 1, (0, 0))
        with pytest.raises(ValueError):
            tasks.sample_task(tiny_pool, "train", 5, 0, 1, (0, 0))
        with pytest.raises(ValueError):
            tasks.sample_task(tiny_pool, "train", 5, 1, 0, (0, 0))

    @settings(max_examples=40, deadline=None)
    @given(split=st.sampled_from(["train", "test"]), m=st.integers(1, 10), k=st.integers(1, 4),
           q=st.integers(1, 4), path=st.tuples(st.integers(0, 10**6), st.integers(0, 10**6)))
    def test_class_disjointness_property(self, tiny_pool, split, m, k, q, path):
        ep = tasks.sample_task(tiny_pool, split, m, k, q, path)
        assert set(ep.classes) <= set(tiny_pool.classes(split))
        assert np.array_equal(np.bincount(ep.support_y, minlength=m), [k] * m)
        assert np.array_equal(np.bincount(ep.target_y, minlength=m), [q] * m)


def nearest_support_accuracy(ep):
    d = ((ep.target_x[:, None, :] - ep.support_x[None, :, :]) ** 2).sum(-1)
    return float(np.mean(ep.support_y[d.argmin(axis=1)] == ep.target_y))


@pytest.mark.parametrize("noise,lo,hi", [(1e-6, 1.0, 1.0), (1e6, 0.15, 0.25)])
def test_difficulty_dial(noise, lo, hi):
    pool = pool_with(noise_scale=noise, master_seed=4)
    acc = np.mean([nearest_support_accuracy(tasks.sample_task(pool, "test", 5, 1, 15, (0, i))) for i in range(200)])
    assert lo <= acc <= hi


class TestFixedEvalSet:
    def test_identical_per_tag(self, tiny_pool):
        a = tasks.fixed_eval_set(tiny_pool, 5, 1, 2, 60, "flatness")
        b = tasks.fixed_eval_set(tiny_pool, 5, 1, 2, 60, "flatness")
        assert len(a) == 60
        assert all(x.target_x.tobytes() == y.target_x.tobytes() for x, y in zip(a, b))
        c = tasks.fixed_eval_set(tiny_pool, 5, 1, 2, 60, "coherence")
        assert a[0].target_x.tobytes() != c[0].target_x.tobytes()

    def test_uses_test_classes(self, tiny_pool):
        test_classes = set(tiny_pool.classes("test"))
        assert all(set(ep.classes) <= test_classes for ep in tasks.fixed_eval_set(tiny_pool, 5, 1, 1, 500, 0))

    def test_never_collides_with_training_stream(self, tiny_pool):
        ev = tasks.fixed_eval_set(tiny_pool, 5, 1, 1, 3, 0, split="train")
        tr = [tasks.sample_task(tiny_pool, "train", 5, 1, 1, (0, i)) for i in range(3)]
        assert all(a.support_x.tobytes() != b.support_x.tobytes() for a, b in zip(ev, tr))

    def test_count_zero(self, tiny_pool):
        assert tasks.fixed_eval_set(tiny_pool, 5, 1, 1, 0, "x") == []


class TestSupervisedBatch:
    def test_labels_are_train_classes(self, tiny_pool):
        x, y = tasks.supervised_batch(tiny_pool, 256, (0, 0))
        assert x.shape == (256, 8)
        assert y.min() >= 0 and y.max() < 20

    def test_deterministic(self, tiny_pool):
        a = tasks.supervised_batch(tiny_pool, 16, (3, 1))
        b = tasks.supervised_batch(tiny_pool, 16, (3, 1))
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
