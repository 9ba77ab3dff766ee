import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prophet_lt import (
    DatasetSplit,
    LongTailSpec,
    SynthMixtureSpec,
    ValidationError,
    class_balanced_sampler,
    instance_sampler,
    load_split,
    make_synthetic_mixture,
    per_class_counts,
    save_split,
    subsample_longtail,
)


def mp_counts(C, n_max, imb):
    mpmath.mp.dps = 50
    return [max(1, int(mpmath.floor(n_max * mpmath.power(imb, -mpmath.mpf(i) / (C - 1)) + mpmath.mpf(1) / 2)))
            for i in range(C)]


def balanced_source(C=10, per=5000, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), per)
    return DatasetSplit(rng.standard_normal((len(labels), dim)), labels, C)


class TestPerClassCounts:
    def test_cifar10_if100_endpoints(self):
        counts = per_class_counts(LongTailSpec(10, 5000, 100))
        assert counts[0] == 5000
        assert counts[9] == 50
        assert counts[3] == 1077

    def test_frozen_profile(self):
        # half-up rounding of 5000 * 100 ** (-i / 9), checked against mpmath
        expected = [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]
        assert per_class_counts(LongTailSpec(10, 5000, 100)).tolist() == expected
        assert mp_counts(10, 5000, 100) == expected

    def test_balanced_when_if_is_one(self):
        assert per_class_counts(LongTailSpec(10, 5000, 1)).tolist() == [5000] * 10

    @pytest.mark.parametrize("kw", [dict(num_classes=1, max_count=10, imbalance_factor=2),
                                    dict(num_classes=10, max_count=10, imbalance_factor=0.5),
                                    dict(num_classes=10, max_count=0, imbalance_factor=2)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValidationError):
            LongTailSpec(**kw)

    def test_floor_of_one(self):
        assert per_class_counts(LongTailSpec(5, 3, 1000)).min() == 1

    @given(C=st.integers(2, 60), n_max=st.integers(1, 10000), imb=st.floats(1.0, 1000.0))
    @settings(max_examples=200, deadline=None)
    def test_monotone_and_endpoints(self, C, n_max, imb):
        counts = per_class_counts(LongTailSpec(C, n_max, imb))
        assert len(counts) == C
        assert np.all(np.diff(counts) <= 0)
        assert counts[0] == n_max
        assert counts[-1] == max(1, int(np.floor(n_max / imb + 0.5)))


class TestSubsample:
    def test_counts_follow_spec(self):
        spec = LongTailSpec(10, 5000, 100)
        out = subsample_longtail(balanced_source(), spec, seed=0)
        assert out.per_class_counts.tolist() == per_class_counts(spec).tolist()
        assert len(out) == per_class_counts(spec).sum()

    def test_deterministic(self):
        spec = LongTailSpec(10, 5000, 100)
        src = balanced_source()
        a, b = subsample_longtail(src, spec, 0), subsample_longtail(src, spec, 0)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = subsample_longtail(src, spec, 1)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_if_one_keeps_every_sample(self):
        src = balanced_source(C=3, per=20)
        out = subsample_longtail(src, LongTailSpec(3, 20, 1), seed=5)
        for c in range(3):
            got = sorted(map(tuple, out.inputs[out.labels == c]))
            want = sorted(map(tuple, src.inputs[src.labels == c]))
            assert got == want

    def test_insufficient_class_named(self):
        src = balanced_source(C=3, per=20)
        src = src.subset(np.flatnonzero(~((src.labels == 1) & (np.arange(len(src)) % 20 > 4))))
        with pytest.raises(ValidationError, match="class 1"):
            subsample_longtail(src, LongTailSpec(3, 20, 2), seed=0)


class TestSyntheticMixture:
    def test_counts_and_balanced_test(self):
        tr, te = make_synthetic_mixture(SynthMixtureSpec(3, 5, (30, 10, 2), test_per_class=7), seed=0)
        assert tr.per_class_counts.tolist() == [30, 10, 2]
        assert te.per_class_counts.tolist() == [7, 7, 7]
        assert tr.inputs.shape == (42, 5)

    def test_equal_counts_balanced(self):
        tr, _ = make_synthetic_mixture(SynthMixtureSpec(4, 3, (9, 9, 9, 9)), seed=2)
        assert len(set(tr.per_class_counts.tolist())) == 1

    def test_deterministic(self):
        spec = SynthMixtureSpec(3, 4, (5, 4, 3))
        (a, b), (c, d) = make_synthetic_mixture(spec, 9), make_synthetic_mixture(spec, 9)
        np.testing.assert_array_equal(a.inputs, c.inputs)
        np.testing.assert_array_equal(b.inputs, d.inputs)

    def test_separable_mixture_linear_classifier(self):
        # least-squares one-vs-rest linear model as the independent classifier
        tr, te = make_synthetic_mixture(SynthMixtureSpec(2, 2, (200, 20), 20.0, 1.0, 500), seed=0)
        X = np.c_[tr.inputs, np.ones(len(tr))]
        Y = np.eye(2)[tr.labels]
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        pred = (np.c_[te.inputs, np.ones(len(te))] @ W).argmax(1)
        assert (pred == te.labels).mean() >= 0.99

    def test_invalid(self):
        with pytest.raises(ValidationError):
            SynthMixtureSpec(2, 2, (1, 0))
        with pytest.raises(ValidationError):
            SynthMixtureSpec(2, 0, (1, 1))


class TestInstanceSampler:
    def test_batch_sizes(self):
        split = DatasetSplit(np.zeros((100, 1)), np.zeros(100, dtype=int), 1)
        sizes = [len(b) for b in instance_sampler(split, 32, 0).epoch_indices(0)]
        assert sizes == [32, 32, 32, 4]

    def test_epoch_is_permutation(self):
        split = DatasetSplit(np.arange(50)[:, None], np.arange(50) % 3, 3)
        s = instance_sampler(split, 8, 1)
        for e in range(3):
            idx = np.concatenate(s.epoch_indices(e))
            assert sorted(idx.tolist()) == list(range(50))

    def test_same_seed_same_order(self):
        split = DatasetSplit(np.arange(50)[:, None], np.arange(50) % 3, 3)
        a = [b.tolist() for b in instance_sampler(split, 8, 4).epoch_indices(2)]
        b = [b.tolist() for b in instance_sampler(split, 8, 4).epoch_indices(2)]
        assert a == b

    def test_class_frequency(self):
        labels = np.repeat(np.arange(3), [60, 30, 10])
        split = DatasetSplit(np.zeros((100, 1)), labels, 3)
        s = instance_sampler(split, 16, 0)
        seen = np.zeros(3)
        for e in range(1000):
            for _, y in s.epoch(e):
                seen += np.bincount(y, minlength=3)
        np.testing.assert_allclose(seen / seen.sum(), [0.6, 0.3, 0.1], atol=0.02)

    def test_stream_yields_batches(self):
        split = DatasetSplit(np.arange(10)[:, None], np.zeros(10, dtype=int), 1)
        it = iter(instance_sampler(split, 4, 0))
        sizes = [len(next(it)[1]) for _ in range(6)]
        assert sizes == [4, 4, 2, 4, 4, 2]

    def test_batch_too_large(self):
        split = DatasetSplit(np.zeros((5, 1)), np.zeros(5, dtype=int), 1)
        with pytest.raises(ValidationError):
            instance_sampler(split, 6, 0)
        with pytest.raises(ValidationError):
            instance_sampler(split, 0, 0)


class TestClassBalancedSampler:
    def test_uniform_class_frequency(self):
        labels = np.repeat(np.arange(4), [500, 100, 20, 3])
        split = DatasetSplit(np.zeros((len(labels), 1)), labels, 4)
        s = class_balanced_sampler(split, 32, 0)
        seen = np.zeros(4)
        for e in range(50):
            for _, y in s.epoch(e):
                seen += np.bincount(y, minlength=4)
        np.testing.assert_allclose(seen / seen.sum(), 0.25, atol=0.02)

    def test_deterministic(self):
        labels = np.repeat(np.arange(3), [10, 5, 2])
        split = DatasetSplit(np.zeros((17, 1)), labels, 3)
        a = [b.tolist() for b in class_balanced_sampler(split, 4, 3).epoch_indices(0)]
        b = [b.tolist() for b in class_balanced_sampler(split, 4, 3).epoch_indices(0)]
        assert a == b

    def test_single_class(self):
        split = DatasetSplit(np.arange(10)[:, None], np.zeros(10, dtype=int), 1)
        idx = np.concatenate(class_balanced_sampler(split, 4, 0).epoch_indices(0))
        assert set(idx.tolist()) <= set(range(10))

    def test_empty_class(self):
        split = DatasetSplit(np.zeros((4, 1)), np.array([0, 0, 2, 2]), 3)
        with pytest.raises(ValidationError, match="class 1"):
            class_balanced_sampler(split, 2, 0)


def test_split_roundtrip(tmp_path):
    tr, _ = make_synthetic_mixture(SynthMixtureSpec(3, 4, (7, 5, 2)), seed=11)
    save_split(tr, tmp_path / "s", seed=11, spec=SynthMixtureSpec(3, 4, (7, 5, 2)))
    back = load_split(tmp_path / "s")
    assert back.inputs.tobytes() == tr.inputs.tobytes()
    assert back.inputs.dtype == tr.inputs.dtype
    np.testing.assert_array_equal(back.labels, tr.labels)
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest["per_class_counts"] == [7, 5, 2]
    assert manifest["seed"] == 11


def test_split_counts_invariant():
    split = DatasetSplit(np.zeros((6, 1)), [0, 1, 1, 2, 2, 2], 4)
    assert split.per_class_counts.tolist() == [1, 2, 3, 0]
    assert split.per_class_counts.sum() == len(split)
    with pytest.raises(ValidationError):
        DatasetSplit(np.zeros((2, 1)), [0, 4], 4)
