import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsda.errors import AlignmentError, ConfigError, NumericError
from fsda.feature_store import FeatureTable
from fsda.fusion import FusionConfig, bilinear_fuse, enumerate_pairs, fuse_matrices, fuse_tables
from fsda.linear_model import SOURCE_LABELED, TrainConfig, TrainingSet, accuracy, train_classifier

RAW = FusionConfig(signed_sqrt=False, l2_normalize=False)


def scalar_oracle(x, y, signed_sqrt=True, l2=True):
    z = []
    for xi in x:
        for yj in y:
            z.append(float(xi) * float(yj))
    if signed_sqrt:
        z = [math.copysign(math.sqrt(abs(v)), v) for v in z]
    if l2:
        n = math.sqrt(sum(v * v for v in z))
        if n > 0:
            z = [v / n for v in z]
    return np.array(z)


@pytest.mark.parametrize(
    "x, y, expected",
    [
        ([1, 0], [0, 1], [0, 1, 0, 0]),
        ([1, 1], [1, 1], [0.5, 0.5, 0.5, 0.5]),
        ([2, 0], [1, 0], [1, 0, 0, 0]),
        ([0, 0], [3, 4], [0, 0, 0, 0]),
    ],
)
def test_examples(x, y, expected):
    np.testing.assert_allclose(bilinear_fuse(x, y), expected, atol=1e-15)


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        bilinear_fuse([np.nan, 1.0], [1.0])
    with pytest.raises(NumericError):
        fuse_matrices(np.ones((2, 2)), np.full((2, 1), np.inf))


def test_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.standard_normal(rng.integers(1, 7))
        y = rng.standard_normal(rng.integers(1, 7))
        for s in (False, True):
            for l2 in (False, True):
                cfg = FusionConfig(signed_sqrt=s, l2_normalize=l2)
                np.testing.assert_allclose(bilinear_fuse(x, y, cfg), scalar_oracle(x, y, s, l2), rtol=0, atol=1e-12)


def test_fuse_tables_rowwise_oracle():
    rng = np.random.default_rng(1)
    labels = [0, -1, 2, 1, 0]
    a = FeatureTable("a", "d", rng.standard_normal((5, 3)), labels, 3)
    b = FeatureTable("b", "d", rng.standard_normal((5, 4)), labels, 3)
    out = fuse_tables(a, b)
    assert out.features.shape == (5, 12)
    assert out.backbone_id == "a+b"
    assert out.labels.tolist() == labels
    for i in range(5):
        # output is stored as f32, compare at f32 resolution
        np.testing.assert_allclose(out.features[i], scalar_oracle(a.features[i], b.features[i]), atol=1e-7)
    np.testing.assert_allclose(
        fuse_matrices(a.features, b.features)[2], scalar_oracle(a.features[2], b.features[2]), atol=1e-12
    )


def test_fuse_tables_single_row_and_label_pass_through():
    a = FeatureTable("a", "d", [[1.0, 2.0]], [-1], 2)
    b = FeatureTable("b", "d", [[3.0]], [-1], 2)
    out = fuse_tables(a, b)
    np.testing.assert_allclose(out.features[0], bilinear_fuse([1, 2], [3]), atol=1e-7)
    a2 = FeatureTable("a", "d", np.ones((2, 2)), [0, -1], 2)
    b2 = FeatureTable("b", "d", np.ones((2, 3)), [0, -1], 2)
    assert fuse_tables(a2, b2).labels.tolist() == [0, -1]


def test_fuse_tables_alignment_errors():
    a = FeatureTable("a", "d", np.ones((3, 2)), [0, 1, 0], 2)
    with pytest.raises(AlignmentError):
        fuse_tables(a, FeatureTable("b", "d", np.ones((2, 2)), [0, 1], 2))
    with pytest.raises(AlignmentError):
        fuse_tables(a, FeatureTable("b", "d", np.ones((3, 2)), [0, 1, 1], 2))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    st.lists(st.floats(-10, 10), min_size=1, max_size=6),
)
def test_unit_norm(x, y):
    z = bilinear_fuse(x, y)
    if np.any(np.outer(x, y) != 0):
        assert abs(np.linalg.norm(z) - 1.0) < 1e-6
    else:
        assert not z.any()


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
def test_bilinearity_and_scale_invariance(alpha):
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.standard_normal(4)
        y = rng.standard_normal(3)
        np.testing.assert_allclose(bilinear_fuse(alpha * x, y, RAW), alpha * bilinear_fuse(x, y, RAW), rtol=1e-12)
        np.testing.assert_allclose(bilinear_fuse(x, alpha * y, RAW), alpha * bilinear_fuse(x, y, RAW), rtol=1e-12)
        np.testing.assert_allclose(bilinear_fuse(alpha * x, y), bilinear_fuse(x, y), atol=1e-12)
        np.testing.assert_allclose(bilinear_fuse(x, alpha * y), bilinear_fuse(x, y), atol=1e-12)


def test_projection_kicks_in_above_max_dim():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal(5), rng.standard_normal(4)
    small = FusionConfig(max_dim=8)
    z = bilinear_fuse(x, y, small)
    assert z.shape == (8,)
    assert abs(np.linalg.norm(z) - 1) < 1e-12
    np.testing.assert_array_equal(z, bilinear_fuse(x, y, small))
    assert bilinear_fuse(x, y, FusionConfig(max_dim=20)).shape == (20,)
    # batched path uses the same projection
    np.testing.assert_allclose(fuse_matrices(x[None], y[None], small)[0], z, atol=1e-15)


def _xor_data(rng, n):
    x = rng.standard_normal((n, 3))
    y = rng.standard_normal((n, 3))
    labels = (x[:, 0] * y[:, 0] > 0).astype(int)
    return x, y, labels


def test_xor_expressiveness():
    concat, fused = [], []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        xs, ys, ls = _xor_data(rng, 400)
        xt, yt, lt = _xor_data(rng, 400)
        cfg = TrainConfig(seed=seed)
        c = train_classifier(TrainingSet.block(np.hstack([xs, ys]), ls, SOURCE_LABELED), cfg, class_count=2)
        concat.append(accuracy(c, np.hstack([xt, yt]), lt))
        f = train_classifier(TrainingSet.block(fuse_matrices(xs, ys), ls, SOURCE_LABELED), cfg, class_count=2)
        fused.append(accuracy(f, fuse_matrices(xt, yt), lt))
    assert np.mean(concat) <= 0.60
    assert np.mean(fused) >= 0.90


@pytest.mark.parametrize("b", range(1, 13))
def test_enumerate_pairs_count(b):
    ids = [f"bb{i}" for i in range(b)]
    specs = enumerate_pairs(ids)
    # brute force: every subset of size 1 or 2, ordered by (size, indices)
    brute = [(i,) for i in range(b)] + [(i, j) for i in range(b) for j in range(b) if i < j]
    assert [tuple(ids.index(x) for x in s.backbones) for s in specs] == brute
    assert len(specs) == b + b * (b - 1) // 2
    assert len({s.backbones for s in specs}) == len(specs)


def test_enumerate_pairs_eight_backbones():
    specs = enumerate_pairs([f"cnn{i}" for i in range(8)])
    assert len(specs) == 36
    assert sum(s.is_pair for s in specs) == 28
    assert [s.name for s in enumerate_pairs(["a", "b"])] == ["a", "b", "a+b"]
    assert list(combinations("abc", 2)) == [s.backbones for s in enumerate_pairs("abc") if s.is_pair]


def test_enumerate_pairs_errors():
    with pytest.raises(ConfigError):
        enumerate_pairs([])
    with pytest.raises(ConfigError):
        enumerate_pairs(["a", "b", "a"])
