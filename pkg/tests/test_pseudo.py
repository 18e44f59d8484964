import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsda.errors import ContractError, DataError, DimensionError
from fsda.pseudo import (
    ensemble_average,
    load_pseudo_snapshot,
    pseudo_label_shift,
    save_pseudo_snapshot,
    to_pseudo_labels,
)


def random_probs(rng, n, c):
    p = rng.random((n, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def test_identical_members():
    p = random_probs(np.random.default_rng(0), 5, 3)
    np.testing.assert_allclose(ensemble_average([p, p, p]), p, rtol=0, atol=1e-15)


def test_symmetric_pair():
    np.testing.assert_array_equal(ensemble_average([[[1.0, 0.0]], [[0.0, 1.0]]]), [[0.5, 0.5]])


def test_scalar_mean_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mats = [random_probs(rng, 4, 3) for _ in range(3)]
        avg = ensemble_average(mats)
        for i in range(4):
            for j in range(3):
                s = 0.0
                for m in mats:
                    s += m[i][j]
                assert abs(avg[i, j] - s / 3) <= 1e-12
        np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-6)


def test_average_errors():
    with pytest.raises(ContractError):
        ensemble_average([])
    with pytest.raises(DimensionError):
        ensemble_average([np.full((2, 2), 0.5), np.full((3, 2), 0.5)])
    with pytest.raises(DataError):
        ensemble_average([[[0.7, 0.7]]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    mats = [random_probs(rng, 6, 4) for _ in range(m)]
    perm = rng.permutation(m)
    np.testing.assert_allclose(ensemble_average([mats[i] for i in perm]), ensemble_average(mats), atol=1e-15)


def test_argmax_and_confidence():
    ps = to_pseudo_labels([[0.2, 0.5, 0.3]])
    assert ps.hard_labels.tolist() == [1]
    assert ps.confidences.tolist() == [0.5]


def test_tie_goes_to_lowest_index():
    assert to_pseudo_labels([[0.5, 0.5]]).hard_labels.tolist() == [0]
    assert to_pseudo_labels([[0.25, 0.375, 0.375]]).hard_labels.tolist() == [1]


def test_threshold():
    ps = to_pseudo_labels([[0.9, 0.1], [0.55, 0.45]], threshold=0.6)
    assert ps.hard_labels[0] == 0
    assert ps.excluded.tolist() == [False, True]
    assert not to_pseudo_labels([[0.9, 0.1], [0.55, 0.45]]).excluded.any()
    with pytest.raises(ContractError):
        to_pseudo_labels([[1.0, 0.0]], threshold=1.5)


def test_idempotent_recomputation():
    p = random_probs(np.random.default_rng(2), 30, 5)
    a, b = to_pseudo_labels(p), to_pseudo_labels(p.copy())
    np.testing.assert_array_equal(a.hard_labels, b.hard_labels)
    np.testing.assert_array_equal(a.confidences, b.confidences)


def test_immutable():
    ps = to_pseudo_labels([[0.2, 0.8]])
    with pytest.raises(ValueError):
        ps.hard_labels[0] = 0


def test_shift_examples():
    a = to_pseudo_labels([[1, 0], [1, 0], [0, 1], [0, 1]])
    assert pseudo_label_shift(a, a) == 0.0
    flipped = to_pseudo_labels([[0, 1], [0, 1], [1, 0], [1, 0]])
    assert pseudo_label_shift(a, flipped) == 1.0
    one = to_pseudo_labels([[1, 0], [1, 0], [0, 1], [1, 0]])
    assert pseudo_label_shift(a, one) == 0.25
    with pytest.raises(DimensionError):
        pseudo_label_shift(a, to_pseudo_labels([[1, 0]]))


def test_snapshot_round_trip(tmp_path):
    p = random_probs(np.random.default_rng(3), 8, 3)
    ps = to_pseudo_labels(p, threshold=0.45, round_index=3)
    save_pseudo_snapshot(ps, tmp_path / "r.json")
    back = load_pseudo_snapshot(tmp_path / "r.json", p)
    assert back.round_index == 3
    np.testing.assert_array_equal(back.hard_labels, ps.hard_labels)
    np.testing.assert_array_equal(back.confidences, ps.confidences)
    np.testing.assert_array_equal(back.excluded, ps.excluded)
    with pytest.raises(DimensionError):
        load_pseudo_snapshot(tmp_path / "r.json", p[:3])
