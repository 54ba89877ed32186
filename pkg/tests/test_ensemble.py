import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cxrlt.ensemble import EnsembleSpec, average_scores
from cxrlt.errors import ConfigError, ContractError, IncompatibleError
from cxrlt.scores import ScoreMatrix

LABELS = tuple(f"l{j}" for j in range(26))


def matrix(values, labels=None, refs=None):
    values = np.asarray(values, dtype=np.float64)
    refs = refs or tuple(f"r{i}" for i in range(values.shape[0]))
    labels = labels or tuple(f"l{j}" for j in range(values.shape[1]))
    return ScoreMatrix(tuple(refs), tuple(labels), values)


def test_identical_inputs():
    m = matrix(np.random.default_rng(0).random((4, 3)))
    np.testing.assert_array_equal(average_scores([m, m]).values, m.values)


def test_arithmetic_mean():
    out = average_scores([matrix([[0.2]]), matrix([[0.8]])])
    assert out.values[0, 0] == 0.5


def test_three_random_matches_elementwise_mean():
    rng = np.random.default_rng(1)
    ms = [matrix(rng.random((5, 26)), LABELS) for _ in range(3)]
    expected = np.empty((5, 26))
    for i in range(5):
        for j in range(26):
            expected[i, j] = (ms[0].values[i, j] + ms[1].values[i, j] + ms[2].values[i, j]) / 3
    np.testing.assert_allclose(average_scores(ms).values, expected, rtol=0, atol=1e-15)


def test_singleton_identity():
    m = matrix(np.random.default_rng(2).random((3, 4)))
    out = average_scores([m])
    np.testing.assert_array_equal(out.values, m.values)
    assert out.values is not m.values


def test_weights():
    a, b = matrix([[0.0, 1.0]]), matrix([[1.0, 0.0]])
    np.testing.assert_allclose(average_scores([a, b], [3, 1]).values, [[0.25, 0.75]], atol=1e-15)
    with pytest.raises(ConfigError):
        average_scores([a, b], [1.0])
    with pytest.raises(ConfigError):
        average_scores([a, b], [1.0, 0.0])
    with pytest.raises(ConfigError):
        average_scores([])


def test_mismatches():
    a = matrix([[0.1, 0.2]])
    with pytest.raises(IncompatibleError):
        average_scores([a, matrix([[0.1, 0.2]], labels=("x", "y"))])
    with pytest.raises(IncompatibleError):
        average_scores([a, matrix([[0.1, 0.2]], refs=("other",))])


def test_spec_validation():
    assert EnsembleSpec(("a", "b")).normalized_weights() == (0.5, 0.5)
    assert EnsembleSpec(("a", "b"), (1.0, 3.0)).normalized_weights() == (0.25, 0.75)
    for bad in [dict(members=()), dict(members=("a",), weights=(1.0, 2.0)), dict(members=("a",), weights=(-1.0,))]:
        with pytest.raises(ConfigError):
            EnsembleSpec(**bad)


unit = arrays(np.float64, (4, 3), elements=st.floats(0.0, 1.0))


@given(st.lists(unit, min_size=1, max_size=5), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_bounds_and_permutation_invariance(values, rnd):
    ms = [matrix(v) for v in values]
    out = average_scores(ms).values
    stack = np.stack(values)
    assert np.all(stack.min(axis=0) <= out) and np.all(out <= stack.max(axis=0))
    shuffled = ms[:]
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(average_scores(shuffled).values, out)


def test_score_matrix_csv_round_trip(tmp_path):
    m = matrix(np.random.default_rng(3).random((6, 4)), refs=tuple(f"toy/img_{i}.png" for i in range(6)))
    back = ScoreMatrix.load(m.save(tmp_path / "s.csv"))
    assert back.image_refs == m.image_refs and back.labels == m.labels
    np.testing.assert_array_equal(back.values, m.values)
    assert (tmp_path / "s.csv").read_text(encoding="utf-8").startswith("image_ref,l0,l1,l2,l3\n")


def test_score_matrix_validation():
    with pytest.raises(ContractError):
        matrix([[1.5]])
    with pytest.raises(ContractError):
        ScoreMatrix(("a",), ("x", "y"), np.zeros((1, 3)))
