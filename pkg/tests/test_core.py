import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowprod.core import (
    CapExceededError,
    FactorMatrix,
    RowProductOperator,
    apply,
    apply_adjoint,
    caps_override,
    flat_to_multi,
    gram,
    iterated_log,
    materialize,
    multi_to_flat,
    regime_check,
    row_entry,
)

A = [[1, 1], [1, -1]]
B = [[1, -1], [1, 1]]


def random_op(rng, K, d, n, signs=False):
    if signs:
        return RowProductOperator([rng.choice([-1.0, 1.0], size=(d, n)) for _ in range(K)])
    return RowProductOperator([rng.uniform(-1, 1, size=(d, n)) for _ in range(K)])


@st.composite
def operators(draw, max_K=3, max_d=4, max_n=5):
    K = draw(st.integers(1, max_K))
    n = draw(st.integers(1, max_n))
    rows = [draw(st.integers(1, max_d)) for _ in range(K)]
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return RowProductOperator([rng.uniform(-1, 1, size=(r, n)) for r in rows])


def brute_materialize(op):
    rows = []
    for m in itertools.product(*(range(r) for r in op.row_counts)):
        row = np.ones(op.n)
        for f, i in zip(op.factors, m):
            row = row * f.data[i]
        rows.append(row)
    return np.array(rows)


# --------------------------------------------------------------------------
# FactorMatrix


def test_factor_rejects_large_entries():
    with pytest.raises(ValueError):
        FactorMatrix([[1.5, 0.0]])


def test_factor_rejects_nonfinite():
    with pytest.raises(ValueError):
        FactorMatrix([[np.nan, 0.0]])


def test_factor_is_read_only():
    f = FactorMatrix(A)
    with pytest.raises(ValueError):
        f.data[0, 0] = 0.0


def test_factor_binary_round_trip():
    rng = np.random.default_rng(1)
    f = FactorMatrix(rng.uniform(-1, 1, size=(3, 7)))
    g = FactorMatrix.from_bytes(f.to_bytes())
    assert np.array_equal(f.data, g.data)
    assert f.to_bytes()[:4] == b"RPFM"


def test_factor_json_round_trip():
    rng = np.random.default_rng(2)
    f = FactorMatrix(rng.uniform(-1, 1, size=(4, 2)))
    assert np.array_equal(FactorMatrix.from_json(f.to_json()).data, f.data)


def test_factor_from_bytes_rejects_truncation():
    blob = FactorMatrix(A).to_bytes()
    with pytest.raises(ValueError):
        FactorMatrix.from_bytes(blob[:-3])


def test_operator_requires_common_columns():
    with pytest.raises(ValueError):
        RowProductOperator([np.ones((2, 3)), np.ones((2, 4))])


# --------------------------------------------------------------------------
# indexing and entries


def test_row_entry_hand_example():
    op = RowProductOperator([A, B])
    # row multi-index (2, 1) and column 2 in one-based terms
    assert row_entry(op, (1, 0), 1) == 1.0


def test_row_entry_zero_column_annihilates():
    f = np.ones((3, 4))
    f[:, 2] = 0.0
    op = RowProductOperator([np.ones((2, 4)), f])
    assert all(row_entry(op, m, 2) == 0.0 for m in itertools.product(range(2), range(3)))


def test_row_entry_matches_materialize():
    op = random_op(np.random.default_rng(3), 3, 3, 4)
    M = materialize(op)
    for m in itertools.product(range(3), repeat=3):
        for j in range(4):
            assert row_entry(op, m, j) == M[multi_to_flat(op, m), j]


def test_flat_multi_round_trip():
    op = RowProductOperator([np.ones((2, 1)), np.ones((3, 1)), np.ones((4, 1))])
    for r in range(op.total_rows):
        assert multi_to_flat(op, flat_to_multi(op, r)) == r
    assert flat_to_multi(op, 0) == (0, 0, 0)
    assert flat_to_multi(op, 1) == (0, 0, 1)
    assert flat_to_multi(op, 4) == (0, 1, 0)


def test_multi_index_out_of_range():
    op = RowProductOperator([A, B])
    with pytest.raises(IndexError):
        multi_to_flat(op, (2, 0))


# --------------------------------------------------------------------------
# materialize


def test_materialize_single_factor():
    rng = np.random.default_rng(4)
    F = rng.uniform(-1, 1, size=(3, 5))
    assert np.array_equal(materialize(RowProductOperator([F])), F)


def test_materialize_hand_example():
    M = materialize(RowProductOperator([A, B]))
    assert np.array_equal(M, [[1, -1], [1, 1], [1, 1], [1, -1]])


def test_materialize_rows_match_row_entry():
    op = random_op(np.random.default_rng(5), 3, 2, 3, signs=True)
    M = materialize(op)
    for r in range(op.total_rows):
        m = flat_to_multi(op, r)
        assert [row_entry(op, m, j) for j in range(3)] == list(M[r])


def test_materialize_cap():
    op = RowProductOperator([np.ones((10, 10))] * 3)
    with pytest.raises(CapExceededError):
        materialize(op, cap=100)
    with caps_override(materialize_entries=50):
        with pytest.raises(CapExceededError):
            materialize(RowProductOperator([np.ones((8, 8))]))


# --------------------------------------------------------------------------
# apply and its adjoint


def test_apply_zero():
    op = random_op(np.random.default_rng(6), 2, 3, 4)
    assert np.array_equal(apply(op, np.zeros(4)), np.zeros(9))


def test_apply_first_basis_vector_norm():
    rng = np.random.default_rng(7)
    d, K = 5, 3
    op = random_op(rng, K, d, 4, signs=True)
    y = apply(op, np.eye(4)[0])
    assert np.linalg.norm(y) == pytest.approx(d ** (K / 2), rel=1e-14)


def test_apply_matches_materialized():
    rng = np.random.default_rng(8)
    op = random_op(rng, 2, 4, 5)
    x = rng.standard_normal(5)
    assert np.max(np.abs(apply(op, x) - materialize(op) @ x)) <= 1e-12


def test_apply_batched_columns():
    rng = np.random.default_rng(9)
    op = random_op(rng, 3, 3, 4)
    X = rng.standard_normal((4, 6))
    assert np.allclose(apply(op, X), materialize(op) @ X, atol=1e-12)


def test_apply_rejects_bad_length():
    op = random_op(np.random.default_rng(10), 2, 3, 4)
    with pytest.raises(ValueError):
        apply(op, np.ones(5))


def test_adjoint_zero_and_single_factor():
    rng = np.random.default_rng(11)
    F = rng.uniform(-1, 1, size=(4, 3))
    op = RowProductOperator([F])
    assert np.array_equal(apply_adjoint(op, np.zeros(4)), np.zeros(3))
    y = rng.standard_normal(4)
    assert np.allclose(apply_adjoint(op, y), F.T @ y, atol=1e-14)


def test_adjoint_pairing():
    rng = np.random.default_rng(12)
    op = random_op(rng, 2, 4, 6)
    x, y = rng.standard_normal(6), rng.standard_normal(16)
    assert apply(op, x) @ y == pytest.approx(x @ apply_adjoint(op, y), rel=1e-12)
    assert np.max(np.abs(apply_adjoint(op, y) - materialize(op).T @ y)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(operators(), st.integers(0, 2**32 - 1))
def test_property_apply_and_adjoint_match_brute_force(op, seed):
    rng = np.random.default_rng(seed)
    M = brute_materialize(op)
    x = rng.standard_normal(op.n)
    y = rng.standard_normal(op.total_rows)
    assert np.allclose(apply(op, x), M @ x, atol=1e-12)
    assert np.allclose(apply_adjoint(op, y), M.T @ y, atol=1e-12)


# --------------------------------------------------------------------------
# gram


def test_gram_single_factor():
    rng = np.random.default_rng(13)
    F = rng.uniform(-1, 1, size=(5, 3))
    assert np.allclose(gram(RowProductOperator([F])), F.T @ F, atol=1e-14)


def test_gram_all_ones():
    d, K, n = 3, 3, 4
    G = gram(RowProductOperator([np.ones((d, n))] * K))
    assert np.array_equal(G, np.full((n, n), float(d**K)))


def test_gram_matches_materialized():
    op = random_op(np.random.default_rng(14), 3, 4, 6)
    M = materialize(op)
    assert np.max(np.abs(gram(op) - M.T @ M)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(operators())
def test_property_gram_is_hadamard_of_factor_grams(op):
    M = brute_materialize(op)
    G = gram(op)
    assert np.allclose(G, M.T @ M, atol=1e-12)
    assert np.array_equal(G, G.T)


def test_gram_cap():
    with pytest.raises(CapExceededError):
        gram(RowProductOperator([np.ones((2, 10))]), cap=5)


# --------------------------------------------------------------------------
# structural helpers


def test_restrict_columns_and_squared():
    rng = np.random.default_rng(15)
    op = random_op(rng, 2, 3, 5)
    sub = op.restrict_columns([0, 3])
    assert np.array_equal(materialize(sub), materialize(op)[:, [0, 3]])
    assert np.allclose(materialize(op.squared()), materialize(op) ** 2, atol=1e-15)


def test_iterated_log_examples():
    assert iterated_log(1, math.e) == pytest.approx(1.0)
    assert iterated_log(1, 0.5) == 1.0
    assert iterated_log(2, math.exp(math.e)) == pytest.approx(1.0)
    assert iterated_log(1, 100.0) == pytest.approx(math.log(100.0))


def test_iterated_log_rejects_bad_input():
    with pytest.raises(ValueError):
        iterated_log(0, 2.0)
    with pytest.raises(ValueError):
        iterated_log(1, 0.0)


def test_regime_check_examples():
    assert regime_check(1, 2, 1, 1, 1).holds
    for d in (3, 5, 16):
        assert not regime_check(d**2, d, 2, 1, 1).holds
    rep = regime_check(1000, 16, 3, 2, 1)
    expected = 16**3 / max(math.log(max(math.log(16), 1.0)), 1.0)
    assert rep.bound == pytest.approx(expected, rel=1e-14)
    assert rep.holds == (1000 <= expected)
    assert rep.to_dict()["rhs"] == rep.bound
