import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowprod.core import RowProductOperator, apply, materialize
from rowprod.ensembles import EnsembleSpec, make_rng, sample_factors
from rowprod.geometry import (
    block_decompose,
    kashin_audit,
    l1_min_probe,
    levy_empirical,
    levy_pair_bound,
    q_norm,
    row_product_q_norm,
    sample_flat_ball_point,
    v_condition_audit,
    volume_ratio_witness,
)


def signs(rng, K, d, n):
    return RowProductOperator([rng.choice([-1.0, 1.0], size=(d, n)) for _ in range(K)])


# --------------------------------------------------------------------------
# block decomposition


def test_block_sizes():
    dec = block_decompose(np.arange(5, 0, -1) / 10, 1)
    assert [len(b) for b in dec.blocks] == [1, 4]
    dec = block_decompose(np.ones(30), 2)
    assert [len(b) for b in dec.blocks] == [2, 8, 20]


def test_block_ties_keep_index_order():
    dec = block_decompose(np.full(21, 0.2), 1)
    assert [b.tolist() for b in dec.blocks] == [[0], list(range(1, 5)), list(range(5, 21))]


def test_blocks_sorted_by_magnitude():
    x = np.array([0.1, -0.9, 0.3, 0.0, -0.5])
    dec = block_decompose(x, 1)
    assert dec.blocks[0].tolist() == [1]
    assert dec.blocks[1].tolist() == [4, 2, 0, 3]


def test_block_rejects_bad_input():
    with pytest.raises(ValueError):
        block_decompose(np.ones(3), 0)
    with pytest.raises(ValueError):
        block_decompose(np.array([]), 1)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 300), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_property_weighted_block_sum(m, b_frac, l_frac, seed):
    b = math.exp(math.log(1 / math.sqrt(m)) * (1 - b_frac) + math.log(0.999) * b_frac)
    x = sample_flat_ball_point(m, b, make_rng(seed))
    assert np.linalg.norm(x) <= 1 + 1e-12 and np.max(np.abs(x)) <= b + 1e-15
    l = 1 + int(l_frac * (math.floor(b**-2) - 1))
    assert block_decompose(x, l).weighted_sum(x) <= 5.0


# --------------------------------------------------------------------------
# Q-norm


def test_q_norm_examples():
    assert q_norm(np.eye(2)) == 2.0
    assert q_norm(np.ones((3, 4))) == pytest.approx(3 * 2.0)
    U = np.random.default_rng(0).standard_normal((3, 4))
    assert q_norm(U) == pytest.approx(sum(math.sqrt(sum(U[i, j] ** 2 for j in range(4))) for i in range(3)))


def test_q_norm_is_a_norm():
    rng = np.random.default_rng(1)
    for _ in range(50):
        U, V = rng.standard_normal((2, 4, 3))
        a = rng.standard_normal()
        assert q_norm(U + V) <= q_norm(U) + q_norm(V) + 1e-12
        assert q_norm(a * U) == pytest.approx(abs(a) * q_norm(U))
    assert q_norm(np.zeros((2, 2))) == 0.0


def test_row_product_q_norm_matches_materialized():
    rng = np.random.default_rng(2)
    op = RowProductOperator([rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (4, 5))])
    x = rng.standard_normal(5)
    assert row_product_q_norm(op, x) == pytest.approx(q_norm(materialize(op) * x), rel=1e-12)


def test_q_norm_ratio_all_ones():
    op = RowProductOperator([np.ones((3, 4))] * 2)
    x = np.random.default_rng(3).standard_normal(4)
    x /= np.linalg.norm(x)
    assert v_condition_audit(op, [x])["min_ratio"] == pytest.approx(1.0, rel=1e-12)


def test_q_norm_first_basis_vector():
    op = signs(np.random.default_rng(4), 2, 5, 3)
    assert row_product_q_norm(op, np.eye(3)[0]) == 25.0
    assert v_condition_audit(op, [np.eye(3)[0]])["min_ratio"] == 1.0


def test_v_condition_default_directions():
    op = signs(np.random.default_rng(5), 1, 32, 64)
    out = v_condition_audit(op, seed=0, n_random=20)
    assert out["count"] > 20 and 0 < out["min_ratio"] <= 1.0


# --------------------------------------------------------------------------
# l1 probe


def test_probe_identity():
    res = l1_min_probe(RowProductOperator([np.eye(4)]), restarts=10, steps=500, seed=0)
    assert 1.0 - 1e-12 <= res.best_value <= 1 + 1e-6


def test_probe_all_ones_kernel():
    res = l1_min_probe(RowProductOperator([np.ones((4, 6))] * 2), restarts=5, steps=200, seed=0)
    assert res.best_value < 1e-6


def test_probe_value_is_attained():
    op = signs(np.random.default_rng(6), 2, 4, 6)
    res = l1_min_probe(op, restarts=4, steps=100, seed=1)
    assert np.linalg.norm(res.best_point) == pytest.approx(1.0)
    assert np.abs(apply(op, res.best_point)).sum() == pytest.approx(res.best_value, rel=1e-12)
    assert res.best_value == pytest.approx(min(res.restart_values))


def test_probe_two_columns_against_circle_sweep():
    rng = np.random.default_rng(7)
    op = RowProductOperator([rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (3, 2))])
    M = materialize(op)
    # between kinks the objective is a positive sinusoid, so the minimum sits
    # at a point orthogonal to some row
    kinks = np.array([[-r[1], r[0]] / np.linalg.norm(r) for r in M if np.linalg.norm(r) > 0])
    exact = np.abs(M @ kinks.T).sum(axis=0).min()
    theta = np.linspace(0, 2 * np.pi, 20001)
    assert exact <= np.abs(M @ np.vstack([np.cos(theta), np.sin(theta)])).sum(axis=0).min() + 1e-12
    res = l1_min_probe(op, restarts=20, steps=2000, seed=0)
    assert res.best_value >= exact - 1e-12
    assert res.best_value <= exact * (1 + 1e-4)


def test_probe_trajectory_csv():
    res = l1_min_probe(RowProductOperator([np.eye(3)]), restarts=2, steps=10, seed=0, record_every=5)
    lines = res.trajectory_csv().strip().splitlines()
    assert lines[0] == "restart,step,value"
    assert len(lines) > 1


def test_probe_is_deterministic():
    op = signs(np.random.default_rng(8), 2, 4, 6)
    a = l1_min_probe(op, restarts=3, steps=50, seed=11)
    b = l1_min_probe(op, restarts=3, steps=50, seed=11)
    assert a.best_value == b.best_value and np.array_equal(a.best_point, b.best_point)


# --------------------------------------------------------------------------
# Kashin audit


def test_kashin_sign_image_ratio_one():
    op = signs(np.random.default_rng(9), 2, 4, 5)
    y = apply(op, np.eye(5)[0])
    assert np.abs(y).sum() == 16 and np.linalg.norm(y) == 4
    assert math.sqrt(op.total_rows) * np.linalg.norm(y) / np.abs(y).sum() == 1.0


def test_kashin_single_spike_is_worst_case():
    y = np.zeros(16)
    y[3] = 2.0
    assert math.sqrt(16) * np.linalg.norm(y) / np.abs(y).sum() == pytest.approx(4.0)


def test_kashin_audit_counts():
    op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), 6, 10, 2, seed=1))
    probe = l1_min_probe(op, restarts=4, steps=50, seed=0)
    out = kashin_audit(op, n_random_images=30, probe=probe, seed=0)
    assert out["images"] == 30 + 4 + 1
    assert out["cs_violations"] == 0
    assert out["max_equivalence_ratio"] >= 1.0


# --------------------------------------------------------------------------
# Levy concentration


def test_levy_deterministic():
    est = levy_pair_bound(lambda rng: np.array([1.0, 2.0]), rho=0.0, trials=100, seed=0)
    assert est.estimate == 1.0


def test_levy_scalar_rademacher():
    est = levy_pair_bound(lambda rng: rng.choice([-1.0, 1.0], size=1), rho=0.5, trials=10_000, seed=1)
    assert abs(est.frequency - 0.5) <= 3 * math.sqrt(0.25 / 10_000)
    assert est.ci_low <= 0.5 <= est.ci_high
    assert est.estimate == pytest.approx(math.sqrt(est.frequency))


def test_levy_large_radius():
    est = levy_pair_bound(lambda rng: rng.choice([-1.0, 1.0], size=3), rho=3.0, trials=200, seed=2)
    assert est.estimate == 1.0


def test_levy_rejects_bad_arguments():
    with pytest.raises(ValueError):
        levy_pair_bound(lambda rng: np.zeros(1), rho=-1.0, trials=10, seed=0)
    with pytest.raises(ValueError):
        levy_pair_bound(lambda rng: np.zeros(1), rho=1.0, trials=0, seed=0)


def test_levy_empirical_edges():
    op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), 4, 6, 2, seed=3))
    x = np.random.default_rng(0).standard_normal(6)
    far = levy_empirical(op, x, rho=1e9, center=np.zeros(16), trials=50, seed=0)
    assert far.frequency == 1.0
    unreachable = levy_empirical(op, x, rho=0.0, center=np.full(16, 0.123), trials=200, seed=0)
    assert unreachable.frequency == 0.0


def test_levy_empirical_resamples_last_factor():
    op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), [3, 1], 4, seed=4))
    x = np.random.default_rng(1).standard_normal(4)
    # with the true image as center and a tiny radius, a redraw of the single
    # last row hits exactly when it reproduces that row (probability 1/16)
    center = apply(op, x)
    est = levy_empirical(op, x, rho=1e-9, center=center, trials=4000, seed=2)
    assert abs(est.frequency - 1 / 16) <= 4 * math.sqrt(15 / 256 / 4000)


def test_levy_small_ball_has_no_hits():
    op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), 16, 32, 2, seed=5))
    x = np.random.default_rng(2).standard_normal(32)
    x /= np.linalg.norm(x)
    est = levy_empirical(op, x, rho=0.1 * 0.5 * 16**2, center=np.zeros(256), trials=10_000, seed=3)
    assert est.hits == 0


# --------------------------------------------------------------------------
# volume ratio witness


def test_witness_single_factor():
    F = np.random.default_rng(6).choice([-1.0, 1.0], size=(4, 3))
    out = volume_ratio_witness(RowProductOperator([F]))
    assert out["identity_holds"]
    assert np.array_equal(apply(RowProductOperator([F]), np.eye(3)[0]), F[:, 0])


def test_witness_hand_instance():
    A = np.array([[1.0, -1.0], [-1.0, 1.0]])
    B = np.array([[-1.0, 1.0], [1.0, 1.0]])
    op = RowProductOperator([A, B])
    assert np.array_equal(apply(op, np.eye(2)[0]), [-1.0, 1.0, 1.0, -1.0])
    assert volume_ratio_witness(op)["identity_holds"]


def test_witness_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(20):
        op = signs(rng, 3, 4, 5)
        out = volume_ratio_witness(op)
        assert out["identity_holds"]
        assert out["gauge_bound"] == pytest.approx(math.sqrt(12))


def test_witness_rejects_non_sign():
    with pytest.raises(ValueError):
        volume_ratio_witness(RowProductOperator([np.full((2, 2), 0.5)]))


def test_levy_pairing_dominates_point_frequency():
    op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), [3, 1], 4, seed=8))
    x = np.array([1.0, 0.5, -0.25, 0.0])
    center = apply(op, x)

    def sampler(rng):
        last = rng.choice([-1.0, 1.0], size=(1, 4))
        return apply(RowProductOperator([op.factors[0], last]), x)

    for rho in (0.1, 1.0, 2.0):
        pair = levy_pair_bound(sampler, rho, trials=4000, seed=1)
        point = levy_empirical(op, x, rho, center, trials=4000, seed=2)
        assert pair.ci_high >= point.ci_low
        assert pair.estimate >= point.frequency - 3 * math.sqrt(0.25 / 4000)
