import numpy as np
import pytest
from hypothesis import given, strategies as st

from tensorlift.convnet import assemble_factors, make_haar_topology, make_parallel_dirac_topology
from tensorlift.lifting import FactorFamily, LiftedOperator, eval_product, materialize_lifting, row_sparse_model
from tensorlift.identifiability import (
    Status,
    check_minimizer_characterization,
    dimension_verdict,
    join_dimension_bound,
    search_nonidentifiability_witness,
    segre_dimension,
)
from tensorlift.tensor_core import class_distance


def dirac_pair():
    f = assemble_factors(make_parallel_dirac_topology(4))
    return f, materialize_lifting(f)


# minimizer characterization ----------------------------------------------------

def test_same_stack_is_minimizer(rng):
    op = materialize_lifting(FactorFamily.diagonal(3))
    h = rng.standard_normal((2, 3))
    assert check_minimizer_characterization(op, h, h)


def test_equivalent_stack_is_minimizer(rng):
    op = materialize_lifting(FactorFamily.diagonal(3))
    h = rng.standard_normal((2, 3))
    assert check_minimizer_characterization(op, h, h * np.array([[-4.0], [-0.25]]))


def test_different_output_is_not_minimizer(rng):
    f = FactorFamily.diagonal(3)
    op = materialize_lifting(f)
    for _ in range(20):
        h, g = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        assert np.linalg.norm(eval_product(f, h) - eval_product(f, g)) > 1e-6
        assert not check_minimizer_characterization(op, h, g)


def test_kernel_difference_is_minimizer():
    # diag(h0) diag(h1) only sees the diagonal of h0 h1^T
    op = materialize_lifting(FactorFamily.diagonal(2))
    h = np.array([[1.0, 0.0], [1.0, 1.0]])
    g = np.array([[1.0, 1.0], [1.0, 0.0]])
    assert check_minimizer_characterization(op, h, g)


# dimension counts --------------------------------------------------------------

def test_dimensions():
    assert segre_dimension(1, 5) == 5
    assert segre_dimension(3, 4) == 10
    assert join_dimension_bound(2, 3) == 8
    assert join_dimension_bound(3, 4) == 20


def test_k1_threshold():
    v = dimension_verdict(7, K=1, S=4)
    assert v.threshold_used == 8 and v.status is Status.INCONCLUSIVE
    assert dimension_verdict(8, K=1, S=4).status is Status.GENERICALLY_IDENTIFIABLE


def test_generic_threshold_example():
    v = dimension_verdict(8, K=2, S=2)
    assert v.threshold_used == 6 and v.status is Status.GENERICALLY_IDENTIFIABLE


def test_linear_space_rules_out_identifiability():
    v = dimension_verdict(9, K=2, S=3, model_linear_dim=5)
    assert v.status is Status.NOT_IDENTIFIABLE


def test_verdict_from_operator():
    op = materialize_lifting(FactorFamily.identity(3))
    v = dimension_verdict(op)
    assert v.rank_A == 3 and v.d_max == 3 and v.status is Status.INCONCLUSIVE
    assert v.as_row()["status"] == v.status.value


def test_bare_rank_needs_shape():
    with pytest.raises(ValueError):
        dimension_verdict(4)


ORDER = {Status.NOT_IDENTIFIABLE: 0, Status.INCONCLUSIVE: 1, Status.GENERICALLY_IDENTIFIABLE: 2}


@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 200), st.integers(0, 200),
       st.one_of(st.none(), st.integers(1, 50)))
def test_verdict_monotone_in_rank(K, S, r1, r2, lin):
    lo, hi = sorted((r1, r2))
    a = dimension_verdict(lo, K=K, S=S, model_linear_dim=lin).status
    b = dimension_verdict(hi, K=K, S=S, model_linear_dim=lin).status
    assert not (a is Status.GENERICALLY_IDENTIFIABLE and b is Status.NOT_IDENTIFIABLE)
    assert ORDER[b] >= ORDER[a]


# witness search ----------------------------------------------------------------

def test_trivial_kernel_gives_no_witness(rng):
    for _ in range(5):
        A = rng.standard_normal((12, 8))
        op = LiftedOperator.from_matrix(A, K=3, S=2, m=3, n=4)
        assert op.kernel_dim == 0
        assert search_nonidentifiability_witness(None, op, trials=4, seed=1) is None


def test_zero_trials_gives_none():
    f, op = dirac_pair()
    assert search_nonidentifiability_witness(f, op, trials=0) is None


def test_double_dirac_witness():
    f, op = dirac_pair()
    w = search_nonidentifiability_witness(f, op, trials=2, seed=0)
    assert w is not None
    np.testing.assert_array_equal(eval_product(f, w.h), eval_product(f, w.g))
    assert check_minimizer_characterization(op, w.h, w.g)
    assert class_distance(w.h, w.g, 2) >= 0.1


def test_haar_two_branch_witness_by_search():
    f = assemble_factors(make_haar_topology(2, 8, branches=2))
    op = materialize_lifting(f)
    assert op.kernel_dim > 0
    w = search_nonidentifiability_witness(f, op, trials=8, seed=0)
    assert w is not None
    assert check_minimizer_characterization(op, w.h, w.g)
    assert w.distance >= 0.1 * np.abs(np.multiply.outer(*w.h)).max() ** 0.5


def test_diagonal_family_witness_respects_model():
    f = FactorFamily.diagonal(3)
    op = materialize_lifting(f)
    model = row_sparse_model(2, 3, levels=[1])
    w = search_nonidentifiability_witness(f, op, model=model, trials=4, seed=3)
    assert w is not None
    assert model.membership(1, w.h) and model.membership(1, w.g)
    assert check_minimizer_characterization(op, w.h, w.g)
