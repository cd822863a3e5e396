import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorlift.convnet import assemble_factors, make_parallel_dirac_topology
from tensorlift.dnsp import derive_nsp_from_stability, estimate_gamma, gamma_of_tensor
from tensorlift.errors import ZeroTensor
from tensorlift.identifiability import search_nonidentifiability_witness
from tensorlift.lifting import FactorFamily, full_model, materialize_lifting, probe_rng, row_sparse_model
from tensorlift.tensor_core import segre_embed


@pytest.fixture
def diag_op():
    return materialize_lifting(FactorFamily.diagonal(3))


# gamma_of_tensor ---------------------------------------------------------------

def test_trivial_kernel_gamma_is_one(rng):
    op = materialize_lifting(FactorFamily.identity(4))
    for _ in range(10):
        assert gamma_of_tensor(op, rng.standard_normal((4,))) == pytest.approx(1.0, rel=1e-14)


def test_kernel_tensor_gamma_is_infinite(diag_op, rng):
    T = (diag_op.kernel_basis @ rng.standard_normal(diag_op.kernel_dim)).reshape(3, 3)
    assert math.isinf(gamma_of_tensor(diag_op, T))


def test_pythagoras_example(diag_op):
    T = np.zeros((3, 3))
    T[0, 1] = 1.0  # off-diagonal: kernel direction
    T[2, 2] = 1.0  # diagonal: orthogonal to the kernel
    assert gamma_of_tensor(diag_op, T) == pytest.approx(math.sqrt(2), rel=1e-14)


def test_zero_tensor_rejected(diag_op):
    with pytest.raises(ZeroTensor):
        gamma_of_tensor(diag_op, np.zeros((3, 3)))


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3))
def test_gamma_scale_invariant(seed, c):
    op = materialize_lifting(FactorFamily.diagonal(3))
    T = np.random.default_rng(seed).standard_normal((3, 3))
    assert gamma_of_tensor(op, c * T) == pytest.approx(gamma_of_tensor(op, T), rel=1e-12)


# estimate_gamma ----------------------------------------------------------------

def test_trivial_kernel_estimate():
    op = materialize_lifting(FactorFamily.identity(4))
    est = estimate_gamma(op, full_model(1, 4), rho=1.0, n_samples=50, seed=2)
    assert est.gamma_hat == pytest.approx(1.0, rel=1e-12) and not est.failed


def test_failing_convnet_with_witness():
    f = assemble_factors(make_parallel_dirac_topology(4))
    op = materialize_lifting(f)
    w = search_nonidentifiability_witness(f, op, trials=2)
    est = estimate_gamma(op, full_model(1, 2), rho=1.0, n_samples=20, seed=0, extra_pairs=[(w.h, w.g)])
    assert est.failed and math.isinf(est.gamma_hat)


def test_singleton_sample(diag_op):
    model = full_model(2, 3)
    est = estimate_gamma(diag_op, model, rho=1e6, n_samples=1, seed=7)
    # replay the single draw from its own stream
    rng = probe_rng(7, 0)
    T = segre_embed(model.sampler(3, rng)) - segre_embed(model.sampler(3, rng))
    assert est.gamma_hat == pytest.approx(max(1.0, gamma_of_tensor(diag_op, T)), rel=1e-14)
    assert est.n_samples == 1


def test_monotone_in_samples(diag_op):
    model = row_sparse_model(2, 3)
    prev = 0.0
    for n in (1, 5, 20, 80):
        g = estimate_gamma(diag_op, model, rho=0.5, n_samples=n, seed=11).gamma_hat
        assert g >= prev
        prev = g


def test_workers_do_not_change_result(diag_op):
    model = row_sparse_model(2, 3)
    a = estimate_gamma(diag_op, model, rho=None, n_samples=40, seed=5, workers=1)
    b = estimate_gamma(diag_op, model, rho=None, n_samples=40, seed=5, workers=4)
    assert a.gamma_hat == b.gamma_hat and a.rho == b.rho and a.rho_is_default


def test_out_of_ball_discarded_for_non_scale_closed(diag_op):
    from dataclasses import replace
    model = replace(full_model(2, 3), scale_closed=False)
    est = estimate_gamma(diag_op, model, rho=1e-9, n_samples=10, seed=0)
    assert est.n_discarded == 10 and est.n_samples == 0


def test_usual_nsp_consequence_on_samples(diag_op, rng):
    model = full_model(2, 3)
    est = estimate_gamma(diag_op, model, rho=1.0, n_samples=100, seed=4)
    for _ in range(20):
        Tk = (diag_op.kernel_basis @ rng.standard_normal(diag_op.kernel_dim)).reshape(3, 3)
        for i in range(20):
            r = probe_rng(4, i)
            T = segre_embed(model.sampler(3, r)) - segre_embed(model.sampler(3, r))
            an = np.linalg.norm(diag_op.apply(T))
            T = T * min(1.0, 1.0 / an)
            assert np.linalg.norm(T) <= est.gamma_hat * np.linalg.norm(T - Tk) * (1 + 1e-12)


def test_bad_arguments(diag_op):
    with pytest.raises(ValueError):
        estimate_gamma(diag_op, full_model(2, 3), rho=1.0, n_samples=0)
    with pytest.raises(ValueError):
        estimate_gamma(diag_op, full_model(2, 3), rho=-1.0, n_samples=3)


# derived constants -------------------------------------------------------------

def test_derive_k1():
    assert derive_nsp_from_stability(2.5, 0.3, 1, 7, 4.0) == (10.0, 0.3)


def test_derive_example():
    g, r = derive_nsp_from_stability(1.0, 0.1, 2, 4, 3.0)
    assert g == pytest.approx(6 * math.sqrt(2), rel=1e-15) and r == 0.1


def test_derive_linear_in_C():
    a = derive_nsp_from_stability(1.5, 0.2, 3, 3, 2.0)
    b = derive_nsp_from_stability(3.0, 0.2, 3, 3, 2.0)
    assert b[0] == pytest.approx(2 * a[0], rel=1e-15) and a[1] == b[1]


def test_derive_rejects_nonpositive():
    with pytest.raises(ValueError):
        derive_nsp_from_stability(0.0, 0.1, 2, 2, 1.0)
