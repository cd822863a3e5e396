import math

import numpy as np
import pytest

from tensorlift.convnet import assemble_factors, make_chain_topology
from tensorlift.dnsp import estimate_gamma
from tensorlift.errors import DimensionMismatch
from tensorlift.lifting import FactorFamily, eval_product, full_model, materialize_lifting, row_sparse_model
from tensorlift.stability import (
    ExperimentConfig,
    FitSettings,
    first_stage_bound,
    fit_factors,
    run_recovery_experiment,
    stability_bound,
    unit_noise,
)


# closed-form bound -------------------------------------------------------------

def test_bound_zero_noise():
    assert stability_bound(3.0, 0.5, 3, 4, 2, 1.0, 2.0, 0.0, 0.0) == 0.0


def test_bound_k1_example():
    assert stability_bound(1.0, 2.0, 1, 4, 2, 1.0, 1.0, 0.15, 0.05) == pytest.approx(1.4, rel=1e-14)


def test_bound_linear_in_noise():
    a = stability_bound(1.3, 0.7, 2, 3, 1, 2.0, 3.0, 0.1, 0.02)
    b = stability_bound(1.3, 0.7, 2, 3, 1, 2.0, 3.0, 0.2, 0.04)
    assert b == pytest.approx(2 * a, rel=1e-14)


def test_bound_p_infinity_drops_root():
    # (KS)^(1/inf) = 1, and min(4, 9)^(1/2 - 1) = 1/3
    assert stability_bound(1.0, 1.0, 2, 5, np.inf, 4.0, 9.0, 0.3, 0.0) == pytest.approx(7 * 0.3 / 3, rel=1e-14)


def test_first_stage_bound():
    assert first_stage_bound(2.0, 4.0, 0.1, 0.3) == pytest.approx(0.2, rel=1e-15)
    with pytest.raises(ValueError):
        first_stage_bound(1.0, 0.0, 0.1, 0.1)


# fit_factors -------------------------------------------------------------------

def test_fit_k1_single_solve(rng):
    f = FactorFamily.random(1, 4, [3, 3], rng, density=0.9)
    X = eval_product(f, rng.standard_normal((1, 4)))
    fit = fit_factors(f, X, seed=1)
    assert fit.eta <= 1e-9 * np.linalg.norm(X)


def test_fit_zero_target():
    f = FactorFamily.diagonal(3)
    fit = fit_factors(f, np.zeros((3, 3)))
    assert fit.eta == 0.0
    assert not eval_product(f, fit.h).any()


def test_fit_shape_check():
    with pytest.raises(DimensionMismatch):
        fit_factors(FactorFamily.diagonal(3), np.zeros((2, 3)))


def test_fit_diagonal_planted_success_rate(rng):
    f = FactorFamily.diagonal(4)
    settings = FitSettings(max_iters=50, restarts=1, tol=1e-14)
    wins = 0
    for seed in range(100):
        X = eval_product(f, np.random.default_rng(seed).standard_normal((2, 4)))
        fit = fit_factors(f, X, settings=settings, seed=seed)
        wins += fit.eta <= 1e-6 * np.linalg.norm(X)
    assert wins >= 90


def test_fit_objective_non_increasing_full_model(rng):
    for _ in range(20):
        K = int(rng.integers(2, 4))
        f = FactorFamily.random(K, 3, [int(d) for d in rng.integers(2, 4, size=K + 1)], rng, density=0.6)
        X = rng.standard_normal((f.m, f.n))
        fit = fit_factors(f, X, settings=FitSettings(max_iters=40, restarts=2), seed=int(rng.integers(1000)))
        hist = np.array(fit.history)
        assert np.all(np.diff(hist) <= 1e-9 * hist[:-1] + 1e-14 * np.linalg.norm(X))
        assert not fit.non_decreasing


def test_fit_respects_row_sparse_level(rng):
    f = FactorFamily.diagonal(4)
    model = row_sparse_model(2, 4)
    fit = fit_factors(f, rng.standard_normal((4, 4)), model=model, L=2, seed=0)
    assert model.membership(2, fit.h)


def test_unit_noise_norm(rng):
    assert np.linalg.norm(unit_noise((3, 5), rng)) == pytest.approx(1.0, rel=1e-14)


# recovery experiments ----------------------------------------------------------

def chain(N=8):
    f = assemble_factors(make_chain_topology(N, [[0, 1], [0, 2], [0, 4]]))
    return f, materialize_lifting(f)


def test_noise_free_trivial_kernel_recovery():
    f, op = chain()
    rep = run_recovery_experiment(ExperimentConfig(f, delta=0.0, seed=3), op)
    assert rep.gamma_exact and rep.gamma == 1.0
    assert rep.d_p <= 1e-8 and rep.holds is True


def test_huge_noise_is_not_applicable():
    f, op = chain()
    rep = run_recovery_experiment(ExperimentConfig(f, delta=1e6, seed=0), op)
    assert rep.holds is None and not rep.preconditions_met
    assert rep.as_row()["holds"] == "n/a"


def test_single_path_chain_many_seeds():
    f, op = chain()
    assert op.sigma_min == pytest.approx(math.sqrt(8), rel=1e-9)
    met = 0
    for seed in range(200):
        rep = run_recovery_experiment(ExperimentConfig(f, delta=1e-3, seed=seed), op)
        # trivial kernel: the first-stage inequality is unconditional
        assert rep.first_stage_lhs <= rep.first_stage_bound * (1 + 1e-9)
        if rep.preconditions_met:
            met += 1
            assert rep.holds, rep
    assert met >= 150


def test_nontrivial_kernel_needs_estimate():
    f = FactorFamily.diagonal(3)
    op = materialize_lifting(f)
    with pytest.raises(ValueError):
        run_recovery_experiment(ExperimentConfig(f, delta=0.1, seed=0), op)
    nsp = estimate_gamma(op, full_model(2, 3), rho=10.0, n_samples=50, seed=0)
    rep = run_recovery_experiment(ExperimentConfig(f, delta=0.01, seed=0), op, nsp)
    assert not rep.gamma_exact and rep.gamma == nsp.gamma_hat


def test_config_rejects_negative_noise():
    with pytest.raises(ValueError):
        ExperimentConfig(FactorFamily.diagonal(2), delta=-1.0, seed=0)
