"""Stability bounds and noisy recovery experiments for deep structured linear networks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dnsp import NspEstimate
from .errors import DimensionMismatch
from .lifting import FactorFamily, LiftedOperator, ModelCollection, eval_product, full_model, probe_rng
from .tensor_core import class_distance, is_nondegenerate, lp_norm, root_p, segre_embed

__all__ = [
    "FitSettings",
    "FitResult",
    "ExperimentConfig",
    "StabilityReport",
    "stability_bound",
    "first_stage_bound",
    "fit_factors",
    "unit_noise",
    "run_recovery_experiment",
]


def first_stage_bound(gamma: float, sigma_min: float, delta: float, eta: float) -> float:
    """Bound on ``|P(h*) - P(hbar)|`` in the Frobenius norm."""
    if not sigma_min > 0:
        raise ValueError("sigma_min must be positive")
    return gamma / sigma_min * (delta + eta)


def stability_bound(gamma: float, sigma_min: float, K: int, S: int, p, pinf_hbar: float,
                    pinf_hstar: float, delta: float, eta: float) -> float:
    """Bound on the class distance ``d_p(<h*>, <hbar>)``.

    ``pinf_*`` are the sup-norms of the two rank-one tensors.
    """
    scale = min(pinf_hbar ** (1.0 / K - 1.0), pinf_hstar ** (1.0 / K - 1.0))
    return 7.0 * root_p(K * S, p) * first_stage_bound(gamma, sigma_min, delta, eta) * scale


@dataclass(frozen=True)
class FitSettings:
    max_iters: int = 200
    restarts: int = 3
    tol: float = 1e-12


@dataclass(frozen=True)
class FitResult:
    h: np.ndarray
    eta: float
    history: tuple[float, ...]
    non_decreasing: bool = False
    """Set when a sweep increased the residual; happens only through projection."""


def _block_design(f: FactorFamily, h: np.ndarray, k: int) -> np.ndarray:
    """Matrix ``B`` with ``vec(M_1(h_1)...M_k(x)...M_K(h_K)) = B @ x``."""
    left = np.eye(f.dims[0])
    for j in range(k):
        left = left @ f.factor(j, h[j])
    right = np.eye(f.dims[-1])
    for j in range(f.K - 1, k, -1):
        right = f.factor(j, h[j]) @ right
    basis = f.basis_factors(k)
    return np.einsum("ab,jbc,cd->adj", left, basis, right).reshape(f.m * f.n, f.S)


def _rebalance(h: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        return h
    mu = np.exp(np.mean(np.log(norms)))
    return h * (mu / norms)[:, None]


def fit_factors(f: FactorFamily, X, model: ModelCollection | None = None, L: int | None = None,
                settings: FitSettings = FitSettings(), seed: int = 0) -> FitResult:
    """Alternating least squares on the layers of ``f``.

    Each layer update solves its linear least-squares subproblem exactly
    (minimum-norm solution); a non-full model is enforced by projecting
    onto level ``L`` after every sweep.  The best of ``settings.restarts``
    Gaussian starts is returned.  No global optimality is claimed.
    """
    X = np.asarray(X, dtype=float)
    if X.shape != (f.m, f.n):
        raise DimensionMismatch(f"X has shape {X.shape}, expected {(f.m, f.n)}")
    if model is None:
        model = full_model(f.K, f.S)
    if L is None:
        L = model.levels[-1]
    x = X.reshape(-1)
    xn = float(np.linalg.norm(x))
    best = None
    for r in range(max(1, settings.restarts)):
        rng = probe_rng(seed, r)
        h = model.projector(L, rng.standard_normal((f.K, f.S))) if model.projector else rng.standard_normal((f.K, f.S))
        res = float(np.linalg.norm(eval_product(f, h) - X))
        history = [res]
        flagged = False
        for _ in range(settings.max_iters):
            for k in range(f.K):
                B = _block_design(f, h, k)
                h[k] = np.linalg.lstsq(B, x, rcond=None)[0]
            if model.projector is not None and model.name != "full":
                h = model.projector(L, h)
            h = _rebalance(h)
            new = float(np.linalg.norm(eval_product(f, h) - X))
            if new > history[-1] * (1 + 1e-9) + 1e-14 * xn:
                flagged = True
            history.append(new)
            if new <= settings.tol * xn or history[-2] - new <= settings.tol * max(history[-2], 1e-300):
                break
        fit = FitResult(h=h, eta=history[-1], history=tuple(history), non_decreasing=flagged)
        if best is None or fit.eta < best.eta:
            best = fit
        if best.eta <= settings.tol * xn:
            break
    return best


def unit_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Gaussian matrix scaled to unit Frobenius norm."""
    e = rng.standard_normal(shape)
    return e / np.linalg.norm(e)


@dataclass(frozen=True)
class ExperimentConfig:
    family: FactorFamily
    delta: float
    seed: int
    model: ModelCollection | None = None
    L: int | None = None
    p: float = 2.0
    eta_target: float = 0.0
    settings: FitSettings = field(default_factory=FitSettings)

    def __post_init__(self):
        if self.delta < 0 or self.eta_target < 0:
            raise ValueError("delta and eta_target must be nonnegative")


@dataclass(frozen=True)
class StabilityReport:
    seed: int
    delta: float
    eta: float
    d_p: float
    bound: float
    first_stage_lhs: float
    first_stage_bound: float
    precond_rho: bool
    precond_snr: bool
    holds: bool | None
    sigma_min: float
    gamma: float
    gamma_exact: bool

    @property
    def preconditions_met(self) -> bool:
        return self.precond_rho and self.precond_snr

    def as_row(self) -> dict:
        return {
            "seed": self.seed,
            "delta": self.delta,
            "eta": self.eta,
            "d_p": self.d_p,
            "bound": self.bound,
            "precond_met": self.preconditions_met,
            "holds": "n/a" if self.holds is None else self.holds,
        }


def run_recovery_experiment(cfg: ExperimentConfig, op: LiftedOperator,
                            nsp: NspEstimate | None = None) -> StabilityReport:
    """Plant parameters, add noise of norm ``delta``, refit and compare to the bound.

    With a trivial kernel the constant ``gamma = 1`` (``rho = inf``) is
    exact.  Otherwise ``nsp`` supplies a sampled lower bound on ``gamma``, so
    ``holds`` is only a necessary check in that case.
    """
    f = cfg.family
    model = cfg.model or full_model(f.K, f.S)
    L = model.levels[-1] if cfg.L is None else cfg.L
    if op.kernel_dim == 0:
        gamma, rho, exact = 1.0, math.inf, True
    elif nsp is not None:
        gamma, rho, exact = nsp.gamma_hat, nsp.rho, False
    else:
        raise ValueError("a nontrivial kernel needs an NspEstimate for gamma and rho")

    rng = probe_rng(cfg.seed, 0)
    hbar = model.sampler(L, rng)
    X = eval_product(f, hbar) + cfg.delta * unit_noise((f.m, f.n), rng)
    fit = fit_factors(f, X, model, L, cfg.settings, seed=cfg.seed + 1)
    eta = fit.eta
    hstar = fit.h

    Pbar, Pstar = segre_embed(hbar), segre_embed(hstar)
    fs_lhs = float(np.linalg.norm(Pstar - Pbar))
    fs_bound = first_stage_bound(gamma, op.sigma_min, cfg.delta, eta) if op.sigma_min > 0 else math.inf
    pre_rho = cfg.delta + eta <= rho
    nb, ns = lp_norm(Pbar, np.inf), lp_norm(Pstar, np.inf)
    usable = is_nondegenerate(hbar) and is_nondegenerate(hstar)
    pre_snr = usable and fs_bound <= 0.5 * max(nb, ns)
    if usable:
        d_p = class_distance(hstar, hbar, cfg.p)
        bound = stability_bound(gamma, op.sigma_min, f.K, f.S, cfg.p, nb, ns, cfg.delta, eta)
    else:
        d_p, bound = math.nan, math.nan
    holds = (d_p <= bound) if (pre_rho and pre_snr) else None
    return StabilityReport(cfg.seed, cfg.delta, eta, d_p, bound, fs_lhs, fs_bound, pre_rho, pre_snr,
                           holds, op.sigma_min, gamma, exact)
