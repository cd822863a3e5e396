"""Sampling-based probing of the deep null space property.

For a model difference ``T`` the smallest constant with
``|T| <= gamma |T - T'|`` for every kernel element ``T'`` is
``|T| / |T - proj_ker T|``.  :func:`estimate_gamma` takes the supremum of
that ratio over sampled differences with ``|A T| <= rho``; the result is a
lower bound on the true constant.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ZeroTensor
from .lifting import LiftedOperator, ModelCollection, probe_rng
from .tensor_core import segre_embed

__all__ = [
    "NspEstimate",
    "gamma_of_tensor",
    "estimate_gamma",
    "default_rho",
    "derive_nsp_from_stability",
]

_INF_RTOL = 1e-12


@dataclass(frozen=True)
class NspEstimate:
    gamma_hat: float
    rho: float
    n_samples: int
    worst_T: np.ndarray | None
    failed: bool
    n_discarded: int = 0
    rho_is_default: bool = False

    def as_row(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat,
            "rho": self.rho,
            "n_samples": self.n_samples,
            "n_discarded": self.n_discarded,
            "failed": self.failed,
        }


def gamma_of_tensor(op: LiftedOperator, T) -> float:
    t = np.asarray(T, dtype=float).reshape(-1)
    tn = float(np.linalg.norm(t))
    if tn == 0.0:
        raise ZeroTensor("gamma is undefined for the zero tensor")
    rest = float(np.linalg.norm(t - op.project_kernel(t)))
    if rest <= _INF_RTOL * tn:
        return math.inf
    return tn / rest


def _levels(model: ModelCollection, levels: Sequence[int] | None) -> tuple[int, ...]:
    return tuple(model.levels if levels is None else levels)


def _draw(model: ModelCollection, levels: tuple[int, ...], seed: int, index: int) -> np.ndarray:
    rng = probe_rng(seed, index)
    L = levels[index % len(levels)]
    Lp = levels[(index // len(levels)) % len(levels)]
    return segre_embed(model.sampler(L, rng)) - segre_embed(model.sampler(Lp, rng))


def default_rho(op: LiftedOperator, model: ModelCollection, seed: int = 0, pilot: int = 32,
                levels: Sequence[int] | None = None) -> float:
    """``sigma_min`` times the median norm of a pilot batch of model differences."""
    lv = _levels(model, levels)
    norms = [np.linalg.norm(_draw(model, lv, seed + 1_000_003, i)) for i in range(pilot)]
    med = float(np.median(norms))
    return op.sigma_min * med if op.sigma_min > 0 and med > 0 else 1.0


def estimate_gamma(op: LiftedOperator, model: ModelCollection, rho: float | None, n_samples: int,
                   seed: int = 0, levels: Sequence[int] | None = None,
                   extra_pairs: Iterable[tuple[np.ndarray, np.ndarray]] = (),
                   workers: int = 1) -> NspEstimate:
    """Largest per-sample constant over ``n_samples`` random model differences.

    Sample ``i`` draws its levels by cycling through ``levels`` and uses its
    own generator, so the estimate does not depend on ``workers``.
    Differences outside the ``|A T| <= rho`` ball are scaled into it when
    the model is closed under scaling and discarded otherwise.
    ``extra_pairs`` are stack pairs ``(h, g)`` evaluated in addition.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rho_default = rho is None
    if rho is None:
        rho = default_rho(op, model, seed, levels=levels)
    if not rho > 0:
        raise ValueError("rho must be positive")
    lv = _levels(model, levels)

    def one(i):
        return _draw(model, lv, seed, i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, range(n_samples)))
    else:
        samples = [one(i) for i in range(n_samples)]
    samples += [segre_embed(h) - segre_embed(g) for h, g in extra_pairs]

    gamma_hat = 1.0
    worst = None
    failed = False
    discarded = 0
    counted = 0
    for T in samples:
        tn = float(np.linalg.norm(T))
        if tn == 0.0:
            continue
        an = float(np.linalg.norm(op.apply(T)))
        if an > rho:
            if not model.scale_closed:
                discarded += 1
                continue
            T = T * (rho / an)
        counted += 1
        gam = gamma_of_tensor(op, T)
        if math.isinf(gam):
            failed = True
        if worst is None or gam > gamma_hat:
            gamma_hat = max(gamma_hat, gam)
            worst = T
    return NspEstimate(gamma_hat=gamma_hat, rho=float(rho), n_samples=counted, worst_T=worst,
                       failed=failed, n_discarded=discarded, rho_is_default=rho_default)


def derive_nsp_from_stability(C: float, delta: float, K: int, S: int, sigma_max: float) -> tuple[float, float]:
    """NSP constants implied by a stability property with constant ``C`` at noise level ``delta``."""
    if not (C > 0 and delta > 0 and sigma_max > 0):
        raise ValueError("C, delta and sigma_max must be positive")
    return C * S ** ((K - 1) / 2) * math.sqrt(K) * sigma_max, float(delta)
