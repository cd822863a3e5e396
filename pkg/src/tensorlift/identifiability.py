"""Noise-free identifiability: minimizer characterization, rank thresholds, witness search."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .lifting import FactorFamily, LiftedOperator, ModelCollection, probe_rng
from .tensor_core import (
    as_params,
    class_distance,
    is_nondegenerate,
    lp_norm,
    segre_embed,
)

__all__ = [
    "Status",
    "Witness",
    "IdentifiabilityVerdict",
    "check_minimizer_characterization",
    "segre_dimension",
    "join_dimension_bound",
    "dimension_verdict",
    "default_separation",
    "search_nonidentifiability_witness",
]

_ZERO_RTOL = 1e-12


class Status(str, enum.Enum):
    GENERICALLY_IDENTIFIABLE = "GenericallyIdentifiable"
    NOT_IDENTIFIABLE = "NotIdentifiable"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class Witness:
    """Two stacks in distinct classes whose products coincide."""

    h: np.ndarray
    g: np.ndarray
    residual: float
    distance: float


@dataclass(frozen=True)
class IdentifiabilityVerdict:
    status: Status
    rank_A: int
    threshold_used: int
    d_max: int
    join_bound: int
    model_linear_dim: int | None = None
    witness: Witness | None = None

    def as_row(self) -> dict:
        return {
            "status": self.status.value,
            "rank_A": self.rank_A,
            "threshold_used": self.threshold_used,
            "d_max": self.d_max,
            "join_bound": self.join_bound,
            "model_linear_dim": "" if self.model_linear_dim is None else self.model_linear_dim,
        }


def _kernel_offset(op: LiftedOperator, D: np.ndarray) -> float:
    flat = D.reshape(-1)
    return float(np.linalg.norm(flat - op.project_kernel(flat)))


def check_minimizer_characterization(op: LiftedOperator, hstar, hbar, rtol: float = 1e-9) -> bool:
    """True iff ``P(hstar) - P(hbar)`` lies in the kernel of ``op``.

    A difference below ``1e-12`` of the tensors' own size counts as zero,
    since stacks in the same class only agree up to rounding.
    """
    a = as_params(hstar, K=op.K, S=op.S)
    b = as_params(hbar, K=op.K, S=op.S)
    Pa, Pb = segre_embed(a), segre_embed(b)
    D = Pa - Pb
    dn = float(np.linalg.norm(D))
    if dn <= _ZERO_RTOL * max(np.linalg.norm(Pa), np.linalg.norm(Pb)) or dn == 0.0:
        return True
    return _kernel_offset(op, D) <= rtol * dn


def segre_dimension(K: int, S: int) -> int:
    """Dimension of the nonzero rank-one tensors."""
    return K * (S - 1) + 1


def join_dimension_bound(K: int, S: int) -> int:
    """Dimension of the smooth part of the rank-two tensors."""
    if K == 1:
        return S
    if K == 2:
        return 4 * (S - 1)
    return 2 * K * (S - 1) + 2


def dimension_verdict(op, K: int | None = None, S: int | None = None,
                      model_linear_dim: int | None = None, d_max: int | None = None) -> IdentifiabilityVerdict:
    """Rank-based verdict for the full parameter space (or a model of dimension ``d_max``).

    ``op`` is a :class:`LiftedOperator` or an integer rank.  A rank of at
    least ``2 * d_max`` means identifiable for almost every operator of
    that rank; it does not certify a given structured operator.  When the
    models contain linear spaces of dimension ``model_linear_dim`` and twice
    that exceeds the rank, the model is not identifiable.
    """
    if isinstance(op, LiftedOperator):
        rank = op.rank
        K = op.K if K is None else K
        S = op.S if S is None else S
    else:
        rank = int(op)
    if K is None or S is None:
        raise ValueError("K and S are required when op is a bare rank")
    dm = segre_dimension(K, S) if d_max is None else int(d_max)
    threshold = 2 * dm
    if model_linear_dim is not None and 2 * int(model_linear_dim) > rank:
        status = Status.NOT_IDENTIFIABLE
    elif rank >= threshold:
        status = Status.GENERICALLY_IDENTIFIABLE
    else:
        status = Status.INCONCLUSIVE
    return IdentifiabilityVerdict(status, rank, threshold, dm, join_dimension_bound(K, S), model_linear_dim)


def default_separation(h) -> float:
    return 0.1 * lp_norm(segre_embed(h), np.inf) ** (1.0 / np.shape(h)[0])


def _accept(op: LiftedOperator, h, g, sep: float | None, rtol: float) -> Witness | None:
    if not (is_nondegenerate(h) and is_nondegenerate(g)):
        return None
    D = segre_embed(h) - segre_embed(g)
    dn = float(np.linalg.norm(D))
    if dn == 0.0:
        return None
    off = _kernel_offset(op, D)
    if off > rtol * dn:
        return None
    dist = class_distance(h, g, 2)
    if dist < (default_separation(h) if sep is None else sep):
        return None
    return Witness(h=np.asarray(h, float), g=np.asarray(g, float), residual=off / dn, distance=dist)


def _negated(h: np.ndarray) -> np.ndarray:
    g = np.array(h, dtype=float)
    g[0] = -g[0]
    return g


def _indicator_witness(op: LiftedOperator, sep, rtol) -> Witness | None:
    """Exact search among pairs of basis tensors.

    Equal columns give ``A P(h^i) = A P(h^j)``; a zero column gives a basis
    tensor in the kernel, paired with its negation.
    """
    A = op.matrix
    scale = op.sigma_max if op.sigma_max > 0 else 1.0
    norms = np.linalg.norm(A, axis=0)
    shape = op.tensor_shape
    for i in np.flatnonzero(norms <= 1e-12 * scale):
        h = np.zeros((op.K, op.S))
        h[np.arange(op.K), np.unravel_index(i, shape)] = 1.0
        w = _accept(op, h, _negated(h), sep, rtol)
        if w is not None:
            return w
    keys = {}
    rounded = np.round(A / scale, 12)
    for i in range(A.shape[1]):
        key = rounded[:, i].tobytes()
        if key in keys:
            j = keys[key]
            h = np.zeros((op.K, op.S))
            g = np.zeros((op.K, op.S))
            h[np.arange(op.K), np.unravel_index(j, shape)] = 1.0
            g[np.arange(op.K), np.unravel_index(i, shape)] = 1.0
            w = _accept(op, h, g, sep, rtol)
            if w is not None:
                return w
        else:
            keys[key] = i
    return None


def _rank2_als(T: np.ndarray, h: np.ndarray, g: np.ndarray, sweeps: int = 1):
    """Improve ``P(h) - P(g) ~ T`` by exact block updates of ``(h_k, g_k)``."""
    K, S = h.shape
    for _ in range(sweeps):
        for k in range(K):
            # contract T and the other rows; each update is a 2x2 linear solve per entry
            others = [j for j in range(K) if j != k]
            gram = np.empty((2, 2))
            wh = np.prod([h[j] @ h[j] for j in others]) if others else 1.0
            wg = np.prod([g[j] @ g[j] for j in others]) if others else 1.0
            wx = np.prod([h[j] @ g[j] for j in others]) if others else 1.0
            gram[:] = [[wh, -wx], [-wx, wg]]
            Th = np.moveaxis(T, k, 0).reshape(S, -1)
            uh = _outer_rest(h, others)
            ug = _outer_rest(g, others)
            rhs = np.stack([Th @ uh, -(Th @ ug)], axis=0)
            sol = np.linalg.lstsq(gram, rhs, rcond=None)[0]
            h[k], g[k] = sol[0], sol[1]
    return h, g


def _outer_rest(h: np.ndarray, others: list[int]) -> np.ndarray:
    if not others:
        return np.ones(1)
    out = h[others[0]]
    for j in others[1:]:
        out = np.multiply.outer(out, h[j])
    return np.ravel(out)


def _als_start(op: LiftedOperator, rng: np.random.Generator, sep, rtol, iters: int) -> Witness | None:
    K, S = op.K, op.S
    h = rng.standard_normal((K, S))
    g = rng.standard_normal((K, S))
    for _ in range(iters):
        D = segre_embed(h) - segre_embed(g)
        T = op.project_kernel(D)
        tn = np.linalg.norm(T)
        if tn == 0.0:
            return None
        T /= tn
        h, g = _rank2_als(T, h, g)
        w = _accept(op, h, g, sep, rtol)
        if w is not None:
            return w
        # the rank-two fit collapsed onto one term: that term alone lies near the kernel
        for a in (h, g):
            if is_nondegenerate(a):
                w = _accept(op, a, _negated(a), sep, rtol)
                if w is not None:
                    return w
    return None


def search_nonidentifiability_witness(f: FactorFamily | None, op: LiftedOperator, model: ModelCollection | None = None,
                                      trials: int = 8, seed: int = 0, sep: float | None = None,
                                      rtol: float = 1e-9, iters: int = 200) -> Witness | None:
    """Look for two distinct classes whose lifted difference lies in the kernel.

    Exact basis-tensor pairs are tried first, then ``trials`` Gaussian
    restarts alternate between projecting ``P(h) - P(g)`` onto the kernel
    and refitting a rank-two difference to it.  A returned witness
    disproves identifiability of the full space; ``None`` proves nothing.
    ``model`` restricts accepted witnesses to its members when given.
    """
    del f  # the operator already encodes the family
    if trials <= 0 or op.kernel_dim == 0:
        return None

    def admissible(w):
        if w is None or model is None:
            return w
        ok_h = any(model.membership(L, w.h) for L in model.levels)
        ok_g = any(model.membership(L, w.g) for L in model.levels)
        return w if ok_h and ok_g else None

    w = admissible(_indicator_witness(op, sep, rtol))
    if w is not None:
        return w
    for t in range(trials):
        w = admissible(_als_start(op, probe_rng(seed, t), sep, rtol, iters))
        if w is not None:
            return w
    return None
