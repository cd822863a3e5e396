"""Rank-one tensors, the Segre embedding and the quotient metric on parameter classes.

Parameter stacks are plain ``(K, S)`` float arrays: row ``k`` holds the
parameters of layer ``k``.  Order-``K`` tensors are ``numpy`` arrays of
shape ``(S,) * K``; their flat storage is row-major, so multi-index
``(i_1, ..., i_K)`` sits at ``np.ravel_multi_index(i, (S,) * K)``.

Two stacks are equivalent when one is obtained from the other by per-row
scalings whose product is one.  Each class meets the set of stacks whose
rows share a common sup-norm in exactly ``2**(K-1)`` points, which is what
makes :func:`class_distance` computable by enumeration.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateParams, DimensionMismatch

__all__ = [
    "as_params",
    "is_nondegenerate",
    "segre_embed",
    "DiagNormalized",
    "normalize_to_diag",
    "sign_patterns",
    "class_distance",
    "BoundCheck",
    "check_rk1_stability_bound",
    "check_plip_bound",
    "segre_jacobian",
    "segre_jacobian_rank",
    "lp_norm",
    "root_p",
]


def as_params(h, K: int | None = None, S: int | None = None) -> np.ndarray:
    """Coerce ``h`` to a 2-d float stack and check its shape."""
    arr = np.asarray(h, dtype=float)
    if arr.ndim != 2:
        raise DimensionMismatch(f"parameter stack must be 2-d (K, S), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise DimensionMismatch("parameter stack needs at least one layer")
    if K is not None and arr.shape[0] != K:
        raise DimensionMismatch(f"expected K={K} layers, got {arr.shape[0]}")
    if S is not None and arr.shape[1] != S:
        raise DimensionMismatch(f"expected S={S} parameters per layer, got {arr.shape[1]}")
    return arr


def is_nondegenerate(h) -> bool:
    arr = as_params(h)
    return bool(np.all(np.any(arr != 0.0, axis=1)))


def _require_nondegenerate(h, name: str = "h") -> np.ndarray:
    arr = as_params(h)
    zero_rows = np.flatnonzero(~np.any(arr != 0.0, axis=1))
    if zero_rows.size:
        raise DegenerateParams(f"{name} has zero row(s) {zero_rows.tolist()}")
    return arr


def lp_norm(x, p) -> float:
    """Entrywise ``p``-norm of an array of any shape (``p`` may be ``inf``)."""
    return float(np.linalg.norm(np.ravel(x), ord=float(p)))


def root_p(x: float, p) -> float:
    """``x ** (1/p)`` with the convention ``x ** (1/inf) = 1``."""
    p = float(p)
    if np.isinf(p):
        return 1.0
    return float(x) ** (1.0 / p)


def segre_embed(h) -> np.ndarray:
    """Outer product of the rows of ``h``: ``T[i] = prod_k h[k, i_k]``."""
    arr = as_params(h)
    out = arr[0]
    for row in arr[1:]:
        out = np.multiply.outer(out, row)
    return np.array(out, dtype=float)


@lru_cache(maxsize=None)
def sign_patterns(K: int) -> np.ndarray:
    """All sign vectors in ``{-1, 1}**K`` whose product is ``+1`` (shape ``(2**(K-1), K)``)."""
    rows = []
    for head in itertools.product((1.0, -1.0), repeat=K - 1):
        last = float(np.prod(head)) if head else 1.0
        rows.append((*head, last))
    out = np.array(rows, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiagNormalized:
    """The finite set of representatives of a class with equal row sup-norms.

    ``canonical`` is the representative obtained by positive rescaling only;
    ``reps`` stacks all ``2**(K-1)`` sign variants, ``reps[0]`` being
    ``canonical``.
    """

    canonical: np.ndarray
    reps: np.ndarray

    @property
    def any_rep(self) -> np.ndarray:
        return self.canonical

    def __len__(self) -> int:
        return self.reps.shape[0]


def _canonical(arr: np.ndarray) -> np.ndarray:
    row_inf = np.max(np.abs(arr), axis=1)
    # geometric mean in log space, so that large K does not overflow
    mu = np.exp(np.mean(np.log(row_inf)))
    return arr * (mu / row_inf)[:, None]


def normalize_to_diag(h) -> DiagNormalized:
    arr = _require_nondegenerate(h)
    canon = _canonical(arr)
    reps = sign_patterns(arr.shape[0])[:, :, None] * canon[None, :, :]
    return DiagNormalized(canonical=canon, reps=reps)


def class_distance(h, g, p=2) -> float:
    """Quotient distance between the classes of ``h`` and ``g``.

    Only the sign variants of ``g`` are enumerated: flipping the signs of
    both representatives by the same admissible pattern leaves every
    entrywise difference unchanged, so one side can stay fixed.
    """
    a = _require_nondegenerate(h, "h")
    b = _require_nondegenerate(g, "g")
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    ha = _canonical(a)
    reps = normalize_to_diag(b).reps
    diffs = (reps - ha[None]).reshape(reps.shape[0], -1)
    return float(np.min(np.linalg.norm(diffs, ord=float(p), axis=1)))


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool | None
    precondition_met: bool = True


# relative slack for rounding: at K = 1 the Lipschitz bound is an equality
BOUND_RTOL = 1e-12


def _within(lhs: float, rhs: float, rtol: float) -> bool:
    return lhs <= rhs * (1.0 + rtol)


def check_rk1_stability_bound(h, g, p=2, q=2, rtol: float = BOUND_RTOL) -> BoundCheck:
    """Check that close rank-one tensors have close parameter classes.

    The bound ``d_p <= 7 (KS)^(1/p) min(|P h|_inf, |P g|_inf)^(1/K - 1) |P h - P g|_q``
    only applies when ``|P g - P h|_inf <= max(|P h|_inf, |P g|_inf) / 2``;
    otherwise ``holds`` is ``None``.
    """
    a = _require_nondegenerate(h, "h")
    b = _require_nondegenerate(g, "g")
    K, S = a.shape
    Ph, Pg = segre_embed(a), segre_embed(b)
    nh, ng = lp_norm(Ph, np.inf), lp_norm(Pg, np.inf)
    diff = Ph - Pg
    met = lp_norm(diff, np.inf) <= 0.5 * max(nh, ng)
    lhs = class_distance(a, b, p)
    scale = min(nh ** (1.0 / K - 1.0), ng ** (1.0 / K - 1.0))
    rhs = 7.0 * root_p(K * S, p) * scale * lp_norm(diff, q)
    return BoundCheck(lhs=lhs, rhs=rhs, holds=_within(lhs, rhs, rtol) if met else None, precondition_met=met)


def check_plip_bound(h, g, q=2, rtol: float = BOUND_RTOL) -> BoundCheck:
    """Check the Lipschitz-type upper bound on ``|P(h) - P(g)|_q``."""
    a = _require_nondegenerate(h, "h")
    b = _require_nondegenerate(g, "g")
    K, S = a.shape
    Ph, Pg = segre_embed(a), segre_embed(b)
    lhs = lp_norm(Ph - Pg, q)
    growth = max(lp_norm(Ph, np.inf), lp_norm(Pg, np.inf)) ** (1.0 - 1.0 / K)
    qf = float(q)
    s_factor = 1.0 if np.isinf(qf) else S ** ((K - 1) / qf)
    k_factor = float(K) if np.isinf(qf) else K ** (1.0 - 1.0 / qf)
    rhs = s_factor * k_factor * growth * class_distance(a, b, q)
    return BoundCheck(lhs=lhs, rhs=rhs, holds=_within(lhs, rhs, rtol))


def segre_jacobian(h) -> np.ndarray:
    """Jacobian of :func:`segre_embed` at ``h`` as an ``(S**K, K*S)`` matrix.

    Column ``k*S + j`` is the derivative with respect to ``h[k, j]``.
    """
    arr = as_params(h)
    K, S = arr.shape
    cols = []
    for k in range(K):
        for j in range(S):
            e = arr.copy()
            e[k] = 0.0
            e[k, j] = 1.0
            cols.append(segre_embed(e).ravel())
    return np.stack(cols, axis=1)


def segre_jacobian_rank(h, tol: float = 1e-10) -> int:
    arr = _require_nondegenerate(h)
    s = np.linalg.svd(segre_jacobian(arr), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))
