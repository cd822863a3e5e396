"""Factor families, their products, and the lifted linear operator.

A :class:`FactorFamily` describes ``K`` linear maps ``M_k`` from ``R^S`` to
``m_k x m_{k+1}`` matrices through sparse placement rules.  The product
``M_1(h_1) ... M_K(h_K)`` is a linear function of the rank-one tensor
``segre_embed(h)``; :func:`materialize_lifting` builds that linear map as a
dense ``(m*n, S**K)`` matrix.  Matrices are vectorized in row-major order
throughout.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetExceeded, DimensionMismatch
from .tensor_core import as_params, segre_embed

__all__ = [
    "DEFAULT_BUDGET",
    "DEFAULT_RANK_TOL",
    "FactorFamily",
    "LiftedOperator",
    "ModelCollection",
    "full_model",
    "row_sparse_model",
    "eval_product",
    "materialize_lifting",
    "estimate_rank_random",
    "solve_lifted_least_squares",
    "TwoStageReport",
    "check_two_stage_equivalence",
    "indicator_stack",
    "probe_rng",
    "resolve_budget",
    "numerical_rank",
]

DEFAULT_BUDGET = 10**8
DEFAULT_RANK_TOL = 1e-10


def resolve_budget(budget: int | None = None) -> int:
    """Explicit budget, else ``$TENSORLIFT_BUDGET``, else :data:`DEFAULT_BUDGET`."""
    if budget is not None:
        return int(budget)
    env = os.environ.get("TENSORLIFT_BUDGET")
    if env:
        return int(float(env))
    return DEFAULT_BUDGET


def probe_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for probe ``index`` of a run seeded with ``seed``.

    Streams depend only on ``(seed, index)``, never on execution order.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def numerical_rank(s: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol * s.max()``."""
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


@dataclass(frozen=True)
class FactorFamily:
    """``K`` linear maps ``M_k: R^S -> R^{m_k x m_{k+1}}`` given by placements.

    ``placements[k]`` is an integer/float record array with columns
    ``row, col, param, coef`` meaning ``M_k(h)[row, col] += coef * h[param]``.
    """

    K: int
    S: int
    dims: tuple[int, ...]
    placements: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if self.K < 1 or self.S < 1:
            raise DimensionMismatch("K and S must be positive")
        if len(dims) != self.K + 1:
            raise DimensionMismatch(f"need K+1={self.K + 1} dims, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise DimensionMismatch("all dims must be positive")
        if len(self.placements) != self.K:
            raise DimensionMismatch(f"need {self.K} placement lists, got {len(self.placements)}")
        fixed = []
        for k, pl in enumerate(self.placements):
            arr = np.asarray(pl, dtype=float).reshape(-1, 4)
            rows, cols, params = arr[:, 0], arr[:, 1], arr[:, 2]
            for name, vals, bound in (("row", rows, dims[k]), ("col", cols, dims[k + 1]), ("param", params, self.S)):
                if vals.size and (np.any(vals < 0) or np.any(vals >= bound) or np.any(vals != np.round(vals))):
                    raise DimensionMismatch(f"layer {k + 1}: {name} index out of range [0, {bound})")
            arr.setflags(write=False)
            fixed.append(arr)
        object.__setattr__(self, "placements", tuple(fixed))

    @property
    def m(self) -> int:
        return self.dims[0]

    @property
    def n(self) -> int:
        return self.dims[-1]

    def factor(self, k: int, hk) -> np.ndarray:
        """Dense ``M_k(hk)`` for zero-based layer ``k``."""
        hk = np.asarray(hk, dtype=float)
        pl = self.placements[k]
        out = np.zeros((self.dims[k], self.dims[k + 1]))
        if pl.size:
            idx = pl[:, :3].astype(np.intp)
            np.add.at(out, (idx[:, 0], idx[:, 1]), pl[:, 3] * hk[idx[:, 2]])
        return out

    def basis_factors(self, k: int) -> np.ndarray:
        """``M_k(e_j)`` for every canonical basis vector, shape ``(S, m_k, m_{k+1})``."""
        pl = self.placements[k]
        out = np.zeros((self.S, self.dims[k], self.dims[k + 1]))
        if pl.size:
            idx = pl[:, :3].astype(np.intp)
            np.add.at(out, (idx[:, 2], idx[:, 0], idx[:, 1]), pl[:, 3])
        return out

    def to_dict(self) -> dict:
        layers = []
        for pl in self.placements:
            layers.append([[int(r), int(c), int(p), _num(v)] for r, c, p, v in pl])
        return {"K": self.K, "S": self.S, "dims": list(self.dims), "placements": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "FactorFamily":
        missing = [key for key in ("K", "S", "dims", "placements") if key not in doc]
        if missing:
            raise KeyError(f"factor family is missing field(s): {', '.join(missing)}")
        return cls(
            K=int(doc["K"]),
            S=int(doc["S"]),
            dims=tuple(doc["dims"]),
            placements=tuple(np.asarray(layer, dtype=float).reshape(-1, 4) for layer in doc["placements"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FactorFamily":
        return cls.from_dict(json.loads(text))

    @classmethod
    def diagonal(cls, S: int, K: int = 2) -> "FactorFamily":
        """Every ``M_k(h) = diag(h)``."""
        diag = np.array([[i, i, i, 1.0] for i in range(S)])
        return cls(K=K, S=S, dims=(S,) * (K + 1), placements=(diag,) * K)

    @classmethod
    def identity(cls, S: int) -> "FactorFamily":
        """``K = 1``, ``M_1(h) = h`` as an ``S x 1`` column."""
        col = np.array([[i, 0, i, 1.0] for i in range(S)])
        return cls(K=1, S=S, dims=(S, 1), placements=(col,))

    @classmethod
    def random(cls, K: int, S: int, dims: Sequence[int], rng: np.random.Generator,
               density: float = 0.5, integer: bool = True) -> "FactorFamily":
        """Random placements; each (row, col, param) slot is used with probability ``density``."""
        layers = []
        for k in range(K):
            slots = [(r, c, p) for r in range(dims[k]) for c in range(dims[k + 1]) for p in range(S)]
            keep = rng.random(len(slots)) < density
            coefs = rng.integers(-2, 3, size=len(slots)).astype(float) if integer else rng.standard_normal(len(slots))
            layer = [(r, c, p, v) for (r, c, p), use, v in zip(slots, keep, coefs) if use and v != 0]
            layers.append(np.array(layer, dtype=float).reshape(-1, 4))
        return cls(K=K, S=S, dims=tuple(dims), placements=tuple(layers))


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def _check_params(f: FactorFamily, h) -> np.ndarray:
    return as_params(h, K=f.K, S=f.S)


def eval_product(f: FactorFamily, h) -> np.ndarray:
    """``M_1(h_1) M_2(h_2) ... M_K(h_K)`` multiplied left to right."""
    arr = _check_params(f, h)
    out = f.factor(0, arr[0])
    for k in range(1, f.K):
        out = out @ f.factor(k, arr[k])
    return out


def indicator_stack(index: Sequence[int], S: int) -> np.ndarray:
    """One-hot stack whose Segre image is the canonical basis tensor at ``index``."""
    h = np.zeros((len(index), S))
    h[np.arange(len(index)), list(index)] = 1.0
    return h


@dataclass(frozen=True, eq=False)
class LiftedOperator:
    """Dense lifted operator together with its SVD-derived data.

    ``matrix`` has shape ``(m*n, S**K)``; column ``i`` is the vectorized
    product obtained from the indicator stack of multi-index ``i``.
    """

    matrix: np.ndarray
    K: int
    S: int
    m: int
    n: int
    rank: int
    sigma_max: float
    sigma_min: float
    kernel_basis: np.ndarray
    tol: float = DEFAULT_RANK_TOL
    _u: np.ndarray = field(default=None, repr=False)
    _s: np.ndarray = field(default=None, repr=False)
    _vt: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, K: int, S: int, m: int, n: int,
                    tol: float = DEFAULT_RANK_TOL) -> "LiftedOperator":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (m * n, S**K):
            raise DimensionMismatch(f"matrix shape {matrix.shape} != {(m * n, S**K)}")
        u, s, vt = np.linalg.svd(matrix, full_matrices=True)
        r = numerical_rank(s, tol)
        sigma_max = float(s[0]) if s.size else 0.0
        sigma_min = float(s[r - 1]) if r else 0.0
        kernel = vt[r:].T.copy()
        for a in (matrix, kernel):
            a.setflags(write=False)
        return cls(matrix=matrix, K=K, S=S, m=m, n=n, rank=r, sigma_max=sigma_max,
                   sigma_min=sigma_min, kernel_basis=kernel, tol=tol,
                   _u=u[:, :r], _s=s[:r], _vt=vt[:r])

    @property
    def n_params(self) -> int:
        return self.S**self.K

    @property
    def kernel_dim(self) -> int:
        return self.kernel_basis.shape[1]

    @property
    def tensor_shape(self) -> tuple[int, ...]:
        return (self.S,) * self.K

    def apply(self, T) -> np.ndarray:
        """``A T`` as an ``m x n`` matrix."""
        t = np.asarray(T, dtype=float).reshape(-1)
        if t.size != self.n_params:
            raise DimensionMismatch(f"tensor has {t.size} entries, expected {self.n_params}")
        return (self.matrix @ t).reshape(self.m, self.n)

    def project_kernel(self, T) -> np.ndarray:
        """Orthogonal projection of ``T`` onto the kernel, same shape as ``T``."""
        t = np.asarray(T, dtype=float)
        flat = t.reshape(-1)
        kb = self.kernel_basis
        return (kb @ (kb.T @ flat)).reshape(t.shape)

    def pinv_apply(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float).reshape(-1)
        if x.size != self.m * self.n:
            raise DimensionMismatch(f"X has {x.size} entries, expected {self.m * self.n}")
        if self.rank == 0:
            return np.zeros(self.tensor_shape)
        return (self._vt.T @ ((self._u.T @ x) / self._s)).reshape(self.tensor_shape)


def materialize_lifting(f: FactorFamily, budget: int | None = None,
                        tol: float = DEFAULT_RANK_TOL) -> LiftedOperator:
    """Build the lifted operator of ``f`` column by column on basis tensors.

    Basis tensors are rank one, so column ``i`` is the product evaluated at
    the indicator stack of ``i``.  The products for all multi-indices are
    formed layer by layer: after layer ``k`` the partial products
    ``M_1(e_{i_1}) ... M_k(e_{i_k})`` are stored for every prefix.
    """
    limit = resolve_budget(budget)
    entries = f.m * f.n * f.S**f.K
    if entries > limit:
        raise BudgetExceeded(f"lifted operator needs {entries} entries, budget is {limit}")
    partial = f.basis_factors(0)
    for k in range(1, f.K):
        if partial.shape[0] * f.S * partial.shape[1] * f.dims[k + 1] > limit:
            raise BudgetExceeded(f"intermediate products at layer {k + 1} exceed budget {limit}")
        nxt = f.basis_factors(k)
        partial = np.einsum("iab,jbc->ijac", partial, nxt).reshape(-1, f.m, f.dims[k + 1])
    matrix = partial.reshape(f.S**f.K, f.m * f.n).T.copy()
    return LiftedOperator.from_matrix(matrix, f.K, f.S, f.m, f.n, tol=tol)


def estimate_rank_random(f: FactorFamily, R: int, seed: int = 0, tol: float = DEFAULT_RANK_TOL) -> int:
    """Rank of the span of ``R`` products at independent Gaussian parameters.

    With probability one this equals ``min(R, rank(A))``; the lifted operator
    itself is never formed.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    cols = [eval_product(f, probe_rng(seed, r).standard_normal((f.K, f.S))).reshape(-1) for r in range(R)]
    s = np.linalg.svd(np.stack(cols, axis=1), compute_uv=False)
    return numerical_rank(s, tol)


def solve_lifted_least_squares(op: LiftedOperator, X) -> np.ndarray:
    """Minimum-norm tensor minimizing ``|A T - X|``."""
    X = np.asarray(X, dtype=float)
    if X.shape != (op.m, op.n):
        raise DimensionMismatch(f"X has shape {X.shape}, expected {(op.m, op.n)}")
    return op.pinv_apply(X)


@dataclass(frozen=True)
class TwoStageReport:
    model_objective: float
    lifted_objective: float
    constant: float
    residual_ls: float
    rel_error: float
    holds: bool


def check_two_stage_equivalence(op: LiftedOperator, h, X, Tstar, rtol: float = 1e-8) -> TwoStageReport:
    """Check ``|A P(h) - X|^2 - |A(P(h) - T*)|^2 == |A T* - X|^2``.

    The right-hand side does not depend on ``h``, so minimizing either
    objective over the model gives the same minimizers.
    """
    X = np.asarray(X, dtype=float)
    Ph = segre_embed(as_params(h, K=op.K, S=op.S))
    T = np.asarray(Tstar, dtype=float).reshape(op.tensor_shape)
    model = float(np.sum((op.apply(Ph) - X) ** 2))
    lifted = float(np.sum(op.apply(Ph - T) ** 2))
    ls = float(np.sum((op.apply(T) - X) ** 2))
    constant = model - lifted
    scale = max(model, lifted, ls, np.finfo(float).tiny)
    err = abs(constant - ls) / scale
    return TwoStageReport(model, lifted, constant, ls, err, err <= rtol)


@dataclass(frozen=True)
class ModelCollection:
    """A family of parameter sets indexed by an integer level ``L``.

    ``scale_closed`` states that every level is closed under positive
    scaling of the whole stack; ``linear_dim(L)`` is the dimension of the
    largest linear space of tensors known to lie in ``P(Mod_L)``.
    """

    name: str
    K: int
    S: int
    levels: tuple[int, ...]
    membership: Callable[[int, np.ndarray], bool]
    sampler: Callable[[int, np.random.Generator], np.ndarray]
    projector: Callable[[int, np.ndarray], np.ndarray] | None = None
    linear_dim: Callable[[int], int] | None = None
    scale_closed: bool = True

    def max_linear_dim(self) -> int | None:
        if self.linear_dim is None:
            return None
        return max(self.linear_dim(L) for L in self.levels)


def full_model(K: int, S: int) -> ModelCollection:
    """Every level is the whole parameter space."""
    return ModelCollection(
        name="full",
        K=K,
        S=S,
        levels=(S,),
        membership=lambda L, h: np.shape(h) == (K, S),
        sampler=lambda L, rng: rng.standard_normal((K, S)),
        projector=lambda L, h: np.asarray(h, dtype=float),
        # fixing all rows but one sweeps an S-dimensional space of rank-one tensors
        linear_dim=lambda L: S,
    )


def _keep_largest(L: int, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    if L <= 0:
        return out
    idx = np.argsort(-np.abs(h), axis=1, kind="stable")[:, :L]
    rows = np.arange(h.shape[0])[:, None]
    out[rows, idx] = h[rows, idx]
    return out


def row_sparse_model(K: int, S: int, levels: Sequence[int] | None = None) -> ModelCollection:
    """Level ``L`` holds stacks whose rows have at most ``L`` nonzero entries."""

    def sample(L, rng):
        h = np.zeros((K, S))
        for k in range(K):
            support = rng.choice(S, size=min(L, S), replace=False)
            h[k, support] = rng.standard_normal(support.size)
        return h

    return ModelCollection(
        name="row-sparse",
        K=K,
        S=S,
        levels=tuple(range(0, S + 1)) if levels is None else tuple(levels),
        membership=lambda L, h: bool(np.all(np.count_nonzero(np.asarray(h), axis=1) <= L)),
        sampler=sample,
        projector=_keep_largest,
        linear_dim=lambda L: min(L, S),
    )
