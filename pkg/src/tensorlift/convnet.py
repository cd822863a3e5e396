"""Convolutional linear networks on rooted DAGs.

Signals live on ``Z/NZ``: every convolution is circular, so each column of
the network matrix is a translate of the leaf's impulse response.  Edges
point from a leaf towards the root; an edge of depth ``k`` has ``k - 1``
edges between it and the root.  Layer ``k`` parameters ``h[k-1]`` are the
concatenated kernel values of the depth-``k`` edges, in canonical edge
order, each edge's values listed by increasing offset.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateParams,
    InvalidParameters,
    InvalidPath,
    InvalidTopology,
    TopologyNotCertified,
)
from .lifting import FactorFamily, eval_product, materialize_lifting, probe_rng
from .stability import FitSettings, fit_factors, unit_noise
from .tensor_core import as_params, class_distance, is_nondegenerate, root_p

__all__ = [
    "Edge",
    "ConvTopology",
    "TopologyVerdict",
    "KernelCheck",
    "ConvBoundReport",
    "ConvRecoveryReport",
    "kernel_of",
    "path_convolution",
    "assemble_factors",
    "algo_check",
    "verify_kernel_characterization",
    "path_restriction",
    "network_class_distance",
    "edge_significance",
    "convnet_stability_bound",
    "run_convnet_experiment",
    "make_haar_topology",
    "make_chain_topology",
    "make_parallel_dirac_topology",
]


@dataclass(frozen=True, order=True)
class Edge:
    src: str
    dst: str
    depth: int
    support: tuple[int, ...]


def _circ_conv(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    for s in np.flatnonzero(kernel):
        out = out + kernel[s] * np.roll(a, s)
    return out


@dataclass(frozen=True, eq=False)
class ConvTopology:
    """Validated network topology.

    ``edges`` is stored in canonical order (depth, source position, target
    position, support), and positions come from sorting the nodes of each
    level by id.
    """

    N: int
    K: int
    nodes: tuple[str, ...]
    root: str
    leaves: tuple[str, ...]
    edges: tuple[Edge, ...]
    level: dict = field(init=False, repr=False)

    def __init__(self, N: int, K: int, nodes: Sequence, root, leaves: Sequence, edges: Sequence):
        N, K = int(N), int(K)
        if N < 1:
            raise InvalidTopology("N must be positive")
        if K < 1:
            raise InvalidTopology("K must be at least 1")
        node_ids = [str(v) for v in nodes]
        if len(set(node_ids)) != len(node_ids):
            raise InvalidTopology("node ids must be unique")
        root = str(root)
        known = set(node_ids)
        if root not in known:
            raise InvalidTopology(f"root {root!r} is not a declared node")
        parsed = []
        for i, e in enumerate(edges):
            if isinstance(e, Edge):
                src, dst, depth, support = e.src, e.dst, e.depth, e.support
            else:
                src, dst, depth, support = e["src"], e["dst"], e["depth"], e["support"]
            src, dst, depth = str(src), str(dst), int(depth)
            support_list = [int(s) for s in support]
            for end in (src, dst):
                if end not in known:
                    raise InvalidTopology(f"edge {i}: unknown node {end!r}")
            if not 1 <= depth <= K:
                raise InvalidTopology(f"edge {i}: depth {depth} outside 1..{K}")
            if not support_list:
                raise InvalidTopology(f"edge {i}: empty support")
            if len(set(support_list)) != len(support_list):
                raise InvalidTopology(f"edge {i}: repeated offsets in support")
            if any(s < 0 or s >= N for s in support_list):
                raise InvalidTopology(f"edge {i}: support offsets must lie in 0..{N - 1}")
            parsed.append(Edge(src, dst, depth, tuple(sorted(support_list))))

        # levels: distance to the root, which must agree with every edge's depth
        level = {root: 0}
        outgoing = {v: [] for v in node_ids}
        for e in parsed:
            outgoing[e.src].append(e)
        if outgoing[root]:
            raise InvalidTopology("the root must not have outgoing edges")
        changed = True
        while changed:
            changed = False
            for e in parsed:
                if e.dst in level and e.src not in level:
                    level[e.src] = level[e.dst] + 1
                    changed = True
        for e in parsed:
            if e.src not in level or e.dst not in level:
                raise InvalidTopology(f"edge {e.src}->{e.dst} does not lead to the root")
            if level[e.src] != level[e.dst] + 1:
                raise InvalidTopology(f"edge {e.src}->{e.dst}: inconsistent depth along paths to the root")
            if e.depth != level[e.src]:
                raise InvalidTopology(f"edge {e.src}->{e.dst}: declared depth {e.depth}, position implies {level[e.src]}")
        for v in node_ids:
            if v not in level:
                raise InvalidTopology(f"node {v!r} does not reach the root")
        has_in = {e.dst for e in parsed}
        sources = sorted(v for v in node_ids if v not in has_in and v != root)
        leaf_ids = sorted(str(v) for v in leaves)
        if leaf_ids != sources:
            raise InvalidTopology(f"declared leaves {leaf_ids} differ from nodes without inputs {sources}")
        if not leaf_ids:
            raise InvalidTopology("the network needs at least one leaf")
        for v in leaf_ids:
            if level[v] != K:
                raise InvalidTopology(f"leaf {v!r} is {level[v]} edges from the root, expected K={K}")

        order = sorted(node_ids, key=lambda v: (level[v], v))
        pos = {}
        for lv in range(K + 1):
            for i, v in enumerate([u for u in order if level[u] == lv]):
                pos[v] = i
        parsed.sort(key=lambda e: (e.depth, pos[e.src], pos[e.dst], e.support))
        widths = [sum(len(e.support) for e in parsed if e.depth == k) for k in range(1, K + 1)]
        if len(set(widths)) != 1:
            raise InvalidTopology(f"total kernel size per depth must be constant, got {widths}")

        object.__setattr__(self, "N", N)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "nodes", tuple(order))
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "leaves", tuple(leaf_ids))
        object.__setattr__(self, "edges", tuple(parsed))
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "_pos", pos)

    # derived structure -------------------------------------------------

    @property
    def S(self) -> int:
        return sum(len(e.support) for e in self.edges if e.depth == 1)

    @property
    def max_kernel_size(self) -> int:
        return max(len(e.support) for e in self.edges)

    def nodes_at(self, lv: int) -> list[str]:
        return [v for v in self.nodes if self.level[v] == lv]

    def edges_at(self, depth: int) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.depth == depth]

    @cached_property
    def param_start(self) -> tuple[int, ...]:
        """Index of each edge's first coefficient inside its layer's row."""
        starts = [0] * len(self.edges)
        for k in range(1, self.K + 1):
            acc = 0
            for i in self.edges_at(k):
                starts[i] = acc
                acc += len(self.edges[i].support)
        return tuple(starts)

    @cached_property
    def paths(self) -> tuple[tuple[int, ...], ...]:
        """All leaf-to-root paths as edge indices ``(e^1, ..., e^K)``, depth 1 first."""
        out_edges = {v: [] for v in self.nodes}
        for i, e in enumerate(self.edges):
            out_edges[e.src].append(i)
        found = []

        def walk(v, acc):
            if v == self.root:
                found.append(tuple(reversed(acc)))
                return
            for i in out_edges[v]:
                walk(self.edges[i].dst, acc + [i])

        for leaf in self.leaves:
            walk(leaf, [])
        return tuple(found)

    def paths_from(self, leaf: str) -> list[tuple[int, ...]]:
        return [p for p in self.paths if self.edges[p[-1]].src == leaf]

    def path_param_indices(self, path: Sequence[int]) -> list[list[int]]:
        """Per layer, the parameter indices feeding the kernels along ``path``."""
        return [list(range(self.param_start[i], self.param_start[i] + len(self.edges[i].support))) for i in path]

    @cached_property
    def valid_indices(self) -> np.ndarray:
        """Flat multi-indices whose layer parameters all lie on one path (sorted)."""
        shape = (self.S,) * self.K
        flat = set()
        for path in self.paths:
            for idx in itertools.product(*self.path_param_indices(path)):
                flat.add(int(np.ravel_multi_index(idx, shape)))
        return np.array(sorted(flat), dtype=np.intp)

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "K": self.K,
            "nodes": list(self.nodes),
            "root": self.root,
            "leaves": list(self.leaves),
            "edges": [{"src": e.src, "dst": e.dst, "depth": e.depth, "support": list(e.support)} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConvTopology":
        for key in ("N", "K", "nodes", "root", "leaves", "edges"):
            if key not in doc:
                raise InvalidTopology(f"missing field {key!r}")
        for i, e in enumerate(doc["edges"]):
            for key in ("src", "dst", "depth", "support"):
                if key not in e:
                    raise InvalidTopology(f"edges[{i}]: missing field {key!r}")
        return cls(doc["N"], doc["K"], doc["nodes"], doc["root"], doc["leaves"], doc["edges"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ConvTopology":
        return cls.from_dict(json.loads(text))


def _params(t: ConvTopology, h) -> np.ndarray:
    return as_params(h, K=t.K, S=t.S)


def kernel_of(t: ConvTopology, edge: int, hk) -> np.ndarray:
    """Length-``N`` kernel of ``edge`` built from its layer's parameter row."""
    e = t.edges[edge]
    start = t.param_start[edge]
    hk = np.asarray(hk)
    out = np.zeros(t.N, dtype=hk.dtype if hk.dtype.kind in "iu" else float)
    out[list(e.support)] = hk[start:start + len(e.support)]
    return out


def path_convolution(t: ConvTopology, path: Sequence[int], h) -> np.ndarray:
    """Circular convolution of the kernels along ``path``."""
    path = tuple(int(i) for i in path)
    if path not in t.paths:
        raise InvalidPath(f"{path} is not a leaf-to-root path")
    h = _params(t, h)
    out = np.zeros(t.N)
    out[0] = 1.0
    for k, edge in enumerate(path):
        out = _circ_conv(out, kernel_of(t, edge, h[k]))
    return out


def assemble_factors(t: ConvTopology) -> FactorFamily:
    """Block-circulant placements for every layer.

    Layer ``k`` maps the signals of the depth-``k`` edge sources (level
    ``k``) to their targets (level ``k - 1``), so ``M_1`` lands in ``R^N``
    at the root and ``M_K`` reads the concatenated leaf signals.
    """
    N = t.N
    dims = tuple(N * len(t.nodes_at(lv)) for lv in range(t.K + 1))
    layers = []
    cols = np.arange(N)
    for k in range(1, t.K + 1):
        rows_all = []
        for i in t.edges_at(k):
            e = t.edges[i]
            r0 = N * t._pos[e.dst]
            c0 = N * t._pos[e.src]
            for j, s in enumerate(e.support):
                block = np.empty((N, 4))
                block[:, 0] = r0 + (cols + s) % N
                block[:, 1] = c0 + cols
                block[:, 2] = t.param_start[i] + j
                block[:, 3] = 1.0
                rows_all.append(block)
        layers.append(np.concatenate(rows_all) if rows_all else np.zeros((0, 4)))
    return FactorFamily(K=t.K, S=t.S, dims=dims, placements=tuple(layers))


@dataclass(frozen=True)
class TopologyVerdict:
    passes: bool
    offending: tuple[tuple[str, int, int], ...]
    supports_disjoint: bool | None
    kernel_dim: int | None
    n_paths: int
    S: int


def _path_offset_sums(t: ConvTopology, path: Sequence[int]) -> list[int]:
    return [sum(c) % t.N for c in itertools.product(*(t.edges[i].support for i in path))]


def _all_ones_response(t: ConvTopology, leaf: str) -> np.ndarray:
    """Integer response at the root to a Dirac at offset 0 of ``leaf`` with all-ones kernels."""
    signal = {leaf: np.zeros(t.N, dtype=np.int64)}
    signal[leaf][0] = 1
    for k in range(t.K, 0, -1):
        nxt = {}
        for i in t.edges_at(k):
            e = t.edges[i]
            if e.src not in signal:
                continue
            ones = np.zeros(t.N, dtype=np.int64)
            ones[list(e.support)] = 1
            acc = nxt.get(e.dst, np.zeros(t.N, dtype=np.int64))
            nxt[e.dst] = acc + _circ_conv(signal[e.src], ones)
        signal = nxt
    return signal.get(t.root, np.zeros(t.N, dtype=np.int64))


def algo_check(t: ConvTopology) -> TopologyVerdict:
    """Check that the all-ones network maps every leaf Dirac to a {0, 1} signal.

    Runs in integer arithmetic.  One Dirac per leaf suffices because every
    other column of that leaf's block is a circular translate.
    """
    offending = []
    for leaf in t.leaves:
        y = _all_ones_response(t, leaf)
        for n in np.flatnonzero((y != 0) & (y != 1)):
            offending.append((leaf, int(n), int(y[n])))
    passes = not offending
    disjoint = None
    kernel_dim = None
    if passes:
        disjoint = True
        for leaf in t.leaves:
            seen = set()
            for path in t.paths_from(leaf):
                sums = set(_path_offset_sums(t, path))
                if sums & seen:
                    disjoint = False
                seen |= sums
        n_valid = sum(math.prod(len(t.edges[i].support) for i in p) for p in t.paths)
        kernel_dim = t.S**t.K - n_valid
    return TopologyVerdict(passes, tuple(offending), disjoint, kernel_dim, len(t.paths), t.S)


@dataclass(frozen=True)
class KernelCheck:
    ok: bool
    kernel_dim: int
    expected_dim: int
    max_on_valid: float

    def __bool__(self) -> bool:
        return self.ok


def verify_kernel_characterization(t: ConvTopology, budget: int | None = None, atol: float = 1e-10) -> KernelCheck:
    """Check numerically that the kernel is exactly the tensors vanishing on valid paths."""
    verdict = algo_check(t)
    if not verdict.passes:
        raise TopologyNotCertified("all-ones test failed; the kernel characterization does not apply")
    op = materialize_lifting(assemble_factors(t), budget=budget)
    valid = t.valid_indices
    expected = t.S**t.K - valid.size
    kb = op.kernel_basis
    worst = float(np.max(np.abs(kb[valid]))) if kb.size and valid.size else 0.0
    return KernelCheck(op.kernel_dim == expected and worst <= atol, op.kernel_dim, expected, worst)


def path_restriction(t: ConvTopology, h, path: Sequence[int]) -> np.ndarray:
    """Parameters on ``path`` as a ``(K, S')`` stack, short kernels padded with zeros.

    Padding is harmless: rescaling keeps the zeros and they add nothing to
    any entrywise norm.
    """
    h = _params(t, h)
    width = t.max_kernel_size
    out = np.zeros((t.K, width))
    for k, idx in enumerate(t.path_param_indices(path)):
        out[k, :len(idx)] = h[k, idx]
    return out


def network_class_distance(t: ConvTopology, h, g, p=2) -> float:
    """``p``-aggregate of the per-path class distances."""
    per_path = []
    for path in t.paths:
        hp, gp = path_restriction(t, h, path), path_restriction(t, g, path)
        if not (is_nondegenerate(hp) and is_nondegenerate(gp)):
            raise DegenerateParams(f"path {path} has a zero kernel")
        per_path.append(class_distance(hp, gp, p))
    vals = np.array(per_path)
    if np.isinf(float(p)):
        return float(vals.max())
    return float(np.sum(vals ** float(p)) ** (1.0 / float(p)))


def edge_significance(t: ConvTopology, h) -> float:
    """Smallest sup-norm of an edge kernel, i.e. the largest admissible epsilon."""
    h = _params(t, h)
    return min(float(np.max(np.abs(kernel_of(t, i, h[e.depth - 1])))) for i, e in enumerate(t.edges))


@dataclass(frozen=True)
class ConvBoundReport:
    bound: float
    snr_ok: bool
    eps_ok: bool | None
    eps_condition_note: str


def convnet_stability_bound(t: ConvTopology, p, epsilon: float, delta: float, eta: float,
                            hbar=None, verdict: TopologyVerdict | None = None) -> ConvBoundReport:
    """Recovery bound on the network class distance for a certified topology."""
    verdict = algo_check(t) if verdict is None else verdict
    if not verdict.passes:
        raise TopologyNotCertified("all-ones test failed; the network is not identifiable")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    K, N = t.K, t.N
    bound = 7.0 * root_p(K * t.max_kernel_size, p) * epsilon ** (1 - K) * (delta + eta) / math.sqrt(N)
    snr_ok = delta + eta <= math.sqrt(N) * epsilon**K / 2
    if hbar is None:
        return ConvBoundReport(bound, snr_ok, None, "assumed: every edge kernel has sup-norm >= epsilon")
    eps_ok = edge_significance(t, hbar) >= epsilon
    note = "checked against hbar" if eps_ok else "violated: some edge kernel of hbar is below epsilon"
    return ConvBoundReport(bound, snr_ok, eps_ok, note)


@dataclass(frozen=True)
class ConvRecoveryReport:
    seed: int
    delta: float
    eta: float
    d_p: float
    bound: float
    epsilon: float
    precond_met: bool
    holds: bool | None

    def as_row(self) -> dict:
        return {
            "seed": self.seed,
            "delta": self.delta,
            "eta": self.eta,
            "d_p": self.d_p,
            "bound": self.bound,
            "precond_met": self.precond_met,
            "holds": "n/a" if self.holds is None else self.holds,
        }


def run_convnet_experiment(t: ConvTopology, delta: float, seed: int, p=2,
                           settings: FitSettings = FitSettings(), family: FactorFamily | None = None,
                           verdict: TopologyVerdict | None = None) -> ConvRecoveryReport:
    """Plant Gaussian kernels, observe with noise of norm ``delta``, refit, compare to the bound.

    Epsilon is the planted network's own edge significance, so the only
    precondition left to check is the signal-to-noise condition.
    """
    verdict = algo_check(t) if verdict is None else verdict
    f = assemble_factors(t) if family is None else family
    rng = probe_rng(seed, 0)
    hbar = rng.standard_normal((t.K, t.S))
    X = eval_product(f, hbar) + delta * unit_noise((f.m, f.n), rng)
    fit = fit_factors(f, X, settings=settings, seed=seed + 1)
    eps = edge_significance(t, hbar)
    report = convnet_stability_bound(t, p, eps, delta, fit.eta, hbar=hbar, verdict=verdict)
    try:
        d = network_class_distance(t, fit.h, hbar, p)
    except DegenerateParams:
        d = math.nan
    met = report.snr_ok and not math.isnan(d)
    return ConvRecoveryReport(seed, delta, fit.eta, d, report.bound, eps, met, (d <= report.bound) if met else None)


# builders ----------------------------------------------------------------


def make_haar_topology(K: int, N: int, branches: int = 1) -> ConvTopology:
    """Undecimated-Haar topology: depth-``k`` kernels supported on ``{0, 2**k}``.

    ``branches`` chains of length ``K`` meet at the root, so every leaf has
    exactly one path and every depth carries the same total kernel size.
    Needs ``N >= 2**(K+1)`` so that all offset sums along a chain stay
    distinct modulo ``N``.
    """
    if K < 1 or branches < 1:
        raise InvalidParameters("K and branches must be at least 1")
    if N < 2 ** (K + 1):
        raise InvalidParameters(f"N={N} too small: offsets along a depth-{K} chain collide unless N >= {2 ** (K + 1)}")
    nodes = ["r"]
    edges = []
    leaves = []
    for b in range(branches):
        prev = "r"
        for lv in range(1, K + 1):
            name = f"b{b}.{lv}"
            nodes.append(name)
            edges.append({"src": name, "dst": prev, "depth": lv, "support": [0, 2**lv]})
            prev = name
        leaves.append(prev)
    return ConvTopology(N, K, nodes, "r", leaves, edges)


def make_chain_topology(N: int, supports: Sequence[Sequence[int]]) -> ConvTopology:
    """Single path; ``supports[k]`` is the support of the depth-``k+1`` kernel."""
    K = len(supports)
    nodes = ["r"] + [f"c{lv}" for lv in range(1, K + 1)]
    edges = [{"src": f"c{lv}", "dst": nodes[lv - 1], "depth": lv, "support": list(supports[lv - 1])}
             for lv in range(1, K + 1)]
    return ConvTopology(N, K, nodes, "r", [f"c{K}"], edges)


def make_parallel_dirac_topology(N: int) -> ConvTopology:
    """One leaf joined to the root by two Dirac kernels: the all-ones test must fail."""
    edges = [{"src": "f", "dst": "r", "depth": 1, "support": [0]}] * 2
    return ConvTopology(N, 1, ["r", "f"], "r", ["f"], edges)
