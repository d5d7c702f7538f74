"""Minimum-weight perfect matching decoding of memory experiments.

Hyperedges of the detector error model are split into one component per
detector species (X-type and Z-type detectors never share a matching edge).
Components with one or two detectors are primitive edges; larger components
are written as an exact sum of existing primitive edges whose logical bits
reproduce the hyperedge's, falling back to shortest existing paths.

Matching itself is delegated to PyMatching (exact blossom). An exhaustive
bitmask search over Dijkstra distances serves as the optimality oracle.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import pymatching
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted
from statsmodels.stats.proportion import proportion_confint

from .surface import (
    CHUNK_SHOTS,
    DetectorErrorModel,
    MemoryExperiment,
    SignatureTable,
    build_memory_circuit,
    chunk_sizes,
    detector_error_model,
    sample_chunk,
    signature_table,
    xor_combine,
)

BOUNDARY = -1
MAX_COMPONENT = 10


class DecompositionError(ValueError):
    """A hyperedge cannot be expressed as matching edges."""


@dataclass(frozen=True)
class Edge:
    u: int
    v: int  # BOUNDARY for boundary edges
    probability: float
    logical: bool

    @property
    def weight(self) -> float:
        return float(np.log((1 - self.probability) / self.probability))


@dataclass
class MatchingGraph:
    n_detectors: int
    edges: list[Edge]
    provenance: list[list[int]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for e in self.edges:
            if not 0 < e.probability < 0.5:
                raise ValueError(f"edge probability {e.probability} gives a non-positive weight")
        if not self.provenance:
            self.provenance = [[] for _ in self.edges]

    def to_pymatching(self) -> pymatching.Matching:
        m = pymatching.Matching()
        for e in self.edges:
            fault = {0} if e.logical else set()
            if e.v == BOUNDARY:
                m.add_boundary_edge(e.u, fault_ids=fault, weight=e.weight, error_probability=e.probability)
            else:
                m.add_edge(e.u, e.v, fault_ids=fault, weight=e.weight, error_probability=e.probability)
        m.ensure_num_fault_ids(1)
        return m

    def scaled(self, factor: float) -> "MatchingGraph":
        """Same graph with every weight multiplied by ``factor`` (for invariance checks)."""
        if factor <= 0:
            raise ValueError("factor must be positive")
        edges = []
        for e in self.edges:
            w = e.weight * factor
            edges.append(Edge(e.u, e.v, float(1 / (1 + np.exp(w))), e.logical))
        return MatchingGraph(self.n_detectors, edges, [list(p) for p in self.provenance], dict(self.stats))


# --------------------------------------------------------------------------
# graph construction


def _partitions(items: tuple[int, ...]):
    """All partitions of ``items`` into pairs and boundary singletons."""
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for tail in _partitions(rest):
        yield ((first, BOUNDARY),) + tail
    for k, other in enumerate(rest):
        for tail in _partitions(rest[:k] + rest[k + 1 :]):
            yield ((first, other),) + tail


def _key(u: int, v: int) -> tuple[int, int]:
    if v == BOUNDARY:
        return (u, BOUNDARY)
    return (min(u, v), max(u, v))


def build_matching_graph(dem: DetectorErrorModel) -> MatchingGraph:
    kinds = [d.kind for d in dem.detectors]
    basis = dem.meta.get("basis")
    components: list[tuple[int, tuple[int, ...], bool, float]] = []
    undetectable = 0.0
    for h_idx, h in enumerate(dem.hyperedges):
        by_kind: dict[str, list[int]] = {}
        for det in h.detectors:
            by_kind.setdefault(kinds[det], []).append(det)
        if h.logical and basis not in by_kind:
            undetectable = xor_combine(undetectable, h.probability)
        for kind, dets in sorted(by_kind.items()):
            components.append((h_idx, tuple(dets), bool(h.logical and kind == basis), h.probability))

    # primitive edges first: their logical bit is the one carried most probably
    prim: dict[tuple[int, int], dict[bool, float]] = {}
    for _, dets, logical, p in components:
        if len(dets) <= 2:
            key = _key(dets[0], dets[1] if len(dets) == 2 else BOUNDARY)
            slot = prim.setdefault(key, {})
            slot[logical] = xor_combine(slot.get(logical, 0.0), p)
    prim_logical = {k: max(v, key=v.get) for k, v in prim.items()}

    merged: dict[tuple[int, int], dict[bool, float]] = {}
    origin: dict[tuple[int, int], set[int]] = {}
    n_split = n_fallback = 0
    dist = None
    for h_idx, dets, logical, p in components:
        if len(dets) <= 2:
            parts = [(dets[0], dets[1] if len(dets) == 2 else BOUNDARY)]
            bits = [logical]
        else:
            if len(dets) > MAX_COMPONENT:
                raise DecompositionError(f"hyperedge {h_idx} has a {len(dets)}-detector component")
            parts = None
            for cand in sorted(_partitions(dets), key=len):
                keys = [_key(*c) for c in cand]
                if all(k in prim_logical for k in keys):
                    if sum(prim_logical[k] for k in keys) % 2 == int(logical):
                        parts = keys
                        bits = [prim_logical[k] for k in keys]
                        break
            n_split += 1
            if parts is None:
                if dist is None:
                    dist = _primitive_distances(len(dem.detectors), prim)
                parts, bits = _fallback_split(dets, logical, dist, h_idx)
                n_fallback += 1
        for key, bit in zip(parts, bits):
            key = _key(*key)
            slot = merged.setdefault(key, {})
            slot[bit] = xor_combine(slot.get(bit, 0.0), p)
            origin.setdefault(key, set()).add(h_idx)

    edges, provenance = [], []
    conflicts = 0
    for key in sorted(merged):
        slot = merged[key]
        if len(slot) > 1:
            conflicts += 1
        # parallel edges with different logical bits: keep the likelier bit, total firing probability
        bit = max(slot, key=slot.get)
        p = min(xor_combine(slot.get(True, 0.0), slot.get(False, 0.0)), 0.5 - 1e-12)
        edges.append(Edge(key[0], key[1], p, bit))
        provenance.append(sorted(origin[key]))
    stats = {
        "hyperedges": len(dem.hyperedges),
        "split": n_split,
        "fallback": n_fallback,
        "logical_conflicts": conflicts,
        "undetectable_logical_probability": undetectable,
    }
    return MatchingGraph(len(dem.detectors), edges, provenance, stats)


def _primitive_distances(n: int, prim) -> np.ndarray:
    rows, cols, w = [], [], []
    for (u, v), slot in prim.items():
        p = min(xor_combine(slot.get(True, 0.0), slot.get(False, 0.0)), 0.5 - 1e-12)
        v = n if v == BOUNDARY else v
        rows += [u, v]
        cols += [v, u]
        w += [np.log((1 - p) / p)] * 2
    g = csr_matrix((w, (rows, cols)), shape=(n + 1, n + 1))
    return dijkstra(g)


def _fallback_split(dets, logical, dist, h_idx):
    n = dist.shape[0] - 1
    best, best_cost = None, np.inf
    for cand in _partitions(tuple(dets)):
        cost = sum(dist[u, n if v == BOUNDARY else v] for u, v in cand)
        if cost < best_cost:
            best, best_cost = cand, cost
    if best is None or not np.isfinite(best_cost):
        raise DecompositionError(f"hyperedge {h_idx} on detectors {dets} has no path in the primitive graph")
    bits = [bool(logical)] + [False] * (len(best) - 1)
    return [_key(*c) for c in best], bits


# --------------------------------------------------------------------------
# exhaustive oracle


class ExhaustiveMatcher:
    """Exact minimum-weight matching by bitmask DP over Dijkstra distances.

    Defects pair with each other or with the boundary. Intended for small
    defect counts as an oracle for the blossom decoder.
    """

    def __init__(self, graph: MatchingGraph):
        n = graph.n_detectors
        self.n = n
        best: dict[tuple[int, int], Edge] = {}
        for e in graph.edges:
            k = _key(e.u, e.v)
            if k not in best or e.weight < best[k].weight:
                best[k] = e
        rows, cols, w = [], [], []
        self._bit = {}
        for (u, v), e in best.items():
            vv = n if v == BOUNDARY else v
            rows += [u, vv]
            cols += [vv, u]
            w += [e.weight, e.weight]
            self._bit[(u, vv)] = self._bit[(vv, u)] = e.logical
        self._graph = csr_matrix((w, (rows, cols)), shape=(n + 1, n + 1))
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _from(self, src: int) -> tuple[np.ndarray, np.ndarray]:
        if src not in self._cache:
            d, pred = dijkstra(self._graph, indices=src, return_predecessors=True)
            self._cache[src] = (d, pred)
        return self._cache[src]

    def _path_parity(self, src: int, dst: int) -> int:
        _, pred = self._from(src)
        parity, node = 0, dst
        while node != src:
            prev = pred[node]
            if prev < 0:
                raise DecompositionError(f"no path between {src} and {dst}")
            parity ^= int(self._bit[(int(prev), int(node))])
            node = int(prev)
        return parity

    def decode(self, syndrome: np.ndarray) -> tuple[float, int, list[tuple[int, int]]]:
        defects = [int(i) for i in np.flatnonzero(syndrome)]
        k = len(defects)
        b = self.n
        d = np.empty((k, k + 1))
        for i, u in enumerate(defects):
            dist, _ = self._from(u)
            d[i, :k] = dist[defects]
            d[i, k] = dist[b]

        @lru_cache(maxsize=None)
        def best(mask: int) -> tuple[float, tuple]:
            if mask == 0:
                return 0.0, ()
            i = (mask & -mask).bit_length() - 1
            rest = mask & ~(1 << i)
            cost, pairs = best(rest)
            choice = (d[i, k] + cost, ((i, -1),) + pairs)
            m = rest
            while m:
                j = (m & -m).bit_length() - 1
                m &= m - 1
                c2, p2 = best(rest & ~(1 << j))
                if d[i, j] + c2 < choice[0]:
                    choice = (d[i, j] + c2, ((i, j),) + p2)
            return choice

        total, pairs = best((1 << k) - 1)
        flip = 0
        matched = []
        for i, j in pairs:
            u = defects[i]
            v = b if j < 0 else defects[j]
            flip ^= self._path_parity(u, v)
            matched.append((u, BOUNDARY if j < 0 else v))
        return float(total), flip, matched

    def matching_weight(self, pairs: Sequence[tuple[int, int]]) -> float:
        total = 0.0
        for u, v in pairs:
            dist, _ = self._from(u)
            total += dist[self.n if v == BOUNDARY else v]
        return float(total)


# --------------------------------------------------------------------------
# estimator


class MWPMDecoder(ClassifierMixin, BaseEstimator):
    """Predicts the logical observable flip from detector bits.

    ``fit`` takes a DetectorErrorModel (or a prebuilt MatchingGraph);
    ``predict`` maps (shots, n_detectors) detector bits to 0/1 flips.
    """

    def __init__(self, merge: str = "xor"):
        self.merge = merge

    def fit(self, X, y=None):
        if self.merge != "xor":
            raise ValueError("only xor merging is supported")
        graph = X if isinstance(X, MatchingGraph) else build_matching_graph(X)
        self.graph_ = graph
        self.matching_ = graph.to_pymatching()
        self.n_features_in_ = graph.n_detectors
        self.classes_ = np.array([0, 1])
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "matching_")
        X = check_array(X, dtype=np.uint8, ensure_min_samples=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} detectors, got {X.shape[1]}")
        return X

    def _columns(self, X: np.ndarray) -> np.ndarray:
        # trailing detectors without edges have no node; they can never fire
        return X[:, : self.matching_.num_nodes]

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if len(X) == 0 or self.matching_.num_nodes == 0:
            return np.zeros(len(X), dtype=np.uint8)
        return self.matching_.decode_batch(self._columns(X))[:, 0].astype(np.uint8)

    def decode(self, syndrome) -> tuple[list[tuple[int, int]], int]:
        """Matched defect pairs and the predicted flip for one syndrome."""
        X = self._check(np.atleast_2d(syndrome))
        if self.matching_.num_nodes == 0:
            return [], 0
        row = self._columns(X)[0]
        pairs = self.matching_.decode_to_matched_dets_array(row)
        flip = int(self.matching_.decode(row)[0])
        return [(int(u), int(v)) for u, v in pairs], flip


# --------------------------------------------------------------------------
# logical error rates


@dataclass(frozen=True)
class LogicalErrorRate:
    failures: int
    shots: int
    ci_low: float
    ci_high: float

    @property
    def p_L(self) -> float:
        return self.failures / self.shots

    @classmethod
    def of(cls, failures: int, shots: int, alpha: float = 0.05) -> "LogicalErrorRate":
        lo, hi = proportion_confint(failures, shots, alpha=alpha, method="wilson")
        return cls(int(failures), int(shots), float(lo), float(hi))


@dataclass
class _Context:
    exp: MemoryExperiment
    table: SignatureTable
    decoder: MWPMDecoder


def _count_chunk(ctx: _Context, n: int, seed: int, index: int) -> int:
    batch = sample_chunk(ctx.exp, n, seed, index, "sparse", ctx.table)
    pred = ctx.decoder.predict(batch.detectors)
    return int(np.count_nonzero(pred != batch.observables))


_WORKER: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _WORKER
    _WORKER = ctx


def _worker_chunk(args: tuple[int, int, int]) -> int:
    return _count_chunk(_WORKER, *args)


def logical_error_rate(
    exp: MemoryExperiment,
    shots: int,
    seed: int,
    *,
    workers: int = 1,
    chunk: int = CHUNK_SHOTS,
    decoder: MWPMDecoder | None = None,
) -> LogicalErrorRate:
    """Fraction of shots whose decoded flip differs from the true observable.

    Chunks are keyed by index, so the count does not depend on ``workers``.
    """
    if shots < 1:
        raise ValueError("shots must be at least 1")
    table = signature_table(exp)
    if decoder is None:
        decoder = MWPMDecoder().fit(detector_error_model(exp, table))
    ctx = _Context(exp, table, decoder)
    jobs = [(n, seed, k) for k, n in enumerate(chunk_sizes(shots, chunk))]
    if workers <= 1 or len(jobs) == 1:
        failures = sum(_count_chunk(ctx, *j) for j in jobs)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            failures = sum(pool.map(_worker_chunk, jobs))
    return LogicalErrorRate.of(failures, shots)


@dataclass(frozen=True)
class MemoryResult:
    per_basis: dict[str, LogicalErrorRate]

    @property
    def mean(self) -> LogicalErrorRate:
        """Both bases pooled with equal shots: the mean p_L with a Wilson interval."""
        f = sum(r.failures for r in self.per_basis.values())
        n = sum(r.shots for r in self.per_basis.values())
        return LogicalErrorRate.of(f, n)


def memory_error_rate(
    layout, channels, shots: int, seed: int, *, bases: Sequence[str] = ("X", "Z"), workers: int = 1,
    rounds: int | None = None,
) -> MemoryResult:
    """Run the memory experiment in each basis with ``shots`` shots each."""
    out = {}
    for k, basis in enumerate(bases):
        exp = build_memory_circuit(layout, basis, channels, rounds=rounds)
        out[basis] = logical_error_rate(exp, shots, seed + 7919 * k, workers=workers)
    return MemoryResult(out)
