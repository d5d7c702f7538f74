from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone

from rydstab.decoder import (
    BOUNDARY,
    Edge,
    ExhaustiveMatcher,
    LogicalErrorRate,
    MatchingGraph,
    MWPMDecoder,
    build_matching_graph,
    logical_error_rate,
    memory_error_rate,
)
from rydstab.pipeline import identity_channel, plaquette_channels
from rydstab.surface import Detector, DetectorErrorModel, Hyperedge, build_layout, build_memory_circuit, detector_error_model


def chain_dem(n: int, p: float = 0.1) -> DetectorErrorModel:
    """Repetition-code chain: boundary - D0 - D1 - ... - D(n-1) - boundary(logical)."""
    dets = tuple(Detector("Z", k, 0) for k in range(n))
    edges = [Hyperedge(p, (0,), False)]
    edges += [Hyperedge(p, (k, k + 1), False) for k in range(n - 1)]
    edges += [Hyperedge(p, (n - 1,), True)]
    return DetectorErrorModel(dets, tuple(edges), {"basis": "Z"})


@pytest.fixture(scope="module")
def nh_exp(cache_dir):
    return build_memory_circuit(build_layout(3), "Z", plaquette_channels("NH", "data-ancilla", 2e-3, cache_dir))


def test_edge_weight():
    assert np.isclose(Edge(0, 1, 0.1, False).weight, np.log(9))
    with pytest.raises(ValueError):
        MatchingGraph(2, [Edge(0, 1, 0.6, False)])


def test_chain_decoding():
    dec = MWPMDecoder().fit(chain_dem(5))
    assert dec.predict(np.zeros((1, 5), dtype=np.uint8))[0] == 0
    pairs, flip = dec.decode(np.array([0, 0, 0, 0, 1], dtype=np.uint8))
    assert flip == 1 and pairs == [(4, BOUNDARY)]
    pairs, flip = dec.decode(np.array([1, 0, 0, 0, 0], dtype=np.uint8))
    assert flip == 0
    pairs, flip = dec.decode(np.array([0, 1, 1, 0, 0], dtype=np.uint8))
    assert flip == 0 and sorted(pairs[0]) == [1, 2]
    assert len(dec.predict(np.zeros((0, 5), dtype=np.uint8))) == 0
    with pytest.raises(ValueError):
        dec.predict(np.zeros((1, 4), dtype=np.uint8))


def test_hyperedges_decompose_into_primitive_edges(nh_exp):
    graph = build_matching_graph(detector_error_model(nh_exp))
    assert graph.stats["fallback"] == 0
    kinds = [d.kind for d in nh_exp.detectors]
    for e in graph.edges:
        assert e.v == BOUNDARY or kinds[e.u] == kinds[e.v]


def test_blossom_matches_exhaustive_oracle(nh_exp):
    graph = build_matching_graph(detector_error_model(nh_exp))
    dec = MWPMDecoder().fit(graph)
    oracle = ExhaustiveMatcher(graph)
    rng = np.random.default_rng(4)
    for _ in range(150):
        k = int(rng.integers(1, 9))
        syn = np.zeros(graph.n_detectors, dtype=np.uint8)
        syn[rng.choice(graph.n_detectors, k, replace=False)] = 1
        pairs, _ = dec.decode(syn)
        total, _, _ = oracle.decode(syn)
        assert np.isclose(oracle.matching_weight(pairs), total, rtol=1e-9, atol=1e-9)


def test_weight_scaling_leaves_decisions_unchanged(nh_exp):
    graph = build_matching_graph(detector_error_model(nh_exp))
    rng = np.random.default_rng(1)
    X = (rng.random((300, graph.n_detectors)) < 0.05).astype(np.uint8)
    a = MWPMDecoder().fit(graph).predict(X)
    b = MWPMDecoder().fit(graph.scaled(1.7)).predict(X)
    assert np.array_equal(a, b)


def test_noiseless_memory_has_no_failures():
    lay = build_layout(3)
    channels = {4: identity_channel(5), 2: identity_channel(3)}
    exp = build_memory_circuit(lay, "X", channels)
    dem = detector_error_model(exp)
    assert dem.hyperedges == ()
    dec = MWPMDecoder().fit(dem)
    rate = logical_error_rate(exp, 5000, 1, decoder=dec)
    assert rate.failures == 0 and rate.ci_low == 0


def test_estimator_protocol():
    dec = MWPMDecoder()
    assert dec.get_params() == {"merge": "xor"}
    assert clone(dec).get_params() == dec.get_params()
    with pytest.raises(ValueError):
        MWPMDecoder(merge="sum").fit(chain_dem(3))


def test_logical_error_rate_interval_and_memory_pooling(cache_dir):
    r = LogicalErrorRate.of(10, 1000)
    assert r.ci_low < 0.01 < r.ci_high
    channels = plaquette_channels("NH", "data-ancilla", 3e-3, cache_dir)
    res = memory_error_rate(build_layout(3), channels, 20_000, 9)
    assert set(res.per_basis) == {"X", "Z"}
    assert res.mean.failures == sum(v.failures for v in res.per_basis.values())
    assert res.mean.shots == 40_000
