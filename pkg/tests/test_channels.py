from __future__ import annotations

import numpy as np
import pytest

from rydstab.channels import (
    ChannelError,
    PauliChannel,
    channel_for_boundary,
    channel_from_rates,
    extract_exact,
    extract_first_order,
    load_channel,
    save_channel,
    twirl_from_map,
)
from rydstab.dynamics import BlockadeModel
from rydstab.pauli import PauliString, enumerate_paulis
from rydstab.pipeline import unit_rates
from rydstab.protocols import np_schedule, sim_schedule

DA, A2A = BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL


def test_z_flip_channel():
    p = 0.2
    z = PauliString("Z").matrix()
    lam = twirl_from_map(lambda ops: (1 - p) * ops + p * np.einsum("ab,rbc,cd->rad", z, ops, z), 1)
    assert np.allclose(lam, [1 - p, 0, 0, p], atol=1e-12)


def test_twirl_recovers_every_two_qubit_pauli_channel():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(16))
    mats = np.stack([p.matrix() for p in enumerate_paulis(2)])

    def apply(ops):
        return np.einsum("k,kab,rbc,kdc->rad", probs, mats, ops, mats.conj())

    assert np.allclose(twirl_from_map(apply, 2), probs, atol=1e-12)


def test_pauli_channel_validation():
    with pytest.raises(ChannelError):
        PauliChannel(1, [1.0, 0.0, 0.0])
    with pytest.raises(ChannelError):
        PauliChannel(1, [1.1, -0.1, 0.0, 0.0])
    with pytest.raises(ChannelError):
        channel_from_rates(np.array([0, 50.0, 0, 0]), 0.1, {})


def test_channel_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ch = PauliChannel(2, rng.dirichlet(np.ones(16)), {"protocol": "X"})
    save_channel(ch, tmp_path / "c.json")
    assert load_channel(tmp_path / "c.json") == ch
    text = (tmp_path / "c.json").read_text().replace('"IZ"', '"IQ"', 1)
    (tmp_path / "bad.json").write_text(text)
    with pytest.raises(Exception):
        load_channel(tmp_path / "bad.json")


def test_gamma_zero_is_identity():
    sched = np_schedule().truncated(2)
    ch = extract_exact(sched, A2A, 0.0)
    assert ch.n == 3 and len(ch.probs) == 64
    assert np.isclose(ch.probs[0], 1, atol=1e-10)
    fo = extract_first_order(sched, A2A, 0.0)
    assert fo.probs[0] == 1.0


def test_first_order_scales_linearly():
    sched = np_schedule().truncated(2)
    a = extract_first_order(sched, A2A, 1e-4)
    b = extract_first_order(sched, A2A, 2e-4)
    assert np.allclose(b.probs[1:], 2 * a.probs[1:], rtol=1e-12, atol=0)


def test_exact_agrees_with_first_order_at_small_gamma():
    sched = np_schedule().truncated(2)
    g = 1e-4
    ex = extract_exact(sched, A2A, g)
    fo = extract_first_order(sched, A2A, g)
    big = fo.probs[1:] > 1e-3 * fo.error_probability
    rel = np.abs(ex.probs[1:][big] - fo.probs[1:][big]) / fo.probs[1:][big]
    assert rel.max() < 0.01
    assert abs(ex.probs.sum() - 1) < 1e-8 and ex.probs.min() >= 0


def test_boundary_channel_size():
    ch = channel_for_boundary(np_schedule(), A2A, 1e-4)
    assert ch.n == 3 and ch.meta["truncated"]
    with pytest.raises(ValueError):
        channel_for_boundary(np_schedule(), A2A, 1e-4, n_data=3)


def test_sim_rates_are_covariant_under_data_permutation(cache_dir):
    rates, _ = unit_rates("SIM", DA, 4, cache_dir)
    ch = PauliChannel(5, np.r_[0.0, rates[1:]] + np.eye(1, 1024, 0)[0])
    perm = [0, 2, 1, 4, 3]
    assert np.allclose(ch.permuted(perm).probs, ch.probs, rtol=1e-6, atol=1e-14)


def test_rates_are_nonnegative_and_sparse(cache_dir):
    for proto, model in (("NP", A2A), ("NH", DA), ("TO", A2A)):
        rates, meta = unit_rates(proto, model, 4, cache_dir)
        assert rates.min() >= 0 and rates[0] == 0
        assert meta["doubling_change"] < 1e-3
