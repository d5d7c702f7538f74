from __future__ import annotations

import numpy as np
import pytest

from rydstab.dynamics import BlockadeModel, GateAngles, Propagator, verify_gate
from rydstab.protocols import (
    NH_THETA,
    TO_THETA,
    ConfigurationError,
    ProtocolSchedule,
    load_schedule,
    np_schedule,
    pi_2pi_pi_schedule,
    refine_np_parameters,
    save_schedule,
    schedule_for,
    sim_schedule,
)

DA, A2A = BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL


def _gate_check(sched: ProtocolSchedule, target: GateAngles | None = None):
    g = sched.gates[0]
    nq = 2 ** len(g.atoms)
    return verify_gate(Propagator(list(g.pulses), DA).full[:nq, :nq], target)


def test_sim_schedule():
    s = sim_schedule()
    assert np.isclose(s.duration, 4 * np.pi)
    assert s.applicable_blockades == frozenset({DA})
    fid, angles = _gate_check(s)
    assert fid >= 1 - 1e-8
    u = Propagator(list(s.gates[0].pulses), DA).full
    assert np.isclose(u[0b01111, 0b01111] / u[0, 0], 1)


def test_np_schedule_parameters():
    params = refine_np_parameters()
    assert abs(params.tau1 / 3.57 - 1) < 0.02
    assert abs(params.total / 9.20 - 1) < 0.02
    assert np.isclose(params.tau2, (params.total - 2 * np.pi) / 4)
    fid, angles = _gate_check(np_schedule())
    assert fid >= 1 - 1e-6
    assert abs(angles.theta_d - np.pi) < 1e-3


def test_pi_2pi_pi_schedule():
    s = pi_2pi_pi_schedule()
    assert np.isclose(s.gates[0].duration, 4 * np.pi)
    assert _gate_check(s, s.compensation)[0] >= 1 - 1e-8


@pytest.mark.parametrize("name,theta", [("TO", TO_THETA), ("NH", NH_THETA)])
@pytest.mark.parametrize("model", [DA, A2A])
def test_symmetric_schedules(name, theta, model, cache_dir):
    s = schedule_for(name, model, cache_dir=cache_dir)
    assert len(s.gates) == 4
    fid, angles = _gate_check(s, GateAngles(theta, theta))
    assert fid >= 1 - 1e-6
    assert abs(angles.theta_a - theta) < 1e-3 and abs(angles.theta_d - theta) < 1e-3


def test_symmetric_pulse_exchange_symmetry_and_w_minus(cache_dir):
    s = schedule_for("TO", A2A, cache_dir=cache_dir)
    u = Propagator(list(s.gates[0].pulses), DA).full
    b = Propagator(list(s.gates[0].pulses), DA).basis
    perm = [b.index[lab[::-1]] for lab in b.labels]
    assert np.allclose(u[np.ix_(perm, perm)], u, atol=1e-8)
    w = np.zeros(b.dim, dtype=complex)
    w[b.index["1r"]], w[b.index["r1"]] = 1 / np.sqrt(2), -1 / np.sqrt(2)
    assert np.isclose(abs(np.vdot(w, u @ w)), 1, atol=1e-8)


def test_rydberg_time_ordering(cache_dir):
    t = {n: schedule_for(n, DA, cache_dir=cache_dir).rydberg_time(DA) for n in ("TO", "NH", "SIM")}
    assert t["TO"] < t["NH"] <= 1.10 * t["TO"]
    assert abs(t["SIM"] / t["NH"] - 0.6) <= 0.05 * 0.6


@pytest.mark.xfail(strict=True, reason="pi-2pi-pi/NP Rydberg-time ratio is 1.47 here, not the quoted 1.3")
def test_pi_2pi_pi_rydberg_time_ratio_quoted():
    ratio = pi_2pi_pi_schedule().rydberg_time(A2A) / np_schedule().rydberg_time(A2A)
    assert abs(ratio - 1.3) <= 0.05 * 1.3


def test_sim_all_to_all_rejected():
    with pytest.raises(ConfigurationError):
        schedule_for("SIM", A2A)
    with pytest.raises(ConfigurationError):
        schedule_for("XYZ", DA)


def test_schedule_round_trip(tmp_path):
    s = np_schedule()
    save_schedule(s, tmp_path / "np.json", A2A)
    back = load_schedule(tmp_path / "np.json")
    assert back == s
    assert np.allclose(Propagator(back.plaquette_pulses(), A2A).full, Propagator(s.plaquette_pulses(), A2A).full)


def test_truncated_schedule_has_two_gates():
    s = np_schedule().truncated(2)
    assert len(s.gates) == 2 and s.n_atoms() == 3 and s.meta["truncated"]
