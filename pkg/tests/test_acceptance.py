"""Acceptance criteria, one test per criterion at the stated tolerance.

Monte Carlo criteria replay the run configurations in ``configs/``; finished
cells are cached under ``runs/`` so replays are fast, while a fresh checkout
recomputes them (hours for criteria 6, 7 and 9).
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import CRITERIA, ROOT
from rydstab.analysis import ScalingResult, crossover, fit_power_law, fit_scaling, mean_basis_points
from rydstab.channels import extract_exact, extract_first_order
from rydstab.cli import main, read_rows
from rydstab.decoder import ExhaustiveMatcher, MWPMDecoder, build_matching_graph
from rydstab.dynamics import BlockadeModel, Propagator
from rydstab.pauli import enumerate_paulis
from rydstab.pipeline import plaquette_channels, unit_rates
from rydstab.propagation import (
    brute_force_coeffs,
    sim_reachability,
    spectator_reachable,
    symmetric_coeffs,
)
from rydstab.protocols import (
    NH_THETA,
    TO_THETA,
    np_schedule,
    optimize_at_duration,
    pi_2pi_pi_schedule,
    schedule_for,
)
from rydstab.surface import build_layout, build_memory_circuit, detector_error_model

DA, A2A = BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL
CONFIGS = ROOT / "configs"

# published fit parameters (alpha, gamma_th, c) and crossovers
QUOTED_SCALING = {
    ("NH", "data-ancilla"): (0.55, 3.9e-3, 0.036),
    ("SIM", "data-ancilla"): (0.38, 6.8e-3, 0.044),
    ("TO", "all-to-all"): (0.41, 4.5e-3, 0.038),
    ("PI_2PI_PI", "all-to-all"): (0.58, 2.5e-3, 0.038),
}
QUOTED_CROSSOVER = {("NH", "SIM"): 1.1e-3, ("TO", "PI_2PI_PI"): 5.6e-3}


def record(k: int, ok: bool, detail: str) -> None:
    CRITERIA[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def replay(name: str) -> list[dict]:
    """Run (or resume) a configuration and return its simulate rows."""
    cfg = CONFIGS / f"{name}.yaml"
    out = ROOT / "runs" / name
    assert main(["simulate", "--config", str(cfg), "--output", str(out), "--cache", str(ROOT / "runs" / "cache")]) == 0
    return read_rows([str(out / "simulate.csv")])


def test_criterion_01_propagation_coefficient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst, missing = 0.0, []
    for k in range(20):
        theta = float(rng.uniform(0, 2 * np.pi))
        res = None
        for duration in (10.0, 14.0, 18.0):
            res = optimize_at_duration(theta, duration, n_segments=60, starts=5, seed=k)
            if res is not None:
                break
        if res is None:
            missing.append(theta)
            continue
        gate = Propagator([res.pulse, res.pulse], DA).full
        err = np.abs(brute_force_coeffs(gate).as_array() - symmetric_coeffs(theta).as_array()).max()
        worst = max(worst, float(err))
    pp = Propagator(pi_2pi_pi_schedule().gate_pulses(0), DA).full
    pp_abs = np.abs(brute_force_coeffs(pp).as_array())
    pp_err = float(np.abs(pp_abs - [1, 0, 0, 0]).max())
    elapsed = time.time() - t0
    ok = not missing and worst <= 1e-6 and pp_err <= 1e-8 and elapsed < 60
    record(1, ok, f"symmetric max err {worst:.1e} ({20 - len(missing)}/20 synthesized); "
                  f"pi-2pi-pi |c|={np.round(pp_abs, 9).tolist()}; {elapsed:.0f}s")


def test_criterion_02_unitarity():
    worst, names = 0.0, []
    gates = [(n, m, schedule_for(n, m)) for n in ("TO", "NH") for m in (DA, A2A)]
    gates += [("NP", A2A, np_schedule()), ("PI_2PI_PI", A2A, pi_2pi_pi_schedule())]
    for name, model, sched in gates:
        for k in range(len(sched.gates)):
            v = Propagator(sched.gate_pulses(k), DA).full
            for pos in ("ancilla", "data"):
                worst = max(worst, abs(brute_force_coeffs(v, pos).norm - 1))
        names.append(f"{name}/{model.value}")
    record(2, worst <= 1e-9, f"max |sum|c|^2 - 1| = {worst:.1e} over {len(names)} schedules")


def test_criterion_03_channel_cross_validation():
    t0 = time.time()
    sched = schedule_for("NH", DA).truncated(2)
    diffs = []
    for g in (1e-4, 5e-5):
        ex = extract_exact(sched, DA, g)
        fo = extract_first_order(sched, DA, g)
        diffs.append(float(np.abs(ex.probs - fo.probs).max()))
    ratio = diffs[0] / diffs[1]
    elapsed = time.time() - t0
    ok = abs(ratio / 4 - 1) <= 0.25 and elapsed < 1800
    record(3, ok, f"residuals {diffs[0]:.3e} -> {diffs[1]:.3e}, ratio {ratio:.3f}; {elapsed:.0f}s")


def test_criterion_04_sim_reachability(tmp_path):
    t0 = time.time()
    rates, _ = unit_rates("SIM", DA, 4, cache_dir=tmp_path)  # fresh, not from the run cache
    positive = int(np.count_nonzero(rates[1:] > 0))
    witnessed = sim_reachability()
    all_q = {str(p) for p in enumerate_paulis(5)[1:]}
    elapsed = time.time() - t0
    ok = positive == 1023 and witnessed == all_q and elapsed < 600
    record(4, ok, f"{positive}/1023 positive rates, {len(witnessed)}/1023 witnessed; {elapsed:.0f}s")


def test_criterion_05_spectator_propagation():
    everything = set(np.ndindex(*(2,) * 5))
    equal = {z for z in everything if z[2] == z[3] == z[4]}
    got = {t: spectator_reachable(t, TO_THETA) for t in (np.pi / 2, 0.0, np.pi)}
    ok = got[np.pi / 2] == everything and got[0.0] == equal and got[np.pi] == equal
    record(5, ok, f"|pi/2|={len(got[np.pi / 2])} |0|={len(got[0.0])} |pi|={len(got[np.pi])}")


EXPONENT_TARGETS = {
    ("TO", "data-ancilla"): (1.0, 0.2),
    ("NH", "data-ancilla"): (2.0, 0.25),
    ("NH", "all-to-all"): (1.06, 0.2),
    ("NP", "all-to-all"): (1.85, 0.3),
}


@pytest.mark.slow
def test_criterion_06_exponents():
    rows = replay("exponents_data-ancilla") + replay("exponents_all-to-all")
    grouped = mean_basis_points(rows)
    parts, ok = [], True
    for (p, b), (target, tol) in EXPONENT_TARGETS.items():
        pts = grouped[(p, b, 3)]
        assert len(pts) == 6 and min(int(r["shots"]) for r in rows) >= 10**6
        nu = fit_power_law(pts, (3e-4, 1e-3)).nu
        good = abs(nu - target) <= tol
        ok &= good
        parts.append(f"{p}/{b} nu={nu:.3f} (target {target}+-{tol}) {'ok' if good else 'off'}")
    record(6, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_07_protocol_ordering():
    rows = replay("ordering_data-ancilla") + replay("ordering_all-to-all")
    grouped = mean_basis_points(rows)
    parts, ok = [], True
    for b, better, worse in (("data-ancilla", "NH", "TO"), ("all-to-all", "NP", "NH")):
        for d in (3, 5):
            (lo,), (hi,) = grouped[(better, b, d)], grouped[(worse, b, d)]
            z = 1.959963984540054
            good = lo.p_L + z * lo.sigma < hi.p_L - z * hi.sigma
            ok &= good
            parts.append(f"{b} d={d} {better} {lo.p_L:.2e} < {worse} {hi.p_L:.2e} {'ok' if good else 'overlap'}")
    record(7, ok, "; ".join(parts))


def _single_hyperedge_failures(protocol: str) -> tuple[int, int]:
    channels = plaquette_channels(protocol, DA, 1e-3, ROOT / "runs" / "cache")
    bad = total = 0
    for basis in ("X", "Z"):
        dem = detector_error_model(build_memory_circuit(build_layout(3), basis, channels))
        dec = MWPMDecoder().fit(dem)
        syn = np.zeros((len(dem.hyperedges), len(dem.detectors)), dtype=np.uint8)
        for k, h in enumerate(dem.hyperedges):
            syn[k, list(h.detectors)] = 1
        truth = np.array([h.logical for h in dem.hyperedges], dtype=np.uint8)
        bad += int(np.count_nonzero(dec.predict(syn) != truth))
        total += len(dem.hyperedges)
    return bad, total


def test_criterion_08_single_decay_correction():
    nh_bad, nh_total = _single_hyperedge_failures("NH")
    to_bad, to_total = _single_hyperedge_failures("TO")
    ok = nh_bad == 0 and to_bad > 0
    record(8, ok, f"NH misdecoded {nh_bad}/{nh_total}; TO misdecoded {to_bad}/{to_total}")


@pytest.mark.slow
def test_criterion_09_scaling_fits():
    rows = replay("scaling_data-ancilla") + replay("scaling_all-to-all")
    grouped = mean_basis_points(rows)
    fits = {}
    parts, ok = [], True
    for (p, b), quoted in QUOTED_SCALING.items():
        per_d = {d: fit_power_law(grouped[(p, b, d)], (5e-4, 2e-3)) for d in (3, 5, 7)}
        s = fits[p] = fit_scaling(per_d)
        rel = np.abs(np.array([s.alpha, s.gamma_th, s.c]) / quoted - 1)
        good = bool(np.all(rel <= 0.15))
        ok &= good
        parts.append(f"{p} alpha={s.alpha:.3f} gamma_th={s.gamma_th:.2e} c={s.c:.3f} {'ok' if good else 'off'}")
    for (a, b), quoted in QUOTED_CROSSOVER.items():
        g = crossover(fits[a], fits[b])
        good = abs(g / quoted - 1) <= 0.2
        ok &= good
        parts.append(f"{a}/{b} gamma_x={g:.2e} (quoted {quoted:.1e}) {'ok' if good else 'off'}")
    record(9, ok, "; ".join(parts))


def test_criterion_10_decoder_optimality():
    channels = plaquette_channels("TO", DA, 1e-3, ROOT / "runs" / "cache")
    graph = build_matching_graph(detector_error_model(build_memory_circuit(build_layout(3), "Z", channels)))
    dec = MWPMDecoder().fit(graph)
    oracle = ExhaustiveMatcher(graph)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        syn = np.zeros(graph.n_detectors, dtype=np.uint8)
        syn[rng.choice(graph.n_detectors, k, replace=False)] = 1
        pairs, _ = dec.decode(syn)
        best, _, _ = oracle.decode(syn)
        worst = max(worst, abs(oracle.matching_weight(pairs) - best) / max(best, 1e-12))
    record(10, worst <= 1e-9, f"max relative weight gap {worst:.1e} over 1000 instances")


def test_criterion_11_determinism(tmp_path):
    outputs = []
    for workers in (1, 2, 4):
        out = tmp_path / f"w{workers}"
        args = ["simulate", "--protocols", "NH", "SIM", "--gammas", "1e-3", "2e-3", "--distances", "3",
                "--shots", "200000", "--seed", "11", "--workers", str(workers), "--output", str(out),
                "--cache", str(ROOT / "runs" / "cache")]
        assert main(args) == 0
        outputs.append(((out / "simulate.csv").read_bytes(), (out / "manifest.json").read_bytes()))
    same = all(o == outputs[0] for o in outputs[1:])
    record(11, same, "CSV and manifest bit-identical for 1, 2 and 4 workers" if same else "outputs differ")
