"""Fast analytic self-checks run by ``rydstab verify``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .channels import twirl_from_map
from .dynamics import BlockadeModel, Propagator
from .pauli import PauliString, commutation_transform
from .propagation import (
    brute_force_coeffs,
    sim_reachability,
    spectator_reachable,
    spectator_trace,
    spectator_trace_closed_form,
    SpectatorParams,
    symmetric_coeffs,
)
from .protocols import PROTOCOLS, TO_THETA, optimize_at_duration, schedule_for


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _pauli_flip() -> tuple[bool, str]:
    p = 0.13
    z = PauliString("Z").matrix()
    lam = twirl_from_map(lambda ops: (1 - p) * ops + p * np.einsum("ab,rbc,cd->rad", z, ops, z), 1)
    ok = np.allclose(lam, [1 - p, 0, 0, p], atol=1e-12)
    return ok, f"lambda={np.round(lam, 12).tolist()}"


def _commutation_involution() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    v = rng.normal(size=4**3)
    back = commutation_transform(commutation_transform(v)) / 4**3
    return bool(np.allclose(back, v, atol=1e-12)), f"max error {np.abs(back - v).max():.1e}"


def _unitarity(cache_dir=None) -> tuple[bool, str]:
    worst = 0.0
    for name in PROTOCOLS:
        if name == "SIM":
            continue
        sched = schedule_for(name, BlockadeModel.ALL_TO_ALL, cache_dir=cache_dir)
        gate = Propagator(sched.gate_pulses(0), BlockadeModel.DATA_ANCILLA).full
        for pos in ("ancilla", "data"):
            worst = max(worst, abs(brute_force_coeffs(gate, pos).norm - 1))
    return worst < 1e-9, f"max |sum |c|^2 - 1| = {worst:.1e}"


def _symmetric_formula() -> tuple[bool, str]:
    worst = 0.0
    for k, theta in enumerate((TO_THETA, 3.0)):
        res = optimize_at_duration(theta, 10.0, n_segments=40, starts=5, seed=k)
        if res is None:
            return False, f"no symmetric gate found at theta={theta}"
        gate = Propagator([res.pulse, res.pulse], BlockadeModel.DATA_ANCILLA).full
        err = np.abs(brute_force_coeffs(gate).as_array() - symmetric_coeffs(theta).as_array()).max()
        worst = max(worst, float(err))
    return worst < 1e-6, f"max coefficient error {worst:.1e}"


def _spectators() -> tuple[bool, str]:
    full = spectator_reachable(np.pi / 2, TO_THETA)
    zero = spectator_reachable(0.0, TO_THETA)
    pi = spectator_reachable(np.pi, TO_THETA)
    expected = {z for z in zero if z[2] == z[3] == z[4]}
    params = SpectatorParams(np.pi / 2, TO_THETA)
    z = (1, 0, 1, 1, 0)
    agree = abs(spectator_trace(z, params) - spectator_trace_closed_form(z, params)) < 1e-10
    ok = len(full) == 32 and zero == pi == expected and len(zero) == 8 and agree
    return ok, f"|pi/2|={len(full)} |0|={len(zero)} |pi|={len(pi)}"


def _sim_witness() -> tuple[bool, str]:
    reach = sim_reachability()
    return len(reach) == 1023, f"{len(reach)} of 1023 witnessed"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "pauli_flip_channel": _pauli_flip,
    "commutation_transform_involution": _commutation_involution,
    "propagation_unitarity": _unitarity,
    "symmetric_coefficients": _symmetric_formula,
    "spectator_patterns": _spectators,
    "sim_witnesses": _sim_witness,
}


def run_checks(names=None) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
