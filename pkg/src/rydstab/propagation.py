"""How Rydberg leakage propagates through blockade gates.

Covers the leakage coefficients (c1..c4) of a two-atom gate, spectator
propagation under all-to-all blockade and single-decay reachability of the
global SIM gate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce
from typing import Iterable

import numpy as np

from .channels import DecayEvent, DecayKernel
from .dynamics import BlockadeModel, restricted_basis
from .pauli import PauliString, enumerate_paulis, pauli_coefficients
from .protocols import sim_schedule

ZERO_AMPLITUDE = 1e-10


@dataclass(frozen=True)
class PropagationCoeffs:
    """Amplitudes of |r><1| x I, |r><1| x Z, I x |r><1|, Z x |r><1| after one gate."""

    c1: complex
    c2: complex
    c3: complex
    c4: complex
    residual: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.c3, self.c4], dtype=complex)

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.as_array()) ** 2))

    def up_to_phase(self) -> np.ndarray:
        """Coefficients with the global phase fixed by the largest entry."""
        c = self.as_array()
        k = int(np.argmax(np.abs(c)))
        return c * np.exp(-1j * np.angle(c[k]))


@dataclass(frozen=True)
class SpectatorParams:
    theta_err: float
    theta_d: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta_err", float(np.mod(self.theta_err, 2 * np.pi)))
        object.__setattr__(self, "theta_d", float(np.mod(self.theta_d, 2 * np.pi)))


class AnsatzError(ValueError):
    """A gate's leakage propagation is not captured by the four-term ansatz."""


def symmetric_coeffs(theta: float) -> PropagationCoeffs:
    """Closed-form coefficients of a symmetric gate with theta_a = theta_d = theta."""
    a = np.exp(-2j * theta)
    b = 1j * np.exp(-3j * theta) * np.sin(theta)
    c = np.exp(-3j * theta) * np.cos(theta) / 2
    return PropagationCoeffs((a - b) / 2, (a + b) / 2, c, -c)


# --------------------------------------------------------------------------
# brute force on the two-atom restricted space


def _two_atom_ops() -> dict[str, np.ndarray]:
    basis = restricted_basis(BlockadeModel.ALL_TO_ALL, 2)
    dim = basis.dim

    def op(single0: dict, single1: dict) -> np.ndarray:
        m = np.zeros((dim, dim), dtype=complex)
        for (a_out, a_in), va in single0.items():
            for (b_out, b_in), vb in single1.items():
                i, j = basis.index.get(a_out + b_out), basis.index.get(a_in + b_in)
                if i is not None and j is not None:
                    m[i, j] += va * vb
        return m

    ident = {("0", "0"): 1, ("1", "1"): 1}
    z = {("0", "0"): 1, ("1", "1"): -1}
    leak = {("r", "1"): 1}
    return {
        "leak_a": op(leak, ident),
        "leak_a_z": op(leak, z),
        "leak_d": op(ident, leak),
        "z_leak_d": op(z, leak),
        "pi": op(ident, ident),
    }


def brute_force_coeffs(
    gate: np.ndarray, position: str = "ancilla", tol: float = 1e-8
) -> PropagationCoeffs:
    """Solve V (L x I) Pi = E V Pi for E in the four-term leakage ansatz.

    ``gate`` is the propagator on the two-atom restricted basis (ancilla
    first). For ``position='data'`` the initial leakage sits on the data atom
    and the ansatz is mirrored, so c1/c2 always describe leakage that stays.
    """
    v = np.asarray(gate, dtype=complex)
    ops = _two_atom_ops()
    if v.shape != ops["pi"].shape:
        raise ValueError(f"gate must act on the {ops['pi'].shape[0]}-dim two-atom space")
    if position == "ancilla":
        start, ansatz = ops["leak_a"], [ops["leak_a"], ops["leak_a_z"], ops["leak_d"], ops["z_leak_d"]]
    elif position == "data":
        start, ansatz = ops["leak_d"], [ops["leak_d"], ops["z_leak_d"], ops["leak_a"], ops["leak_a_z"]]
    else:
        raise ValueError("position must be 'ancilla' or 'data'")
    pi = ops["pi"]
    lhs = v @ start @ pi
    cols = np.stack([(a @ v @ pi).ravel() for a in ansatz], axis=1)
    coeffs, *_ = np.linalg.lstsq(cols, lhs.ravel(), rcond=None)
    residual = float(np.linalg.norm(cols @ coeffs - lhs.ravel()))
    if residual > tol:
        raise AnsatzError(f"leakage ansatz residual {residual:.2e} exceeds {tol:.1e}")
    return PropagationCoeffs(*coeffs, residual=residual)


# --------------------------------------------------------------------------
# spectator propagation under all-to-all blockade

_LEVELS = "01r"


def _ket(c: str) -> np.ndarray:
    v = np.zeros(3)
    v[_LEVELS.index(c)] = 1
    return v


def _outer(a: str, b: str) -> np.ndarray:
    return np.outer(_ket(a), _ket(b))


_PI3 = _outer("0", "0") + _outer("1", "1")


def _rz(theta: float) -> np.ndarray:
    return _outer("0", "0") + np.exp(1j * theta) * _outer("1", "1")


def _kron(*ops: np.ndarray) -> np.ndarray:
    return reduce(np.kron, ops)


def _cz(i: int, j: int, n: int = 5) -> np.ndarray:
    diag = np.ones(3**n, dtype=complex)
    for k, lab in enumerate(itertools.product(_LEVELS, repeat=n)):
        if lab[i] == "1" and lab[j] == "1":
            diag[k] = -1
    return np.diag(diag)


def spectator_trace(z: Iterable[int], params: SpectatorParams) -> complex:
    """tr(D E Q) for a leakage error on data atom 1 spectating the gates on atoms 2, 3, 4.

    E = (|r><1|)_1 CZ(0,2) CZ(0,3) CZ(0,4) E_sq with
    E_sq = R_Z(-3 theta_d) x I x R_Z(theta_err)^3, D = Pi x |1><r| x Pi^3 and
    Q = Z^z0 x ... x Z^z4, all on the three-level product space.
    """
    z = list(z)
    e_sq = _kron(_rz(-3 * params.theta_d), _PI3, *[_rz(params.theta_err)] * 3)
    leak = _kron(_PI3, _outer("r", "1"), _PI3, _PI3, _PI3)
    err = leak @ _cz(0, 2) @ _cz(0, 3) @ _cz(0, 4) @ e_sq
    d = _kron(_PI3, _outer("1", "r"), _PI3, _PI3, _PI3)
    zq = _outer("0", "0") - _outer("1", "1")
    q = _kron(*[zq if b else _PI3 for b in z])
    return complex(np.trace(d @ err @ q))


def spectator_trace_closed_form(z: Iterable[int], params: SpectatorParams) -> complex:
    """Closed form of :func:`spectator_trace` as a sum over the ancilla bit."""
    z0, z1, *zs = list(z)
    total = 0j
    for a in (0, 1):
        prod = np.prod([1 + np.exp(1j * (np.pi * (zj + a) + params.theta_err)) for zj in zs])
        total += np.exp(1j * a * (np.pi * z0 - 3 * params.theta_d)) * prod
    return (-1) ** z1 * total


def spectator_reachable(theta_err: float, theta_d: float) -> set[tuple[int, ...]]:
    """Z patterns (z0..z4) with nonzero amplitude from a spectator leakage error."""
    params = SpectatorParams(theta_err, theta_d)
    return {
        z
        for z in itertools.product((0, 1), repeat=5)
        if abs(spectator_trace(z, params)) > ZERO_AMPLITUDE
    }


# --------------------------------------------------------------------------
# SIM single-decay reachability


def sim_witness(q: PauliString | str) -> DecayEvent:
    """Decay of the ancilla mid data pulse that produces Pauli error ``q``."""
    p = q if isinstance(q, PauliString) else PauliString(q)
    if p.n != 5:
        raise ValueError("SIM witnesses are defined on 5 qubits")
    flip = "XY"
    branch = 0 if p.letters[0] in flip else 1
    kraus = "2" + "".join("0" if c in flip else "1" for c in p.letters[1:])
    return DecayEvent(atom=0, branch=branch, time=2 * np.pi, kraus=kraus)


def sim_reachability(floor: float = ZERO_AMPLITUDE) -> set[str]:
    """Non-identity Paulis whose witness decay event has tr(Q E) != 0."""
    sched = sim_schedule()
    kernel = DecayKernel(sched.plaquette_pulses(), BlockadeModel.DATA_ANCILLA)
    cache: dict[tuple[int, str], np.ndarray] = {}
    reached = set()
    for p in enumerate_paulis(5)[1:]:
        ev = sim_witness(p)
        key = (ev.branch, ev.kraus)
        if key not in cache:
            cache[key] = pauli_coefficients(kernel.event_operator(ev))
        if abs(cache[key][p.index]) > floor:
            reached.add(str(p))
    return reached


# --------------------------------------------------------------------------
# propagation tree


@dataclass(frozen=True)
class PropagationPath:
    choices: tuple[int, ...]  # 1-based coefficient index per traversed gate
    amplitude: complex
    leaked: int  # atom carrying the leakage at the end
    z_pattern: tuple[int, ...]  # Z errors on atoms 0..n_gates


@dataclass(frozen=True)
class PathSet:
    paths: tuple[PropagationPath, ...]
    outcomes: dict[str, float]

    def __len__(self) -> int:
        return len(self.paths)


def enumerate_propagation_paths(
    coeffs: PropagationCoeffs, n_gates: int = 4, start_gate: int = 0
) -> PathSet:
    """Expand an ancilla |r><1| error through gates ``start_gate..n_gates-1``.

    While on the ancilla, the leakage stays (c1: no error, c2: Z on that
    gate's data atom) or hops onto the data atom (c3: no error, c4: Z on the
    ancilla) and is then frozen. Paths with zero amplitude are dropped. At the
    end the removal channel turns the leaked |r><1| into an equal mixture of
    I, X, Y, Z on the leaked atom.
    """
    c = coeffs.as_array()
    n_atoms = n_gates + 1
    paths: list[PropagationPath] = []

    def walk(gate: int, choices: tuple, amp: complex, zs: tuple):
        if gate == n_gates:
            paths.append(PropagationPath(choices, amp, 0, zs))
            return
        data = gate + 1
        for k in (1, 2, 3, 4):
            a = amp * c[k - 1]
            if abs(a) < ZERO_AMPLITUDE:
                continue
            z = list(zs)
            if k == 2:
                z[data] ^= 1
            if k == 4:
                z[0] ^= 1
            if k in (1, 2):
                walk(gate + 1, choices + (k,), a, tuple(z))
            else:
                paths.append(PropagationPath(choices + (k,), a, data, tuple(z)))

    walk(start_gate, (), 1.0 + 0j, (0,) * n_atoms)
    outcomes: dict[str, float] = {}
    for p in paths:
        w = abs(p.amplitude) ** 2 / 4
        for letter in "IXYZ":
            letters = ["Z" if b else "I" for b in p.z_pattern]
            letters[p.leaked] = _compose_z(letters[p.leaked], letter)
            key = "".join(letters)
            outcomes[key] = outcomes.get(key, 0.0) + w
    return PathSet(tuple(paths), outcomes)


def _compose_z(existing: str, letter: str) -> str:
    """Single-qubit product (up to phase) of ``existing`` (I or Z) with ``letter``."""
    if existing == "I":
        return letter
    return {"I": "Z", "Z": "I", "X": "Y", "Y": "X"}[letter]


def count_paths_bruteforce(n_gates: int, start_gate: int) -> int:
    """Independent count of nonzero-amplitude tree paths when all c_i != 0.

    Enumerates every choice string over {1,2,3,4}^m and keeps those that stop
    at their first hop (3 or 4) and otherwise run to the last gate.
    """
    m = n_gates - start_gate
    seen = set()
    for seq in itertools.product((1, 2, 3, 4), repeat=m):
        hop = next((i for i, k in enumerate(seq) if k > 2), None)
        seen.add(seq if hop is None else seq[: hop + 1])
    return len(seen)
