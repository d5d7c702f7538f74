"""Driven, blockaded plaquette dynamics on the {0, 1, r} atom levels.

Units: time in 1/Omega_max, rates and Rabi frequencies in Omega_max. Atom 0 is
the ancilla. Infinite blockade is realized by deleting every basis label in
which a blocked pair is simultaneously in ``r``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

TWO_PI = 2 * np.pi
_TIME_EPS = 1e-12
_DENSE_LINDBLAD_MAX_DIM = 24


class AccuracyError(RuntimeError):
    """A propagation missed its accuracy target."""


class GateCheckError(ValueError):
    """A propagator is not the expected diagonal gate."""


class BlockadeModel(str, Enum):
    DATA_ANCILLA = "data-ancilla"
    ALL_TO_ALL = "all-to-all"

    @classmethod
    def parse(cls, value: "BlockadeModel | str") -> "BlockadeModel":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-").replace(" ", "-")
        aliases = {
            "data-ancilla": cls.DATA_ANCILLA,
            "dataancilla": cls.DATA_ANCILLA,
            "all-to-all": cls.ALL_TO_ALL,
            "alltoall": cls.ALL_TO_ALL,
        }
        if key not in aliases:
            raise ValueError(f"unknown blockade model {value!r}")
        return aliases[key]

    def blocked_pairs(self, n_atoms: int) -> frozenset[tuple[int, int]]:
        if self is BlockadeModel.DATA_ANCILLA:
            return frozenset((0, j) for j in range(1, n_atoms))
        return frozenset(itertools.combinations(range(n_atoms), 2))


@dataclass(frozen=True)
class RestrictedBasis:
    """Blockade-consistent product labels over {0, 1, r}.

    The 2**n computational labels come first, in binary order with atom 0 as
    the most significant bit, so ``op[:2**n, :2**n]`` is the qubit block.
    """

    n_atoms: int
    model: BlockadeModel
    labels: tuple[str, ...]
    index: dict[str, int] = field(compare=False, repr=False)

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def n_computational(self) -> int:
        return 2**self.n_atoms

    def rydberg_counts(self) -> np.ndarray:
        return np.array([lab.count("r") for lab in self.labels])

    def rydberg_projector(self, atom: int) -> np.ndarray:
        return np.array([lab[atom] == "r" for lab in self.labels], dtype=float)

    def transition(self, atom: int, src: str, dst: str) -> sp.csr_matrix:
        """Sparse |dst_atom><src_atom| on the restricted space."""
        rows, cols = [], []
        for i, lab in enumerate(self.labels):
            if lab[atom] != src:
                continue
            target = lab[:atom] + dst + lab[atom + 1 :]
            j = self.index.get(target)
            if j is not None:
                rows.append(j)
                cols.append(i)
        return sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.dim, self.dim)
        )


@lru_cache(maxsize=None)
def restricted_basis(model: BlockadeModel | str, n_atoms: int) -> RestrictedBasis:
    model = BlockadeModel.parse(model)
    if not 1 <= n_atoms <= 5:
        raise ValueError(f"n_atoms must be in [1, 5], got {n_atoms}")
    blocked = model.blocked_pairs(n_atoms)
    comp = ["".join(p) for p in itertools.product("01", repeat=n_atoms)]
    rest = []
    for p in itertools.product("01r", repeat=n_atoms):
        lab = "".join(p)
        if "r" not in lab:
            continue
        if any(lab[i] == "r" and lab[j] == "r" for i, j in blocked):
            continue
        rest.append(lab)
    labels = tuple(comp + rest)
    return RestrictedBasis(n_atoms, model, labels, {lab: i for i, lab in enumerate(labels)})


@dataclass(frozen=True)
class Pulse:
    """Piecewise-constant drive of one atom: (duration, amplitude, phase) segments."""

    durations: tuple[float, ...]
    amplitudes: tuple[float, ...]
    phases: tuple[float, ...]

    def __post_init__(self) -> None:
        d = tuple(float(x) for x in self.durations)
        a = tuple(float(x) for x in self.amplitudes)
        p = tuple(float(x) for x in self.phases)
        if not (len(d) == len(a) == len(p)) or not d:
            raise ValueError("segments need matching, non-empty duration/amplitude/phase")
        if min(d) <= 0:
            raise ValueError("segment durations must be positive")
        if min(a) < 0 or max(a) > 1 + 1e-12:
            raise ValueError("amplitudes must lie in [0, Omega_max=1]")
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "phases", p)

    @classmethod
    def constant(cls, duration: float, amplitude: float = 1.0, phase: float = 0.0) -> "Pulse":
        return cls((duration,), (amplitude,), (phase,))

    @classmethod
    def idle(cls, duration: float) -> "Pulse":
        return cls.constant(duration, 0.0, 0.0)

    @classmethod
    def from_phases(cls, duration: float, phases: Sequence[float]) -> "Pulse":
        n = len(phases)
        return cls((duration / n,) * n, (1.0,) * n, tuple(phases))

    @property
    def duration(self) -> float:
        return float(sum(self.durations))

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def then(self, other: "Pulse") -> "Pulse":
        return Pulse(
            self.durations + other.durations,
            self.amplitudes + other.amplitudes,
            self.phases + other.phases,
        )

    def value(self, t: float) -> complex:
        bp = self.breakpoints()
        if t < -_TIME_EPS or t > bp[-1] + _TIME_EPS:
            raise ValueError(f"t={t} outside pulse of duration {bp[-1]}")
        k = min(int(np.searchsorted(bp, t, side="right")) - 1, self.n_segments - 1)
        k = max(k, 0)
        return self.amplitudes[k] * np.exp(1j * self.phases[k])

    def to_dict(self) -> dict:
        return {
            "segments": [
                [d, a, p] for d, a, p in zip(self.durations, self.amplitudes, self.phases)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Pulse":
        seg = np.asarray(data["segments"], dtype=float).reshape(-1, 3)
        return cls(tuple(seg[:, 0]), tuple(seg[:, 1]), tuple(seg[:, 2]))


@dataclass(frozen=True)
class GateAngles:
    """Single-qubit phases of V_CZ = CZ [R_Z(theta_a) x R_Z(theta_d)], mod 2 pi."""

    theta_a: float
    theta_d: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta_a", float(np.mod(self.theta_a, TWO_PI)))
        object.__setattr__(self, "theta_d", float(np.mod(self.theta_d, TWO_PI)))


def angle_distance(a: float, b: float) -> float:
    """Distance between two angles on the circle."""
    return float(abs(np.angle(np.exp(1j * (a - b)))))


# --------------------------------------------------------------------------
# piecewise-constant timeline


@dataclass(frozen=True)
class _Timeline:
    times: np.ndarray  # breakpoints, len n_pieces + 1
    omegas: np.ndarray  # complex Rabi frequency per piece and atom


def _timeline(pulses: Sequence[Pulse]) -> _Timeline:
    if not pulses:
        raise ValueError("need at least one pulse")
    total = pulses[0].duration
    for p in pulses[1:]:
        if abs(p.duration - total) > 1e-9:
            raise ValueError("all atoms' pulses must have equal total duration")
    bps = np.unique(np.concatenate([p.breakpoints() for p in pulses]))
    keep = np.concatenate([[True], np.diff(bps) > _TIME_EPS])
    bps = bps[keep]
    bps[-1] = total
    mids = 0.5 * (bps[:-1] + bps[1:])
    omegas = np.empty((len(mids), len(pulses)), dtype=complex)
    for j, p in enumerate(pulses):
        pb = p.breakpoints()
        k = np.clip(np.searchsorted(pb, mids, side="right") - 1, 0, p.n_segments - 1)
        omegas[:, j] = np.asarray(p.amplitudes)[k] * np.exp(1j * np.asarray(p.phases)[k])
    return _Timeline(bps, omegas)


def _restrict_timeline(tl: _Timeline, t0: float, t1: float) -> list[tuple[float, np.ndarray]]:
    """Pieces (duration, omegas) covering [t0, t1]."""
    out = []
    for k in range(len(tl.omegas)):
        a, b = max(tl.times[k], t0), min(tl.times[k + 1], t1)
        if b - a > _TIME_EPS:
            out.append((b - a, tl.omegas[k]))
    return out


@lru_cache(maxsize=64)
def _raising_ops(model: BlockadeModel, n_atoms: int) -> tuple[sp.csr_matrix, ...]:
    basis = restricted_basis(model, n_atoms)
    return tuple(basis.transition(i, "1", "r") for i in range(n_atoms))


def _hamiltonian_from_omegas(
    omegas: np.ndarray, model: BlockadeModel, n_atoms: int
) -> np.ndarray:
    ops = _raising_ops(model, n_atoms)
    dim = ops[0].shape[0]
    h = np.zeros((dim, dim), dtype=complex)
    for om, op in zip(omegas, ops):
        if om != 0:
            h += (om / 2) * op.toarray()
    return h + h.conj().T


def hamiltonian(pulses: Sequence[Pulse], model: BlockadeModel | str, t: float) -> np.ndarray:
    """H(t) = sum_i Omega_i(t)/2 |r_i><1_i| + h.c. on the restricted basis."""
    model = BlockadeModel.parse(model)
    tl = _timeline(pulses)
    if t < -_TIME_EPS or t > tl.times[-1] + _TIME_EPS:
        raise ValueError(f"t={t} outside schedule [0, {tl.times[-1]}]")
    k = int(np.clip(np.searchsorted(tl.times, t, side="right") - 1, 0, len(tl.omegas) - 1))
    return _hamiltonian_from_omegas(tl.omegas[k], model, len(pulses))


class Propagator:
    """Decay-free propagator of a drive, exact per constant piece.

    Each piece is diagonalized once; ``at(t)`` and ``between(t0, t1)`` reuse
    the eigendecompositions.
    """

    def __init__(self, pulses: Sequence[Pulse], model: BlockadeModel | str):
        self.model = BlockadeModel.parse(model)
        self.n_atoms = len(pulses)
        self.basis = restricted_basis(self.model, self.n_atoms)
        self.timeline = _timeline(pulses)
        self._eig = []
        for om in self.timeline.omegas:
            h = _hamiltonian_from_omegas(om, self.model, self.n_atoms)
            lam, vec = np.linalg.eigh(h)
            self._eig.append((lam, vec))
        dim = self.basis.dim
        self._starts = [np.eye(dim, dtype=complex)]
        for k, (lam, vec) in enumerate(self._eig):
            dt = self.timeline.times[k + 1] - self.timeline.times[k]
            self._starts.append(self._piece(k, dt) @ self._starts[-1])

    @property
    def duration(self) -> float:
        return float(self.timeline.times[-1])

    def _piece(self, k: int, dt: float) -> np.ndarray:
        lam, vec = self._eig[k]
        return (vec * np.exp(-1j * lam * dt)) @ vec.conj().T

    def _locate(self, t: float) -> int:
        if t < -_TIME_EPS or t > self.duration + _TIME_EPS:
            raise ValueError(f"t={t} outside schedule [0, {self.duration}]")
        k = int(np.searchsorted(self.timeline.times, t, side="right") - 1)
        return int(np.clip(k, 0, len(self._eig) - 1))

    def at(self, t: float) -> np.ndarray:
        """U(0, t)."""
        k = self._locate(t)
        return self._piece(k, t - self.timeline.times[k]) @ self._starts[k]

    def between(self, t0: float, t1: float) -> np.ndarray:
        """U(t0, t1) = U(0, t1) U(0, t0)^dagger."""
        if t1 < t0 - _TIME_EPS:
            raise ValueError("need t0 <= t1")
        return self.at(t1) @ self.at(t0).conj().T

    @property
    def full(self) -> np.ndarray:
        return self._starts[-1]

    def rydberg_time(self, initial: np.ndarray | None = None) -> float:
        """Mean over initial columns of int sum_i <P_r_i> dt (exact per piece)."""
        basis = self.basis
        if initial is None:
            initial = np.eye(basis.dim, dtype=complex)[:, : basis.n_computational]
        counts = basis.rydberg_counts().astype(float)
        psi = np.array(initial, dtype=complex)
        total = 0.0
        for k, (lam, vec) in enumerate(self._eig):
            dt = self.timeline.times[k + 1] - self.timeline.times[k]
            c = vec.conj().T @ psi
            m = (vec.conj().T * counts) @ vec
            diff = lam[:, None] - lam[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                g = np.where(
                    np.abs(diff) < 1e-12,
                    dt,
                    (np.exp(1j * diff * dt) - 1) / (1j * diff),
                )
            total += float(np.real(np.einsum("jm,jk,km->", c.conj(), m * g, c)))
            psi = self._piece(k, dt) @ psi
        return total / psi.shape[1]


def propagate_unitary(
    pulses: Sequence[Pulse],
    model: BlockadeModel | str,
    t0: float = 0.0,
    t1: float | None = None,
    *,
    unitarity_tol: float = 1e-9,
) -> np.ndarray:
    """Time-ordered decay-free propagator U(t0, t1) on the restricted basis."""
    prop = Propagator(pulses, model)
    t1 = prop.duration if t1 is None else t1
    u = prop.between(t0, t1)
    err = np.abs(u.conj().T @ u - np.eye(u.shape[0])).max()
    if err > unitarity_tol:
        raise AccuracyError(f"propagator unitarity error {err:.2e}")
    return u


# --------------------------------------------------------------------------
# open-system propagation


def _jump_ops(basis: RestrictedBasis) -> list[sp.csr_matrix]:
    """|q_i><r_i| for every atom i and branch q in {0, 1} (without sqrt(gamma/2))."""
    return [basis.transition(i, "r", q) for i in range(basis.n_atoms) for q in "01"]


def _lindblad_superop(h: np.ndarray, basis: RestrictedBasis, gamma: float) -> sp.csr_matrix:
    """Row-major vectorized generator: vec(A rho B) = (A kron B^T) vec(rho)."""
    dim = basis.dim
    eye = sp.identity(dim, format="csr", dtype=complex)
    hs = sp.csr_matrix(h)
    gen = -1j * (sp.kron(hs, eye) - sp.kron(eye, hs.T))
    if gamma > 0:
        rate = gamma / 2
        for j in _jump_ops(basis):
            gen = gen + rate * sp.kron(j, j)
        # sum_q L^dag L = gamma P_r per atom
        decay = np.zeros(dim)
        for i in range(basis.n_atoms):
            decay += gamma * basis.rydberg_projector(i)
        d = sp.diags(decay)
        gen = gen - 0.5 * (sp.kron(d, eye) + sp.kron(eye, d))
    return gen.tocsr()


def lindblad_propagate(
    rho0: np.ndarray,
    pulses: Sequence[Pulse],
    model: BlockadeModel | str,
    gamma: float,
    t0: float = 0.0,
    t1: float | None = None,
    *,
    trace_tol: float = 1e-8,
) -> np.ndarray:
    """Solve the master equation from ``t0`` to ``t1``.

    ``rho0`` may carry leading batch axes. Each constant piece is applied with
    an exact matrix exponential of the generator (dense for small spaces,
    Krylov/Taylor action otherwise). Trace preservation is checked on the
    output.
    """
    model = BlockadeModel.parse(model)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    basis = restricted_basis(model, len(pulses))
    dim = basis.dim
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape[-2:] != (dim, dim):
        raise ValueError(f"rho0 must have trailing shape ({dim}, {dim})")
    batch = rho0.shape[:-2]
    vecs = rho0.reshape(-1, dim * dim).T.copy()
    tl = _timeline(pulses)
    t1 = tl.times[-1] if t1 is None else t1
    if t1 < t0 - _TIME_EPS:
        raise ValueError("need t0 <= t1")
    dense = dim <= _DENSE_LINDBLAD_MAX_DIM
    cache: dict[bytes, object] = {}
    for dt, om in _restrict_timeline(tl, t0, t1):
        key = om.tobytes()
        gen = cache.get(key)
        if gen is None:
            h = _hamiltonian_from_omegas(om, model, len(pulses))
            gen = _lindblad_superop(h, basis, gamma)
            if dense:
                gen = gen.toarray()
            cache[key] = gen
        if dense:
            vecs = expm(gen * dt) @ vecs
        else:
            vecs = expm_multiply(gen * dt, vecs, traceA=complex(gen.diagonal().sum() * dt))
    out = vecs.T.reshape(batch + (dim, dim))
    tr_in = np.trace(rho0, axis1=-2, axis2=-1)
    tr_out = np.trace(out, axis1=-2, axis2=-1)
    err = np.max(np.abs(tr_in - tr_out)) if out.size else 0.0
    if err > trace_tol * max(1.0, float(np.max(np.abs(tr_in)))):
        raise AccuracyError(f"trace drift {err:.2e}")
    return out


# --------------------------------------------------------------------------
# removal channel


@lru_cache(maxsize=None)
def removal_kraus(model: BlockadeModel | str, n_atoms: int) -> tuple[tuple[str, np.ndarray], ...]:
    """Nonzero Kraus operators of the per-atom removal channel applied to all atoms.

    Returned as (key, matrix) with matrices of shape (2**n, dim) mapping the
    restricted space onto the qubit space. The key writes the per-atom Kraus
    index: '0'/'1' for |q><r|/sqrt(2) and '2' for the computational projector.
    Only Rydberg patterns present in the restricted basis give nonzero operators.
    """
    basis = restricted_basis(model, n_atoms)
    nq = basis.n_computational
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, lab in enumerate(basis.labels):
        pattern = tuple(j for j, c in enumerate(lab) if c == "r")
        groups.setdefault(pattern, []).append(i)
    out = []
    for pattern in sorted(groups, key=lambda p: (len(p), p)):
        for bits in itertools.product("01", repeat=len(pattern)):
            key = ["2"] * n_atoms
            for j, b in zip(pattern, bits):
                key[j] = b
            mat = np.zeros((nq, basis.dim))
            scale = 2 ** (-len(pattern) / 2)
            for i in groups[pattern]:
                lab = list(basis.labels[i])
                for j, b in zip(pattern, bits):
                    lab[j] = b
                mat[int("".join(lab), 2), i] = scale
            out.append(("".join(key), mat))
    return tuple(out)


def removal_channel(rho: np.ndarray, model: BlockadeModel | str, n_atoms: int) -> np.ndarray:
    """Apply D(rho) = Pi rho Pi + <r|rho|r> Pi/2 to every atom.

    Input and output live on the restricted basis; the output is supported on
    the computational block. Leading batch axes are allowed.
    """
    basis = restricted_basis(model, n_atoms)
    rho = np.asarray(rho, dtype=complex)
    nq = basis.n_computational
    out = np.zeros(rho.shape, dtype=complex)
    acc = np.zeros(rho.shape[:-2] + (nq, nq), dtype=complex)
    for _, k in removal_kraus(model, n_atoms):
        acc += k @ rho @ k.T
    out[..., :nq, :nq] = acc
    return out


def computational_block(op: np.ndarray, n_atoms: int) -> np.ndarray:
    nq = 2**n_atoms
    return np.asarray(op)[..., :nq, :nq]


def embed_computational(op: np.ndarray, basis: RestrictedBasis) -> np.ndarray:
    """Pad qubit-space operators (..., 2**n, 2**n) with zeros onto the restricted basis."""
    op = np.asarray(op, dtype=complex)
    nq = basis.n_computational
    out = np.zeros(op.shape[:-2] + (basis.dim, basis.dim), dtype=complex)
    out[..., :nq, :nq] = op
    return out


# --------------------------------------------------------------------------
# diagnostics


def rydberg_time(pulses: Sequence[Pulse], model: BlockadeModel | str) -> float:
    """Mean over computational inputs of the integrated Rydberg population (gamma=0)."""
    return Propagator(pulses, model).rydberg_time()


def fit_phases(u_comp: np.ndarray, *, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Fit a computational-block unitary to e^{i phi0} CZ^{(0,j)} prod_j R_Z(theta_j).

    Returns (per-qubit angles, predicted diagonal). Raises GateCheckError if the
    block is not diagonal unitary within ``tol``.
    """
    u = np.asarray(u_comp, dtype=complex)
    dim = u.shape[0]
    n = dim.bit_length() - 1
    off = u - np.diag(np.diag(u))
    if np.abs(off).max() > tol or np.abs(np.abs(np.diag(u)) - 1).max() > tol:
        raise GateCheckError(
            f"gate is not diagonal unitary (off-diagonal {np.abs(off).max():.2e}, "
            f"|diag| deviation {np.abs(np.abs(np.diag(u)) - 1).max():.2e})"
        )
    diag = np.diag(u)
    ref = diag[0]
    angles = np.array([np.angle(diag[1 << (n - 1 - j)] / ref) for j in range(n)])
    bits = (np.arange(dim)[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    cz_parity = bits[:, 0] * bits[:, 1:].sum(axis=1)
    predicted = ref * np.exp(1j * (bits @ angles + np.pi * cz_parity))
    return np.mod(angles, TWO_PI), predicted


def verify_gate(
    u_comp: np.ndarray, target: GateAngles | None = None, tol: float = 1e-6
) -> tuple[float, GateAngles]:
    """Check that a computational block acts as CZ^{(0,j)} up to Z rotations.

    Qubit 0 is the ancilla; for more than two qubits every data qubit is
    CZ-coupled to the ancilla. Returns the worst-case phase fidelity
    ``min_i Re(e^{-i phi} conj(v_i) u_ii)`` against ``target`` (or against the
    best-fit angles when ``target`` is None) and the fitted angles, with
    ``theta_d`` taken from the first data qubit.
    """
    u = np.asarray(u_comp, dtype=complex)
    angles, predicted = fit_phases(u, tol=tol)
    fitted = GateAngles(angles[0], angles[1] if len(angles) > 1 else 0.0)
    diag = np.diag(u)
    if target is not None:
        n = len(angles)
        bits = (np.arange(len(diag))[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
        tv = np.array([target.theta_a] + [target.theta_d] * (n - 1))
        cz_parity = bits[:, 0] * bits[:, 1:].sum(axis=1)
        predicted = np.exp(1j * (bits @ tv + np.pi * cz_parity))
    overlap = np.conj(predicted) * diag
    phase = np.angle(overlap.sum())
    fidelity = float(np.min(np.real(overlap * np.exp(-1j * phase)) / np.abs(predicted)))
    return fidelity, fitted
