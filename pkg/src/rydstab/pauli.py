"""Phase-free Pauli strings and the transforms used for channel bookkeeping.

Strings are indexed in base-4 lexicographic order (I < X < Y < Z) with qubit 0
as the most significant digit, so ``enumerate_paulis(n)[k]`` has index ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

LETTERS = "IXYZ"
_LETTER_INDEX = {c: i for i, c in enumerate(LETTERS)}
MAX_QUBITS = 6

# single-qubit symplectic bits for I, X, Y, Z
_XBIT = np.array([0, 1, 1, 0], dtype=np.uint8)
_ZBIT = np.array([0, 0, 1, 1], dtype=np.uint8)

_SINGLE = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


@dataclass(frozen=True, order=True)
class PauliString:
    """An n-qubit Pauli label without phase, e.g. ``PauliString("IZZXI")``."""

    letters: str

    def __post_init__(self) -> None:
        if not isinstance(self.letters, str) or not self.letters:
            raise ValueError("Pauli string must be a non-empty str")
        bad = set(self.letters) - set(LETTERS)
        if bad:
            raise ValueError(f"invalid Pauli letters {sorted(bad)} in {self.letters!r}")

    @property
    def n(self) -> int:
        return len(self.letters)

    @property
    def index(self) -> int:
        k = 0
        for c in self.letters:
            k = 4 * k + _LETTER_INDEX[c]
        return k

    @classmethod
    def from_index(cls, index: int, n: int) -> "PauliString":
        if not 0 <= index < 4**n:
            raise ValueError(f"index {index} out of range for n={n}")
        out = []
        for _ in range(n):
            out.append(LETTERS[index % 4])
            index //= 4
        return cls("".join(reversed(out)))

    def __str__(self) -> str:
        return self.letters

    def __len__(self) -> int:
        return len(self.letters)

    def matrix(self) -> np.ndarray:
        m = np.ones((1, 1), dtype=complex)
        for c in self.letters:
            m = np.kron(m, _SINGLE[_LETTER_INDEX[c]])
        return m


def _as_pauli(p: PauliString | str) -> PauliString:
    return p if isinstance(p, PauliString) else PauliString(p)


def commutation_sign(r: PauliString | str, q: PauliString | str) -> int:
    """Return +1 if ``r`` and ``q`` commute and -1 otherwise."""
    r, q = _as_pauli(r), _as_pauli(q)
    if r.n != q.n:
        raise ValueError(f"length mismatch: {r.n} vs {q.n}")
    anti = sum(a != "I" and b != "I" and a != b for a, b in zip(r.letters, q.letters))
    return -1 if anti % 2 else 1


def weight(q: PauliString | str) -> int:
    q = _as_pauli(q)
    return sum(c != "I" for c in q.letters)


def restrict(q: PauliString | str, positions: Iterable[int]) -> PauliString:
    """Sub-string on ``positions``, kept in ascending qubit order."""
    q = _as_pauli(q)
    pos = sorted(set(positions))
    if not pos or pos[0] < 0 or pos[-1] >= q.n:
        raise ValueError(f"invalid positions {pos} for n={q.n}")
    return PauliString("".join(q.letters[i] for i in pos))


def _check_n(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_QUBITS:
        raise ValueError(f"qubit count must be in [1, {MAX_QUBITS}], got {n}")


@lru_cache(maxsize=None)
def enumerate_paulis(n: int) -> tuple[PauliString, ...]:
    """All 4**n strings in canonical order, identity first."""
    _check_n(n)
    return tuple(PauliString.from_index(k, n) for k in range(4**n))


@lru_cache(maxsize=None)
def symplectic_table(n: int) -> tuple[np.ndarray, np.ndarray]:
    """X and Z bit tables of shape (4**n, n) for the canonical ordering."""
    _check_n(n)
    digits = np.array(np.unravel_index(np.arange(4**n), (4,) * n)).T
    return _XBIT[digits], _ZBIT[digits]


# tr(P_q E) for a 2x2 block E, in I, X, Y, Z order, as a (row*2+col, q) matrix
_TRACE_MAP = np.einsum("qab->baq", _SINGLE).reshape(4, 4)


def pauli_coefficients(ops: np.ndarray) -> np.ndarray:
    """Compute tr(Q @ E) for every Pauli Q, batched over leading axes.

    ``ops`` has shape (..., 2**n, 2**n); the result has shape (..., 4**n) in
    canonical order. Row and column index of each qubit are paired and then
    contracted one qubit at a time.
    """
    ops = np.asarray(ops, dtype=complex)
    dim = ops.shape[-1]
    n = dim.bit_length() - 1
    if ops.shape[-2] != dim or 2**n != dim:
        raise ValueError("operators must be square with dimension 2**n")
    batch = ops.shape[:-2]
    size = int(np.prod(batch, dtype=int))
    t = ops.reshape((size,) + (2,) * (2 * n))
    perm = [0] + [ax for j in range(n) for ax in (1 + j, 1 + n + j)]
    t = t.transpose(perm).reshape((size,) + (4,) * n)
    for j in range(n):
        t = np.moveaxis(np.tensordot(t, _TRACE_MAP, axes=([1 + j], [0])), -1, 1 + j)
    return t.reshape(batch + (4**n,))


def from_pauli_coefficients(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pauli_coefficients`: E = 2**-n sum_Q tr(QE) Q."""
    coeffs = np.asarray(coeffs, dtype=complex)
    n = (coeffs.shape[-1].bit_length() - 1) // 2
    mats = np.stack([p.matrix() for p in enumerate_paulis(n)])
    return np.tensordot(coeffs, mats, axes=([-1], [0])) / 2**n


_SIGN4 = np.array(
    [[1, 1, 1, 1], [1, 1, -1, -1], [1, -1, 1, -1], [1, -1, -1, 1]], dtype=float
)


def commutation_transform(values: np.ndarray) -> np.ndarray:
    """Apply S[Q, R] = s(R, Q) along the last axis (length 4**n).

    The sign matrix is the n-fold Kronecker power of a 4x4 block, so the
    transform is applied qubit by qubit.
    """
    values = np.asarray(values)
    n = (values.shape[-1].bit_length() - 1) // 2
    batch = values.shape[:-1]
    t = values.reshape(batch + (4,) * n)
    nb = len(batch)
    for j in range(n):
        t = np.moveaxis(np.tensordot(_SIGN4, t, axes=([1], [nb + j])), 0, nb + j)
    return t.reshape(batch + (4**n,))
