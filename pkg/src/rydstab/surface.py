"""Rotated surface code memory experiments with correlated plaquette noise.

Data qubit (r, c) has index r * d + c. Plaquette (i, j) has data corners
(i, j), (i, j+1), (i+1, j), (i+1, j+1). Z-type plaquettes visit them in
NW, NE, SW, SE order and X-type plaquettes in NW, SW, NE, SE order, so a
leaked ancilla that corrupts the last two data atoms leaves a pair
perpendicular to the logical operator of the same type.
Only the plaquette channels are noisy; preparation, Hadamards, measurement
and reset are ideal.

Each stabilizer measurement is: ancilla reset to |+>, H on data (X-type
only), the plaquette Pauli drawn from its channel, the ideal CZ layer, H on
data (X-type only), ancilla measurement in X.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .channels import PauliChannel
from .pauli import symplectic_table

CHUNK_SHOTS = 1 << 16
SAMPLE_MAGIC = b"RYDS"
SAMPLE_VERSION = 1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Stabilizer:
    kind: str
    ancilla: int
    data: tuple[int, ...]
    plaquette: tuple[int, int]

    @property
    def weight(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class CodeLayout:
    d: int
    data_coords: tuple[tuple[int, int], ...]
    ancilla_coords: tuple[tuple[float, float], ...]
    stabilizers: tuple[Stabilizer, ...]
    logical_x: tuple[int, ...]
    logical_z: tuple[int, ...]

    @property
    def n_data(self) -> int:
        return len(self.data_coords)

    @property
    def n_qubits(self) -> int:
        return len(self.data_coords) + len(self.ancilla_coords)

    def of_kind(self, kind: str) -> list[int]:
        return [k for k, s in enumerate(self.stabilizers) if s.kind == kind]


CORNERS = {"NW": (0, 0), "NE": (0, 1), "SW": (1, 0), "SE": (1, 1)}
Z_ORDER = ("NW", "NE", "SW", "SE")
X_ORDER = ("NW", "SW", "NE", "SE")


def build_layout(d: int, z_order: Sequence[str] = Z_ORDER, x_order: Sequence[str] = X_ORDER) -> CodeLayout:
    """Rotated layout; ``z_order``/``x_order`` give the data visiting order per plaquette type."""
    if not isinstance(d, (int, np.integer)) or d % 2 == 0 or not 3 <= d <= 15:
        raise LayoutError(f"distance must be odd and in [3, 15], got {d}")
    for order in (z_order, x_order):
        if sorted(order) != sorted(CORNERS):
            raise LayoutError(f"order must be a permutation of {sorted(CORNERS)}, got {order}")
    d = int(d)
    coords = tuple((r, c) for r in range(d) for c in range(d))
    stabs, anc_coords = [], []
    for i in range(-1, d):
        for j in range(-1, d):
            kind = "X" if (i + j) % 2 == 0 else "Z"
            order = z_order if kind == "Z" else x_order
            corners = [(i + CORNERS[c][0], j + CORNERS[c][1]) for c in order]
            present = [(r, c) for r, c in corners if 0 <= r < d and 0 <= c < d]
            if len(present) == 4:
                pass
            elif len(present) == 2:
                horizontal_edge = i in (-1, d - 1)
                if horizontal_edge and kind != "Z":
                    continue
                if not horizontal_edge and kind != "X":
                    continue
            else:
                continue
            anc = d * d + len(stabs)
            stabs.append(Stabilizer(kind, anc, tuple(r * d + c for r, c in present), (i, j)))
            anc_coords.append((i + 0.5, j + 0.5))
    logical_x = tuple(range(d))  # top row
    logical_z = tuple(r * d for r in range(d))  # left column
    return CodeLayout(d, coords, tuple(anc_coords), tuple(stabs), logical_x, logical_z)


# --------------------------------------------------------------------------
# experiment definition


@dataclass(frozen=True)
class Detector:
    kind: str
    round: int  # rounds index; ``rounds`` for the final data-derived check
    stabilizer: int


@dataclass(frozen=True)
class MemoryExperiment:
    layout: CodeLayout
    basis: str
    rounds: int
    channels: dict[int, PauliChannel] = field(hash=False)
    order: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def n_locations(self) -> int:
        return self.rounds * len(self.layout.stabilizers)

    def locations(self) -> list[tuple[int, int]]:
        """Noise locations as (round, stabilizer index), in circuit order."""
        return [(r, s) for r in range(self.rounds) for s in self.order]

    @cached_property
    def detectors(self) -> tuple[Detector, ...]:
        lay = self.layout
        dets = [Detector(lay.stabilizers[s].kind, 0, s) for s in lay.of_kind(self.basis)]
        for r in range(1, self.rounds):
            dets += [Detector(lay.stabilizers[s].kind, r, s) for s in range(len(lay.stabilizers))]
        dets += [Detector(self.basis, self.rounds, s) for s in lay.of_kind(self.basis)]
        return tuple(dets)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def observable(self) -> tuple[int, ...]:
        return self.layout.logical_z if self.basis == "Z" else self.layout.logical_x

    def channel_for(self, stab: Stabilizer) -> PauliChannel:
        return self.channels[stab.weight]

    def circuit_hash(self) -> str:
        payload = {
            "d": self.layout.d,
            "basis": self.basis,
            "rounds": self.rounds,
            "order": list(self.order),
            "channels": {
                str(w): hashlib.sha256(np.ascontiguousarray(ch.probs).tobytes()).hexdigest()
                for w, ch in sorted(self.channels.items())
            },
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_memory_circuit(
    layout: CodeLayout,
    basis: str,
    channels: dict[int, PauliChannel],
    rounds: int | None = None,
    order: Sequence[int] | None = None,
    meta: dict | None = None,
) -> MemoryExperiment:
    """Memory experiment: ``rounds`` (default d) rounds of all stabilizers, then data readout."""
    if basis not in ("X", "Z"):
        raise ValueError("basis must be 'X' or 'Z'")
    weights = {s.weight for s in layout.stabilizers}
    for w in weights:
        ch = channels.get(w)
        if ch is None:
            raise ValueError(f"missing channel for weight-{w} stabilizers")
        if ch.n != w + 1:
            raise ValueError(f"weight-{w} stabilizers need a {w + 1}-qubit channel, got {ch.n}")
    rounds = layout.d if rounds is None else int(rounds)
    if rounds < 1:
        raise ValueError("rounds must be positive")
    order = tuple(range(len(layout.stabilizers))) if order is None else tuple(order)
    if sorted(order) != list(range(len(layout.stabilizers))):
        raise ValueError("order must be a permutation of stabilizer indices")
    return MemoryExperiment(layout, basis, rounds, dict(channels), order, dict(meta or {}))


# --------------------------------------------------------------------------
# Pauli frame simulation, 64 shots per machine word

Injector = Callable[[int, Sequence[int]], "tuple[np.ndarray, np.ndarray] | None"]


def _words(shots: int) -> int:
    return (shots + 63) // 64


def run_frames(exp: MemoryExperiment, shots: int, injector: Injector) -> tuple[np.ndarray, np.ndarray]:
    """Propagate Pauli frames through the ideal circuit.

    ``injector(location, qubits)`` returns packed (x, z) bit planes of shape
    (len(qubits), words) to XOR in before the CZ layer, or None. Returns
    packed detector bits (n_detectors, words) and observable bits (words,).
    """
    lay = exp.layout
    w = _words(shots)
    x = np.zeros((lay.n_qubits, w), dtype=np.uint64)
    z = np.zeros((lay.n_qubits, w), dtype=np.uint64)
    meas = np.zeros((exp.rounds, len(lay.stabilizers), w), dtype=np.uint64)
    loc = 0
    for r in range(exp.rounds):
        for s in exp.order:
            st = lay.stabilizers[s]
            a, data = st.ancilla, list(st.data)
            x[a] = 0
            z[a] = 0
            if st.kind == "X":
                x[data], z[data] = z[data].copy(), x[data].copy()
            inj = injector(loc, [a] + data)
            if inj is not None:
                x[[a] + data] ^= inj[0]
                z[[a] + data] ^= inj[1]
            for q in data:
                z[a] ^= x[q]
                z[q] ^= x[a]
            if st.kind == "X":
                x[data], z[data] = z[data].copy(), x[data].copy()
            meas[r, s] = z[a]
            loc += 1
    final = x[: lay.n_data] if exp.basis == "Z" else z[: lay.n_data]
    dets = np.empty((exp.n_detectors, w), dtype=np.uint64)
    for k, det in enumerate(exp.detectors):
        if det.round == exp.rounds:
            v = meas[exp.rounds - 1, det.stabilizer].copy()
            for q in lay.stabilizers[det.stabilizer].data:
                v ^= final[q]
        elif det.round == 0:
            v = meas[0, det.stabilizer]
        else:
            v = meas[det.round, det.stabilizer] ^ meas[det.round - 1, det.stabilizer]
        dets[k] = v
    obs = np.zeros(w, dtype=np.uint64)
    for q in exp.observable:
        obs ^= final[q]
    return dets, obs


def unpack_shots(packed: np.ndarray, shots: int) -> np.ndarray:
    """(rows, words) uint64 -> (shots, rows) uint8 bits."""
    packed = np.atleast_2d(packed)
    bits = np.unpackbits(packed.view(np.uint8), axis=1, bitorder="little")[:, :shots]
    return np.ascontiguousarray(bits.T)


def _set_bits(plane: np.ndarray, shots: np.ndarray) -> None:
    np.bitwise_or.at(plane, shots >> 6, np.left_shift(np.uint64(1), (shots & 63).astype(np.uint64)))


# --------------------------------------------------------------------------
# error sampling


@dataclass(frozen=True)
class _ChannelSampler:
    support: np.ndarray  # non-identity Pauli indices with lambda > 0
    cumulative: np.ndarray  # conditional CDF over support
    p_error: float

    @classmethod
    def of(cls, ch: PauliChannel) -> "_ChannelSampler":
        idx = np.flatnonzero(ch.probs[1:] > 0) + 1
        p = ch.probs[idx]
        total = float(p.sum())
        cdf = np.cumsum(p) / total if total > 0 else np.zeros(0)
        if len(cdf):
            cdf[-1] = 1.0
        return cls(idx, cdf, min(total, 1.0))


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    """Counter-style stream keyed by (seed, chunk), independent of the worker layout."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def _bernoulli_positions(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices in [0, n) of successes of n Bernoulli(p) trials, via geometric gaps."""
    if p <= 0 or n <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    out = []
    pos = -1
    while True:
        m = int(max(16, (n - pos) * p + 6 * np.sqrt((n - pos) * p) + 8))
        gaps = rng.geometric(p, size=m)
        cand = pos + np.cumsum(gaps)
        out.append(cand[cand < n])
        if cand[-1] >= n:
            break
        pos = int(cand[-1])
    return np.concatenate(out).astype(np.int64)


def sample_events(exp: MemoryExperiment, shots: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per noise location: (shot indices, Pauli indices) of non-identity draws."""
    samplers = {w: _ChannelSampler.of(ch) for w, ch in exp.channels.items()}
    events = []
    for _, s in exp.locations():
        sm = samplers[exp.layout.stabilizers[s].weight]
        pos = _bernoulli_positions(rng, shots, sm.p_error)
        q = sm.support[np.searchsorted(sm.cumulative, rng.random(len(pos)), side="right").clip(0, len(sm.support) - 1)]
        events.append((pos, q))
    return events


def _events_injector(exp: MemoryExperiment, events, shots: int) -> Injector:
    w = _words(shots)
    tables = {}

    def inject(loc: int, qubits):
        pos, q = events[loc]
        if len(pos) == 0:
            return None
        n = len(qubits)
        if n not in tables:
            tables[n] = symplectic_table(n)
        xt, zt = tables[n]
        xs = np.zeros((n, w), dtype=np.uint64)
        zs = np.zeros((n, w), dtype=np.uint64)
        for j in range(n):
            _set_bits(xs[j], pos[xt[q, j] == 1])
            _set_bits(zs[j], pos[zt[q, j] == 1])
        return xs, zs

    return inject


# --------------------------------------------------------------------------
# signatures of single Paulis


@dataclass(frozen=True)
class SignatureTable:
    """Detector/observable flips of every Pauli at every location.

    ``basis[loc][j, b]`` is the packed signature of X (b=0) or Z (b=1) on the
    j-th qubit of the location; the last bit column is the observable.
    """

    n_detectors: int
    basis: tuple[np.ndarray, ...]

    @property
    def words(self) -> int:
        return _words(self.n_detectors + 1)

    def full(self, loc: int) -> np.ndarray:
        """Packed signatures of all 4**n Paulis at ``loc`` (XOR of components)."""
        b = self.basis[loc]
        n = b.shape[0]
        xt, zt = symplectic_table(n)
        out = np.zeros((4**n, b.shape[2]), dtype=np.uint64)
        for j in range(n):
            out ^= np.where(xt[:, j, None] == 1, b[j, 0], np.uint64(0))
            out ^= np.where(zt[:, j, None] == 1, b[j, 1], np.uint64(0))
        return out


def signature_table(exp: MemoryExperiment) -> SignatureTable:
    """Inject each single-qubit X and Z at each location in its own shot."""
    sizes = [exp.layout.stabilizers[s].weight + 1 for _, s in exp.locations()]
    offsets = np.concatenate([[0], np.cumsum(np.array(sizes) * 2)])
    shots = int(offsets[-1])
    w = _words(shots)

    def inject(loc: int, qubits):
        n = len(qubits)
        xs = np.zeros((n, w), dtype=np.uint64)
        zs = np.zeros((n, w), dtype=np.uint64)
        for j in range(n):
            _set_bits(xs[j], np.array([offsets[loc] + 2 * j]))
            _set_bits(zs[j], np.array([offsets[loc] + 2 * j + 1]))
        return xs, zs

    dets, obs = run_frames(exp, shots, inject)
    bits = unpack_shots(np.vstack([dets, obs[None, :]]), shots)  # (shots, n_det + 1)
    packed = pack_rows(bits)
    table = []
    for loc, n in enumerate(sizes):
        rows = packed[offsets[loc] : offsets[loc] + 2 * n]
        table.append(rows.reshape(n, 2, -1))
    return SignatureTable(exp.n_detectors, tuple(table))


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """(rows, cols) 0/1 -> (rows, words) uint64, little-endian within words."""
    bits = np.asarray(bits, dtype=np.uint8)
    rows, cols = bits.shape
    w = _words(cols)
    padded = np.zeros((rows, w * 64), dtype=np.uint8)
    padded[:, :cols] = bits
    return np.packbits(padded, axis=1, bitorder="little").view(np.uint64).reshape(rows, w)


# --------------------------------------------------------------------------
# samplers


@dataclass(frozen=True)
class SampleBatch:
    detectors: np.ndarray  # (shots, n_detectors) uint8
    observables: np.ndarray  # (shots,) uint8


def _sample_chunk_frame(exp: MemoryExperiment, shots: int, rng: np.random.Generator) -> SampleBatch:
    events = sample_events(exp, shots, rng)
    dets, obs = run_frames(exp, shots, _events_injector(exp, events, shots))
    return SampleBatch(unpack_shots(dets, shots), unpack_shots(obs[None, :], shots)[:, 0])


def _sample_chunk_sparse(
    exp: MemoryExperiment, shots: int, rng: np.random.Generator, table: SignatureTable
) -> SampleBatch:
    events = sample_events(exp, shots, rng)
    syn = np.zeros((shots, table.words), dtype=np.uint64)
    full_cache: dict[int, np.ndarray] = {}
    for loc, (pos, q) in enumerate(events):
        if len(pos) == 0:
            continue
        sig = full_cache.get(loc)
        if sig is None:
            sig = full_cache[loc] = table.full(loc)
        np.bitwise_xor.at(syn, pos, sig[q])
    bits = np.unpackbits(syn.view(np.uint8), axis=1, bitorder="little")[:, : table.n_detectors + 1]
    return SampleBatch(np.ascontiguousarray(bits[:, :-1]), np.ascontiguousarray(bits[:, -1]))


def chunk_sizes(shots: int, chunk: int = CHUNK_SHOTS) -> list[int]:
    full, rest = divmod(int(shots), chunk)
    return [chunk] * full + ([rest] if rest else [])


def sample(
    exp: MemoryExperiment,
    shots: int,
    seed: int,
    method: str = "sparse",
    chunk: int = CHUNK_SHOTS,
    table: SignatureTable | None = None,
) -> SampleBatch:
    """Sample detector and observable flips; identical across methods for one seed."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    parts = [sample_chunk(exp, n, seed, k, method, table) for k, n in enumerate(chunk_sizes(shots, chunk))]
    return SampleBatch(
        np.concatenate([p.detectors for p in parts]), np.concatenate([p.observables for p in parts])
    )


def sample_chunk(
    exp: MemoryExperiment, shots: int, seed: int, index: int, method: str = "sparse",
    table: SignatureTable | None = None,
) -> SampleBatch:
    rng = chunk_rng(seed, index)
    if method == "frame":
        return _sample_chunk_frame(exp, shots, rng)
    if method == "sparse":
        return _sample_chunk_sparse(exp, shots, rng, table or signature_table(exp))
    raise ValueError(f"unknown sampling method {method!r}")


# --------------------------------------------------------------------------
# detector error model


@dataclass(frozen=True)
class Hyperedge:
    probability: float
    detectors: tuple[int, ...]
    logical: bool


@dataclass(frozen=True)
class DetectorErrorModel:
    detectors: tuple[Detector, ...]
    hyperedges: tuple[Hyperedge, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def to_text(self) -> str:
        lines = [f"# {json.dumps(self.meta, sort_keys=True)}"]
        for k, d in enumerate(self.detectors):
            lines.append(f"detector D{k} kind={d.kind} round={d.round} stabilizer={d.stabilizer}")
        for h in self.hyperedges:
            targets = " ".join(f"D{t}" for t in h.detectors) + (" L0" if h.logical else "")
            lines.append(f"error({h.probability!r}) {targets}".rstrip())
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def xor_combine(p1: float, p2: float) -> float:
    return p1 * (1 - p2) + p2 * (1 - p1)


def _decode_signature(words: np.ndarray, n_det: int) -> tuple[tuple[int, ...], bool]:
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")[: n_det + 1]
    return tuple(int(i) for i in np.flatnonzero(bits[:n_det])), bool(bits[n_det])


def detector_error_model(exp: MemoryExperiment, table: SignatureTable | None = None) -> DetectorErrorModel:
    """Hyperedges from every nonzero channel entry at every location.

    Pauli outcomes at one location are mutually exclusive, so entries with
    equal signature add; independent locations combine by XOR probability.
    """
    for w, ch in exp.channels.items():
        if ch.probs[1:].max(initial=0.0) >= 0.5:
            raise ValueError(f"weight-{w} channel has a Pauli probability >= 1/2")
    table = table or signature_table(exp)
    merged: dict[bytes, float] = {}
    keys: dict[bytes, np.ndarray] = {}
    for loc, (_, s) in enumerate(exp.locations()):
        ch = exp.channel_for(exp.layout.stabilizers[s])
        idx = np.flatnonzero(ch.probs[1:] > 0) + 1
        if len(idx) == 0:
            continue
        sigs = table.full(loc)[idx]
        local: dict[bytes, float] = {}
        for sig, p in zip(sigs, ch.probs[idx]):
            if not sig.any():
                continue
            key = sig.tobytes()
            local[key] = local.get(key, 0.0) + float(p)
            keys.setdefault(key, sig)
        for key, p in local.items():
            merged[key] = xor_combine(merged.get(key, 0.0), p)
    edges = []
    for key in sorted(merged):
        p = merged[key]
        if p <= 0:
            continue
        if p > 0.5:
            raise ValueError(f"merged hyperedge probability {p:.3f} exceeds 1/2")
        dets, logical = _decode_signature(keys[key], exp.n_detectors)
        edges.append(Hyperedge(p, dets, logical))
    meta = {"d": exp.layout.d, "basis": exp.basis, "rounds": exp.rounds, "circuit": exp.circuit_hash()}
    return DetectorErrorModel(exp.detectors, tuple(edges), meta)


# --------------------------------------------------------------------------
# binary sample dumps


def write_samples(path: str | Path, batch: SampleBatch) -> None:
    """Shot-major dump: magic, version, shots, detectors, then per shot the packed detector+observable bits."""
    shots, n_det = batch.detectors.shape
    bits = np.concatenate([batch.detectors, batch.observables[:, None]], axis=1)
    packed = np.packbits(bits, axis=1, bitorder="little")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC + struct.pack("<HQI", SAMPLE_VERSION, shots, n_det))
        fh.write(packed.tobytes())


def read_samples(path: str | Path) -> SampleBatch:
    with open(path, "rb") as fh:
        head = fh.read(4 + 14)
        if head[:4] != SAMPLE_MAGIC:
            raise ValueError("not a sample dump")
        version, shots, n_det = struct.unpack("<HQI", head[4:])
        if version != SAMPLE_VERSION:
            raise ValueError(f"unsupported sample dump version {version}")
        row = (n_det + 1 + 7) // 8
        data = np.frombuffer(fh.read(), dtype=np.uint8).reshape(shots, row)
    bits = np.unpackbits(data, axis=1, bitorder="little")[:, : n_det + 1]
    return SampleBatch(np.ascontiguousarray(bits[:, :-1]), np.ascontiguousarray(bits[:, -1]))
