"""Pauli-twirled error channels of a plaquette stabilizer measurement.

Two routes are implemented. ``extract_exact`` propagates every Pauli input
through the master equation, applies the removal channel and undoes the ideal
gate. ``extract_first_order`` integrates single decay events over time using
decay-free propagators only, which makes every non-identity rate linear in
gamma.

The channel is expressed in the frame before the entangling layer: the noisy
plaquette operation equals ``U_ideal o N`` with ``N`` the Pauli channel.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .dynamics import (
    BlockadeModel,
    Propagator,
    embed_computational,
    lindblad_propagate,
    removal_kraus,
    restricted_basis,
)
from .pauli import (
    PauliString,
    commutation_transform,
    enumerate_paulis,
    pauli_coefficients,
)
from .protocols import ProtocolSchedule, atomic_write_text

NEGATIVE_TOL = 1e-10
NORMALIZATION_TOL = 1e-6
ROUNDOFF_FLOOR = 1e-14  # relative to the largest rate; genuine rates sit many decades above
FORMAT_VERSION = 1


class ChannelError(ValueError):
    """Invalid channel data or a failed extraction check."""


class QuadratureError(RuntimeError):
    """Decay-time quadrature did not converge under node doubling."""


@dataclass(frozen=True)
class PauliChannel:
    """Probabilities lambda_Q indexed canonically by Pauli string."""

    n: int
    probs: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=float)
        if probs.shape != (4**self.n,):
            raise ChannelError(f"expected {4**self.n} probabilities, got {probs.shape}")
        if probs.min() < -NEGATIVE_TOL:
            raise ChannelError(f"negative probability {probs.min():.3e}")
        probs = np.clip(probs, 0.0, None)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, key: PauliString | str) -> float:
        p = key if isinstance(key, PauliString) else PauliString(key)
        if p.n != self.n:
            raise KeyError(key)
        return float(self.probs[p.index])

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, PauliChannel)
            and self.n == other.n
            and np.array_equal(self.probs, other.probs)
        )

    @property
    def error_probability(self) -> float:
        return float(self.probs[1:].sum())

    def as_dict(self) -> dict[str, float]:
        return {str(p): float(self.probs[p.index]) for p in enumerate_paulis(self.n)}

    def support(self, threshold: float = 0.0) -> set[str]:
        return {str(p) for p in enumerate_paulis(self.n)[1:] if self.probs[p.index] > threshold}

    def permuted(self, perm: Iterable[int]) -> "PauliChannel":
        """Relabel qubits: new qubit j carries old qubit perm[j]."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n)):
            raise ValueError("perm must be a permutation")
        t = self.probs.reshape((4,) * self.n).transpose(perm)
        return PauliChannel(self.n, t.reshape(-1), dict(self.meta))


def channel_from_rates(rates: np.ndarray, gamma: float, meta: Mapping) -> PauliChannel:
    """Scale unit-gamma non-identity rates and fill in lambda_I."""
    probs = np.asarray(rates, dtype=float) * gamma
    probs[0] = 0.0
    total = probs.sum()
    if total > 1:
        raise ChannelError(f"first-order error probability {total:.3f} exceeds 1")
    probs[0] = 1.0 - total
    n = (len(probs).bit_length() - 1) // 2
    return PauliChannel(n, probs, dict(meta, gamma=gamma))


# --------------------------------------------------------------------------
# exact route


def twirl_from_map(error_map: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    """Diagonal of the process matrix of a qubit map, from its action on Paulis.

    ``error_map`` takes a stack of Pauli matrices (4**n, 2**n, 2**n) and returns
    their images. With t_R = tr(R E(R)), lambda_Q = sum_R s(R, Q) t_R / 8**n.
    """
    paulis = np.stack([p.matrix() for p in enumerate_paulis(n)])
    images = error_map(paulis)
    t = np.real(np.einsum("rab,rba->r", paulis, images))
    return commutation_transform(t) / 8**n


def _ideal_comp(prop: Propagator) -> np.ndarray:
    nq = prop.basis.n_computational
    return prop.full[:nq, :nq]


def extract_exact(
    schedule: ProtocolSchedule,
    blockade: BlockadeModel | str,
    gamma: float,
    *,
    batch_size: int = 64,
) -> PauliChannel:
    """Pauli channel from the full master equation plus removal channel."""
    model = schedule.check_blockade(blockade)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    pulses = schedule.plaquette_pulses()
    n = len(pulses)
    basis = restricted_basis(model, n)
    uc = _ideal_comp(Propagator(pulses, model))
    kraus = np.stack([k for _, k in removal_kraus(model, n)])

    def error_map(paulis: np.ndarray) -> np.ndarray:
        out = np.empty_like(paulis)
        for s in range(0, len(paulis), batch_size):
            rho = embed_computational(paulis[s : s + batch_size], basis)
            rho = lindblad_propagate(rho, pulses, model, gamma)
            removed = np.einsum("kai,bij,kcj->bac", kraus, rho, kraus, optimize=True)
            out[s : s + batch_size] = uc.conj().T @ removed @ uc
        return out

    probs = twirl_from_map(error_map, n)
    if abs(probs.sum() - 1) > NORMALIZATION_TOL:
        raise ChannelError(f"exact channel normalization off by {probs.sum() - 1:.2e}")
    meta = {
        "protocol": schedule.name,
        "blockade": model.value,
        "gamma": gamma,
        "method": "exact",
        "n": n,
        "truncated": bool(schedule.meta.get("truncated", False)),
    }
    return PauliChannel(n, probs, meta)


# --------------------------------------------------------------------------
# first-order route


@dataclass(frozen=True)
class DecayEvent:
    atom: int
    branch: int
    time: float
    kraus: str

    def __post_init__(self) -> None:
        if self.branch not in (0, 1):
            raise ValueError("branch must be 0 or 1")
        if self.time < 0:
            raise ValueError("decay time must be non-negative")


class DecayKernel:
    """Decay-event Kraus operators E = U_c^dag D_k U(t,T) |q_i><r_i| U(0,t) at unit gamma.

    The sqrt(gamma/2) factor of the jump operator is left out.
    """

    def __init__(self, pulses, model: BlockadeModel | str):
        self.model = BlockadeModel.parse(model)
        self.prop = Propagator(pulses, self.model)
        self.basis = self.prop.basis
        self.n = self.basis.n_atoms
        self.nq = self.basis.n_computational
        self.uc_dag = _ideal_comp(self.prop).conj().T
        entries = removal_kraus(self.model, self.n)
        self.kraus_keys = [key for key, _ in entries]
        self.kraus = np.stack([k for _, k in entries])
        # U_c^dag D_k, flattened so each decay event costs one matrix product
        self._dressed = (self.uc_dag @ self.kraus).reshape(-1, self.basis.dim)
        self.jumps = {
            (i, q): self.basis.transition(i, "r", str(q))
            for i in range(self.n)
            for q in (0, 1)
        }
        self._r_atoms = [self.basis.rydberg_projector(i).astype(bool) for i in range(self.n)]

    @property
    def duration(self) -> float:
        return self.prop.duration

    def operators(self, t: float, atoms: Iterable[int] | None = None, floor: float = 1e-13):
        """Yield (atom, branch, kraus_keys, stack of qubit operators) at decay time t."""
        u0t = self.prop.at(t)
        utt = self.prop.full @ u0t.conj().T
        a = u0t[:, : self.nq]
        for i in atoms if atoms is not None else range(self.n):
            if np.abs(a[self._r_atoms[i]]).max(initial=0.0) < floor:
                continue
            for q in (0, 1):
                b = utt @ (self.jumps[i, q] @ a)
                ops = (self._dressed @ b).reshape(-1, self.nq, self.nq)
                keep = np.abs(ops).reshape(len(ops), -1).max(axis=1) > floor
                if keep.any():
                    keys = [k for k, m in zip(self.kraus_keys, keep) if m]
                    yield i, q, keys, ops[keep]

    def event_operator(self, event: DecayEvent) -> np.ndarray:
        idx = self.kraus_keys.index(event.kraus)
        u0t = self.prop.at(event.time)
        utt = self.prop.full @ u0t.conj().T
        b = utt @ self.jumps[event.atom, event.branch] @ u0t[:, : self.nq]
        return self.uc_dag @ self.kraus[idx] @ b

    def density(self, t: float) -> np.ndarray:
        """sum over events at time t of |tr(Q E)|^2, per Q (unit gamma, without 1/2 and 4**-n)."""
        acc = np.zeros(4**self.n)
        for _, _, _, ops in self.operators(t):
            acc += (np.abs(pauli_coefficients(ops)) ** 2).sum(axis=0)
        return acc


def _quadrature_nodes(breakpoints: np.ndarray, order: int, max_len: float) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes aligned with the constant pieces."""
    x, w = np.polynomial.legendre.leggauss(order)
    ts, ws = [], []
    for a, b in zip(breakpoints[:-1], breakpoints[1:]):
        m = max(1, int(np.ceil((b - a) / max_len)))
        edges = np.linspace(a, b, m + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            half = 0.5 * (hi - lo)
            ts.append(lo + half * (x + 1))
            ws.append(half * w)
    return np.concatenate(ts), np.concatenate(ws)


def first_order_rates(
    schedule: ProtocolSchedule,
    blockade: BlockadeModel | str,
    *,
    order: int = 4,
    max_len: float = 0.5,
    check: bool = True,
    rel_tol: float = 1e-3,
) -> tuple[np.ndarray, dict]:
    """Non-identity lambda_Q per unit gamma from single decay events.

    With ``check`` the integral is repeated with doubled node count and the
    finer result is returned; a relative change above ``rel_tol`` in any
    non-negligible rate raises QuadratureError.
    """
    model = schedule.check_blockade(blockade)
    kernel = DecayKernel(schedule.plaquette_pulses(), model)
    bps = kernel.prop.timeline.times

    def integrate(k: int) -> np.ndarray:
        ts, ws = _quadrature_nodes(bps, k, max_len)
        acc = np.zeros(4**kernel.n)
        for t, w in zip(ts, ws):
            acc += w * kernel.density(t)
        rates = acc / (2 * 4**kernel.n)
        rates[0] = 0.0
        rates[rates < ROUNDOFF_FLOOR * rates.max(initial=0.0)] = 0.0
        return rates

    rates = integrate(order)
    info = {"quadrature": f"gauss-legendre-{order}", "max_len": max_len}
    if check:
        fine = integrate(2 * order)
        floor = 1e-9 * fine.max(initial=0.0)
        big = fine > floor
        change = np.abs(fine - rates)[big] / fine[big]
        worst = float(change.max(initial=0.0))
        if worst > rel_tol:
            raise QuadratureError(f"node doubling changed a rate by {worst:.2e} (relative)")
        rates = fine
        info = {"quadrature": f"gauss-legendre-{2 * order}", "max_len": max_len, "doubling_change": worst}
    return rates, info


def extract_first_order(
    schedule: ProtocolSchedule,
    blockade: BlockadeModel | str,
    gamma: float,
    *,
    order: int = 4,
    max_len: float = 0.5,
    check: bool = True,
    rates: np.ndarray | None = None,
) -> PauliChannel:
    """First-order Pauli channel; pass precomputed unit-gamma ``rates`` to rescale."""
    model = schedule.check_blockade(blockade)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    info: dict = {}
    if rates is None:
        rates, info = first_order_rates(schedule, model, order=order, max_len=max_len, check=check)
    meta = {
        "protocol": schedule.name,
        "blockade": model.value,
        "method": "first_order",
        "n": schedule.n_atoms(),
        "truncated": bool(schedule.meta.get("truncated", False)),
        **info,
    }
    return channel_from_rates(rates, gamma, meta)


def channel_for_boundary(
    schedule: ProtocolSchedule,
    blockade: BlockadeModel | str,
    gamma: float,
    n_data: int = 2,
    method: str = "first_order",
    **kwargs,
) -> PauliChannel:
    """Channel of a plaquette with ``n_data`` data atoms (2 for boundary stabilizers)."""
    if n_data not in (2, 4):
        raise ValueError("n_data must be 2 or 4")
    sched = schedule if n_data == 4 else schedule.truncated(n_data)
    if method == "exact":
        return extract_exact(sched, blockade, gamma, **kwargs)
    if method == "first_order":
        return extract_first_order(sched, blockade, gamma, **kwargs)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# persistence


def _probs_text(probs: Mapping[str, str]) -> str:
    return json.dumps(probs, sort_keys=True, separators=(",", ":"))


def _checksum(probs: Mapping[str, str]) -> str:
    return hashlib.sha256(_probs_text(probs).encode()).hexdigest()


def channel_to_dict(ch: PauliChannel) -> dict:
    probs = {str(p): repr(float(ch.probs[p.index])) for p in enumerate_paulis(ch.n)}
    meta = dict(ch.meta, n=ch.n)
    return {"version": FORMAT_VERSION, "meta": meta, "probs": probs, "checksum": _checksum(probs)}


def channel_from_dict(data: Mapping) -> PauliChannel:
    if "meta" not in data:
        raise ChannelError("channel file has no meta section")
    if "probs" not in data:
        raise ChannelError("channel file has no probs section")
    meta = dict(data["meta"])
    n = int(meta.get("n", 0))
    if not 1 <= n <= 6:
        raise ChannelError(f"invalid qubit count {n}")
    raw = data["probs"]
    expected = {str(p) for p in enumerate_paulis(n)}
    unknown = set(raw) - expected
    if unknown:
        raise ChannelError(f"unknown Pauli keys: {sorted(unknown)[:3]}")
    missing = expected - set(raw)
    if missing:
        raise ChannelError(f"missing Pauli keys: {sorted(missing)[:3]}")
    if "checksum" in data and data["checksum"] != _checksum({k: str(v) for k, v in raw.items()}):
        raise ChannelError("checksum mismatch")
    probs = np.zeros(4**n)
    for p in enumerate_paulis(n):
        probs[p.index] = float(raw[str(p)])
    return PauliChannel(n, probs, meta)


def save_channel(ch: PauliChannel, path: str | os.PathLike) -> None:
    atomic_write_text(Path(path), json.dumps(channel_to_dict(ch), indent=1))


def load_channel(path: str | os.PathLike) -> PauliChannel:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ChannelError(f"malformed channel file: {exc}") from exc
    return channel_from_dict(data)
