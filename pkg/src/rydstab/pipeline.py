"""Shared stages between the command line and the test-suite.

Unit-gamma first-order rates are the expensive physics product; they are
cached on disk keyed by a hash of the pulse schedule and quadrature settings,
and rescaled to any gamma.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channels import PauliChannel, channel_for_boundary, extract_first_order, first_order_rates
from .decoder import LogicalErrorRate, logical_error_rate
from .dynamics import BlockadeModel
from .protocols import ProtocolSchedule, atomic_write_text, schedule_for
from .surface import build_layout, build_memory_circuit

WEIGHTS = (4, 2)
RATES_VERSION = 2


def canonical_protocol(name: str) -> str:
    return name.upper().replace("-", "_")


def schedule_hash(schedule: ProtocolSchedule) -> str:
    text = json.dumps(schedule.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def plaquette_schedule(protocol: str, blockade, n_data: int, cache_dir=None) -> ProtocolSchedule:
    sched = schedule_for(canonical_protocol(protocol), blockade, cache_dir=cache_dir)
    return sched if n_data == 4 else sched.truncated(n_data)


def unit_rates(
    protocol: str,
    blockade,
    n_data: int,
    cache_dir: str | Path | None = None,
    *,
    order: int = 4,
    max_len: float = 0.5,
) -> tuple[np.ndarray, dict]:
    """First-order rates per unit gamma for a plaquette with ``n_data`` data atoms."""
    model = BlockadeModel.parse(blockade)
    sched = plaquette_schedule(protocol, model, n_data, cache_dir)
    sched.check_blockade(model)
    key = {
        "version": RATES_VERSION,
        "schedule": schedule_hash(sched),
        "blockade": model.value,
        "order": order,
        "max_len": max_len,
    }
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / "rates" / f"{sched.name}_{model.value}_w{n_data}_{digest}.json"
        if path.exists():
            data = json.loads(path.read_text())
            return np.array(data["rates"], dtype=float), data["meta"]
    rates, info = first_order_rates(sched, model, order=order, max_len=max_len)
    meta = dict(key, protocol=sched.name, n_data=n_data, digest=digest, **info)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, json.dumps({"meta": meta, "rates": [repr(float(r)) for r in rates]}))
        # stored as text so the values round-trip exactly
        data = json.loads(path.read_text())
        rates = np.array(data["rates"], dtype=float)
    return rates, meta


def identity_channel(n: int) -> PauliChannel:
    probs = np.zeros(4**n)
    probs[0] = 1.0
    return PauliChannel(n, probs, {"method": "identity"})


def plaquette_channels(
    protocol: str,
    blockade,
    gamma: float,
    cache_dir: str | Path | None = None,
    method: str = "first_order",
) -> dict[int, PauliChannel]:
    """Channels for weight-4 and weight-2 stabilizers at decay rate ``gamma``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    model = BlockadeModel.parse(blockade)
    out = {}
    for w in WEIGHTS:
        if gamma == 0:
            plaquette_schedule(protocol, model, w, cache_dir).check_blockade(model)
            out[w] = identity_channel(w + 1)
        elif method == "first_order":
            rates, meta = unit_rates(protocol, model, w, cache_dir)
            sched = plaquette_schedule(protocol, model, w, cache_dir)
            out[w] = extract_first_order(sched, model, gamma, rates=rates)
            out[w].meta.update(rates_digest=meta["digest"])
        elif method == "exact":
            sched = schedule_for(canonical_protocol(protocol), model, cache_dir=cache_dir)
            out[w] = channel_for_boundary(sched, model, gamma, n_data=w, method="exact")
        else:
            raise ValueError(f"unknown extraction method {method!r}")
    return out


def cell_seed(seed: int, protocol: str, blockade: str, basis: str, d: int, gamma: float) -> int:
    """Per-cell seed from the run seed and the cell coordinates."""
    key = f"{canonical_protocol(protocol)}|{BlockadeModel.parse(blockade).value}|{basis}|{d}|{gamma!r}"
    return int((int(seed) * 1_000_003 + zlib.crc32(key.encode())) % (2**63))


@dataclass(frozen=True)
class CellResult:
    protocol: str
    blockade: str
    basis: str
    d: int
    gamma: float
    rate: LogicalErrorRate
    seed: int

    def row(self) -> dict:
        return {
            "protocol": self.protocol,
            "blockade": self.blockade,
            "basis": self.basis,
            "d": self.d,
            "gamma": repr(float(self.gamma)),
            "shots": self.rate.shots,
            "failures": self.rate.failures,
            "p_L": repr(self.rate.p_L),
            "ci_low": repr(self.rate.ci_low),
            "ci_high": repr(self.rate.ci_high),
            "seed": self.seed,
        }


def simulate_cell(
    protocol: str,
    blockade,
    d: int,
    gamma: float,
    basis: str,
    shots: int,
    seed: int,
    *,
    cache_dir: str | Path | None = None,
    workers: int = 1,
    rounds: int | None = None,
    method: str = "first_order",
) -> CellResult:
    model = BlockadeModel.parse(blockade)
    channels = plaquette_channels(protocol, model, gamma, cache_dir, method)
    exp = build_memory_circuit(build_layout(d), basis, channels, rounds=rounds)
    s = cell_seed(seed, protocol, model.value, basis, d, gamma)
    rate = logical_error_rate(exp, shots, s, workers=workers)
    return CellResult(canonical_protocol(protocol), model.value, basis, d, float(gamma), rate, s)
