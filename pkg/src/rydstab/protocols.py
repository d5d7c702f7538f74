"""Gate protocols for a plaquette stabilizer measurement.

Two-atom protocols (TO, NH, NP, PI_2PI_PI) are applied sequentially between
the ancilla (atom 0) and each data atom; SIM is one global five-atom gate.
Symmetric phase-only pulses (TO, NH) are found by gradient-based optimal
control on the two reduced two-level systems of a symmetric two-atom drive.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .dynamics import (
    BlockadeModel,
    GateAngles,
    Propagator,
    Pulse,
    restricted_basis,
    verify_gate,
)

log = logging.getLogger(__name__)

PROTOCOLS = ("TO", "NH", "SIM", "NP", "PI_2PI_PI")
TO_THETA = 2.17
NH_THETA = np.pi / 2
NP_TAU1_GUESS = 3.57
NP_T_GUESS = 9.20
DEFAULT_SEGMENTS = 100
DEFAULT_ORDER = (1, 2, 3, 4)  # NW, NE, SW, SE


class ConfigurationError(ValueError):
    """An inapplicable protocol/blockade combination or bad protocol option."""


class SynthesisError(RuntimeError):
    """Optimal control or parameter refinement did not converge."""


@dataclass(frozen=True)
class GateStep:
    """One gate: the atoms it drives (ancilla first) and their pulses."""

    atoms: tuple[int, ...]
    pulses: tuple[Pulse, ...]

    def __post_init__(self) -> None:
        if len(self.atoms) != len(self.pulses) or not self.atoms:
            raise ValueError("need one pulse per gate atom")
        durs = {round(p.duration, 9) for p in self.pulses}
        if len(durs) != 1:
            raise ValueError("pulses within one gate must have equal duration")

    @property
    def duration(self) -> float:
        return self.pulses[0].duration


@dataclass(frozen=True)
class ProtocolSchedule:
    name: str
    gates: tuple[GateStep, ...]
    compensation: GateAngles
    applicable_blockades: frozenset[BlockadeModel]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.name not in PROTOCOLS:
            raise ConfigurationError(f"unknown protocol {self.name!r}")

    @property
    def duration(self) -> float:
        return float(sum(g.duration for g in self.gates))

    def check_blockade(self, blockade: BlockadeModel | str) -> BlockadeModel:
        model = BlockadeModel.parse(blockade)
        if model not in self.applicable_blockades:
            raise ConfigurationError(f"{self.name} is not applicable to {model.value} blockade")
        return model

    def truncated(self, n_data: int) -> "ProtocolSchedule":
        """Schedule restricted to data atoms 1..n_data (boundary plaquettes)."""
        if not 1 <= n_data <= 4:
            raise ValueError("n_data must be in [1, 4]")
        keep = set(range(n_data + 1))
        gates = []
        for g in self.gates:
            sel = [k for k, a in enumerate(g.atoms) if a in keep]
            if len(sel) < 2:
                continue
            gates.append(GateStep(tuple(g.atoms[k] for k in sel), tuple(g.pulses[k] for k in sel)))
        meta = dict(self.meta, n_data=n_data, truncated=n_data < 4)
        return ProtocolSchedule(self.name, tuple(gates), self.compensation, self.applicable_blockades, meta)

    def n_atoms(self) -> int:
        return 1 + max(max(g.atoms) for g in self.gates)

    def plaquette_pulses(self) -> list[Pulse]:
        """Per-atom pulses over the whole schedule, idle-padded outside each gate."""
        n = self.n_atoms()
        per_atom: list[Pulse | None] = [None] * n
        for g in self.gates:
            drive = dict(zip(g.atoms, g.pulses))
            for a in range(n):
                p = drive.get(a, Pulse.idle(g.duration))
                per_atom[a] = p if per_atom[a] is None else per_atom[a].then(p)
        return [_merge_idle(p) for p in per_atom]

    def gate_pulses(self, k: int = 0) -> list[Pulse]:
        return list(self.gates[k].pulses)

    def verify(self, tol: float = 1e-6) -> float:
        """Gate-equivalence fidelity of every gate at gamma=0 (minimum)."""
        worst = 1.0
        for g in self.gates:
            prop = Propagator(list(g.pulses), BlockadeModel.DATA_ANCILLA)
            nq = 2 ** len(g.atoms)
            fid, _ = verify_gate(prop.full[:nq, :nq], tol=tol)
            worst = min(worst, fid)
        return worst

    def rydberg_time(self, blockade: BlockadeModel | str = BlockadeModel.DATA_ANCILLA) -> float:
        """Mean integrated Rydberg population of the whole plaquette schedule."""
        model = self.check_blockade(blockade)
        return Propagator(self.plaquette_pulses(), model).rydberg_time()

    def to_dict(self, blockade: BlockadeModel | str | None = None) -> dict:
        out = {
            "protocol": self.name,
            "applicable_blockades": sorted(b.value for b in self.applicable_blockades),
            "compensation": {"theta_a": self.compensation.theta_a, "theta_d": self.compensation.theta_d},
            "meta": _jsonable(self.meta),
            "gates": [
                {"atoms": list(g.atoms), "pulses": [p.to_dict() for p in g.pulses]} for g in self.gates
            ],
        }
        if blockade is not None:
            out["blockade"] = BlockadeModel.parse(blockade).value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolSchedule":
        try:
            gates = tuple(
                GateStep(tuple(g["atoms"]), tuple(Pulse.from_dict(p) for p in g["pulses"]))
                for g in data["gates"]
            )
            comp = GateAngles(data["compensation"]["theta_a"], data["compensation"]["theta_d"])
            blockades = frozenset(BlockadeModel.parse(b) for b in data["applicable_blockades"])
            return cls(data["protocol"], gates, comp, blockades, dict(data.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed schedule file: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _merge_idle(p: Pulse) -> Pulse:
    """Merge adjacent segments with identical amplitude and phase."""
    d, a, ph = [p.durations[0]], [p.amplitudes[0]], [p.phases[0]]
    for dd, aa, pp in zip(p.durations[1:], p.amplitudes[1:], p.phases[1:]):
        same_phase = aa == 0 and a[-1] == 0 or pp == ph[-1]
        if aa == a[-1] and same_phase:
            d[-1] += dd
        else:
            d.append(dd)
            a.append(aa)
            ph.append(pp)
    return Pulse(tuple(d), tuple(a), tuple(ph))


def save_schedule(schedule: ProtocolSchedule, path: str | os.PathLike, blockade=None) -> None:
    atomic_write_text(Path(path), json.dumps(schedule.to_dict(blockade), indent=1))


def load_schedule(path: str | os.PathLike) -> ProtocolSchedule:
    with open(path) as fh:
        return ProtocolSchedule.from_dict(json.load(fh))


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# fixed-form protocols


def _sequential(name, gate: Sequence[Pulse], angles, blockades, order, meta) -> ProtocolSchedule:
    order = tuple(order)
    if sorted(order) != [1, 2, 3, 4]:
        raise ConfigurationError("order must be a permutation of data atoms 1..4")
    gates = tuple(GateStep((0, j), tuple(gate)) for j in order)
    return ProtocolSchedule(name, gates, angles, frozenset(blockades), dict(meta, order=list(order)))


def pi_2pi_pi_gate() -> list[Pulse]:
    pi = np.pi
    # The second ancilla pulse carries phase pi so that |r0> and |r1> pick up
    # +1 and -1 and ancilla leakage passes through unchanged.
    anc = Pulse((pi, 2 * pi, pi), (1.0, 0.0, 1.0), (0.0, 0.0, pi))
    dat = Pulse((pi, 2 * pi, pi), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0))
    return [anc, dat]


def pi_2pi_pi_schedule(order: Sequence[int] = DEFAULT_ORDER) -> ProtocolSchedule:
    return _sequential(
        "PI_2PI_PI", pi_2pi_pi_gate(), GateAngles(0.0, np.pi),
        (BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL), order, {},
    )


def sim_schedule(n_data: int = 4) -> ProtocolSchedule:
    """Ancilla pi, all data 2 pi, ancilla pi, as one global gate."""
    anc, dat = pi_2pi_pi_gate()
    gate = GateStep(tuple(range(n_data + 1)), (anc,) + (dat,) * n_data)
    return ProtocolSchedule(
        "SIM", (gate,), GateAngles(0.0, np.pi),
        frozenset({BlockadeModel.DATA_ANCILLA}), {"n_data": n_data},
    )


def np_gate(tau1: float, total: float) -> list[Pulse]:
    """Ancilla drive/idle/drive (second pulse phase pi); data sign flips at tau2 and T - tau2."""
    tau2 = (total - 2 * np.pi) / 4
    if not (0 < tau1 < total / 2 and 0 < tau2 < total / 2):
        raise ConfigurationError(f"invalid NP timings tau1={tau1}, T={total}")
    anc = Pulse((tau1, total - 2 * tau1, tau1), (1.0, 0.0, 1.0), (0.0, 0.0, np.pi))
    dat = Pulse((tau2, total - 2 * tau2, tau2), (1.0, 1.0, 1.0), (0.0, np.pi, 0.0))
    return [anc, dat]


def _np_residuals(params: np.ndarray) -> np.ndarray:
    # Gate conditions: |11> -> |11> (theta_d = pi is then automatic) and |r1>
    # mapped onto itself, so ancilla leakage does not hop onto the data atom.
    basis = restricted_basis(BlockadeModel.ALL_TO_ALL, 2)
    ix = basis.index
    u = Propagator(np_gate(*params), BlockadeModel.ALL_TO_ALL).full
    vals = np.array([
        u[ix["11"], ix["11"]] - 1,
        u[ix["11"], ix["r1"]],
        u[ix["1r"], ix["r1"]],
    ])
    return np.concatenate([vals.real, vals.imag])


@dataclass(frozen=True)
class NPParameters:
    tau1: float
    total: float
    residual: float

    @property
    def tau2(self) -> float:
        return (self.total - 2 * np.pi) / 4


def refine_np_parameters(
    tau1: float = NP_TAU1_GUESS, total: float = NP_T_GUESS, tol: float = 1e-12
) -> NPParameters:
    sol = least_squares(
        _np_residuals, (tau1, total), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15
    )
    resid = float(np.abs(sol.fun).max())
    if resid > tol:
        raise SynthesisError(f"NP refinement did not converge (residual {resid:.2e})")
    return NPParameters(float(sol.x[0]), float(sol.x[1]), resid)


def np_schedule(order: Sequence[int] = DEFAULT_ORDER, params: NPParameters | None = None) -> ProtocolSchedule:
    params = params or refine_np_parameters()
    gate = np_gate(params.tau1, params.total)
    prop = Propagator(gate, BlockadeModel.ALL_TO_ALL)
    _, angles = verify_gate(prop.full[:4, :4])
    return _sequential(
        "NP", gate, angles, (BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL), order,
        {"tau1": params.tau1, "T": params.total, "tau2": params.tau2},
    )


# --------------------------------------------------------------------------
# symmetric optimal control


def _segment_unitaries(phi: np.ndarray, w: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Two-level (|1>, |r>) segment propagators for coupling w e^{i phi}/2 and their phi-derivatives."""
    c, s = np.cos(w * dt / 2), np.sin(w * dt / 2)
    e = np.exp(1j * phi)
    u = np.zeros((len(phi), 2, 2), dtype=complex)
    u[:, 0, 0] = c
    u[:, 1, 1] = c
    u[:, 1, 0] = -1j * s * e
    u[:, 0, 1] = -1j * s * e.conj()
    du = np.zeros_like(u)
    du[:, 1, 0] = s * e
    du[:, 0, 1] = -s * e.conj()
    return u, du


def _reduced_amplitudes(phi: np.ndarray, w: float, dt: float):
    """<1|U|1>, <r|U|1> of a reduced system and their gradients in every phase."""
    u, du = _segment_unitaries(phi, w, dt)
    n = len(phi)
    fwd = np.empty((n + 1, 2), dtype=complex)
    fwd[0] = (1, 0)
    for k in range(n):
        fwd[k + 1] = u[k] @ fwd[k]
    bwd = np.empty((n + 1, 2, 2), dtype=complex)  # rows <1|, <r| times later segments
    bwd[n] = np.eye(2)
    for k in range(n - 1, -1, -1):
        bwd[k] = bwd[k + 1] @ u[k]
    grad = np.einsum("kia,kab,kb->ik", bwd[1:], du, fwd[:-1])
    return fwd[n], grad


def _targets(phi: np.ndarray, duration: float, theta: float):
    # H1 = span{|01>, |0r>} with coupling Omega/2, H2 = span{|11>, |W+>} with
    # sqrt(2) Omega/2. Normalized so both equal 1 for the exact gate.
    dt = duration / len(phi)
    a1, g1 = _reduced_amplitudes(phi, 1.0, dt)
    a2, g2 = _reduced_amplitudes(phi, np.sqrt(2), dt)
    t1, t2 = np.exp(-1j * theta), -np.exp(-2j * theta)
    return a1 * t1, g1 * t1, a2 * t2, g2 * t2


def symmetric_infidelity(phi: np.ndarray, duration: float, theta: float) -> tuple[float, np.ndarray]:
    z1, g1, z2, g2 = _targets(phi, duration, theta)
    s = 1 + 2 * z1[0] + z2[0]
    fid = abs(s) ** 2 / 16
    dfid = 2 * np.real(np.conj(s) * (2 * g1[0] + g2[0])) / 16
    return 1 - fid, -dfid


def _gate_residuals(phi: np.ndarray, duration: float, theta: float):
    # Diagonal targets and the leakage amplitudes, both linear in the error,
    # so Gauss-Newton converges to machine precision in the amplitudes.
    z1, g1, z2, g2 = _targets(phi, duration, theta)
    vals = np.array([z1[0] - 1, z1[1], z2[0] - 1, z2[1]])
    grads = np.stack([g1[0], g1[1], g2[0], g2[1]])
    return np.concatenate([vals.real, vals.imag]), np.vstack([grads.real, grads.imag])


def _polish(phi: np.ndarray, duration: float, theta: float, iters: int = 30) -> np.ndarray:
    """Gauss-Newton with minimum-norm steps on the gate residuals."""
    x = np.array(phi, dtype=float)
    r, jac = _gate_residuals(x, duration, theta)
    for _ in range(iters):
        if np.abs(r).max() < 1e-15:
            break
        trial = x + np.linalg.lstsq(jac, -r, rcond=None)[0]
        r_new, jac_new = _gate_residuals(trial, duration, theta)
        if np.abs(r_new).max() >= np.abs(r).max():
            break
        x, r, jac = trial, r_new, jac_new
    return x


def _initial_phases(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.linspace(0, 1, n)
    return (
        rng.uniform(-3, 3) * np.cos(2 * np.pi * t * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
        + rng.uniform(-2, 2) * t
    )


@dataclass(frozen=True)
class SynthesisResult:
    pulse: Pulse
    infidelity: float
    rydberg_time: float
    theta: float
    attempts: int


def optimize_at_duration(
    theta: float,
    duration: float,
    *,
    n_segments: int = DEFAULT_SEGMENTS,
    starts: int = 20,
    max_iters: int = 3000,
    tol: float = 1e-10,
    seed: int = 0,
    keep_all: bool = False,
) -> SynthesisResult | None:
    """Multi-start phase optimization at a fixed duration.

    Returns the converged pulse with the smallest Rydberg time among successful
    starts (or the first success when ``keep_all`` is False), or None.
    """
    rng = np.random.default_rng([seed, int(round(duration * 1e6))])
    best: SynthesisResult | None = None
    for attempt in range(1, starts + 1):
        x0 = _initial_phases(rng, n_segments)
        res = minimize(
            symmetric_infidelity, x0, args=(duration, theta), jac=True, method="L-BFGS-B",
            options={"maxiter": max_iters, "ftol": 1e-16, "gtol": 1e-12},
        )
        if res.fun > max(tol, 1e-8):
            continue
        phi = _polish(res.x, duration, theta)
        infid = float(symmetric_infidelity(phi, duration, theta)[0])
        if infid > tol:
            continue
        pulse = Pulse.from_phases(duration, np.mod(phi, 2 * np.pi))
        t_r = Propagator([pulse, pulse], BlockadeModel.ALL_TO_ALL).rydberg_time()
        cand = SynthesisResult(pulse, infid, t_r, theta, attempt)
        if best is None or cand.rydberg_time < best.rydberg_time:
            best = cand
        if not keep_all:
            break
    return best


def synthesize_symmetric(
    theta: float,
    max_iters: int = 3000,
    tol: float = 1e-10,
    *,
    duration: float | None = None,
    bracket: tuple[float, float] = (6.0, 12.0),
    granularity: float = 0.01,
    n_segments: int = DEFAULT_SEGMENTS,
    starts: int = 20,
    seed: int = 0,
) -> SynthesisResult:
    """Constant-amplitude, phase-only symmetric pulse realizing V_CZ with theta_a = theta_d = theta.

    With ``duration`` given, optimizes at that duration only. Otherwise bisects
    the duration to ``granularity`` and, at the shortest successful duration,
    keeps the start with the smallest Rydberg time.
    """
    if not 0 < theta < 2 * np.pi:
        raise ValueError("theta must lie in (0, 2 pi)")
    kw = dict(n_segments=n_segments, starts=starts, max_iters=max_iters, tol=tol, seed=seed)
    if duration is not None:
        res = optimize_at_duration(theta, duration, **kw)
        if res is None:
            raise SynthesisError(f"no convergent pulse at duration {duration}")
        return res
    lo, hi = bracket
    while optimize_at_duration(theta, hi, **kw) is None:
        lo, hi = hi, hi * 1.5
        if hi > 40:
            raise SynthesisError(f"no convergent pulse for theta={theta}")
    while hi - lo > granularity:
        mid = 0.5 * (lo + hi)
        ok = optimize_at_duration(theta, mid, **kw) is not None
        log.info("theta=%.4f duration=%.4f converged=%s", theta, mid, ok)
        lo, hi = (lo, mid) if ok else (mid, hi)
    res = optimize_at_duration(theta, hi, keep_all=True, **kw)
    if res is None:
        raise SynthesisError(f"bisection end point {hi} did not reconverge")
    return res


def symmetric_schedule(
    name: str, pulse: Pulse, theta: float, order: Sequence[int] = DEFAULT_ORDER
) -> ProtocolSchedule:
    return _sequential(
        name, [pulse, pulse], GateAngles(theta, theta),
        (BlockadeModel.DATA_ANCILLA, BlockadeModel.ALL_TO_ALL), order,
        {"theta": theta, "n_segments": pulse.n_segments, "gate_duration": pulse.duration},
    )


# --------------------------------------------------------------------------
# dispatch and cache

_SYMMETRIC_THETA = {"TO": TO_THETA, "NH": NH_THETA}


def _cache_file(cache_dir: Path, name: str, blockade: BlockadeModel) -> Path:
    return cache_dir / f"{name}_{blockade.value}.json"


def _packaged(name: str) -> dict | None:
    try:
        text = resources.files("rydstab").joinpath(f"data/{name}.json").read_text()
    except (FileNotFoundError, OSError):
        return None
    return json.loads(text)


def _matches(data: dict, theta: float, n_segments: int) -> bool:
    meta = data.get("meta", {})
    return abs(meta.get("theta", np.nan) - theta) < 1e-9 and meta.get("n_segments") == n_segments


def schedule_for(
    name: str,
    blockade: BlockadeModel | str,
    *,
    cache_dir: str | os.PathLike | None = None,
    n_segments: int = DEFAULT_SEGMENTS,
    order: Sequence[int] = DEFAULT_ORDER,
    synthesize_missing: bool = True,
    seed: int = 0,
) -> ProtocolSchedule:
    """Fully populated schedule for a protocol under a blockade model.

    Synthesized pulses are looked up in ``cache_dir`` (keyed by protocol,
    theta and segment count), then in the bundled pulse data, and synthesized
    and written atomically if absent.
    """
    name = name.upper().replace("-", "_")
    if name not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {name!r}")
    model = BlockadeModel.parse(blockade)
    if name == "SIM":
        sched = sim_schedule()
    elif name == "NP":
        sched = np_schedule(order)
    elif name == "PI_2PI_PI":
        sched = pi_2pi_pi_schedule(order)
    else:
        theta = _SYMMETRIC_THETA[name]
        data = None
        path = _cache_file(Path(cache_dir), name, model) if cache_dir is not None else None
        if path is not None and path.exists():
            data = json.loads(path.read_text())
        if data is None or not _matches(data, theta, n_segments):
            data = _packaged(name)
        if data is not None and _matches(data, theta, n_segments):
            pulse = Pulse.from_dict(data["gates"][0]["pulses"][0])
        elif synthesize_missing:
            pulse = synthesize_symmetric(theta, n_segments=n_segments, seed=seed).pulse
        else:
            raise ConfigurationError(f"no cached {name} pulse with {n_segments} segments")
        sched = symmetric_schedule(name, pulse, theta, order)
        if path is not None and not path.exists():
            save_schedule(sched, path, model)
    sched.check_blockade(model)
    return sched
