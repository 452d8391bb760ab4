"""Pulse-sequence events, propagation and the canned singlet experiments.

Pulses are ideal, instantaneous and non-selective.  Free evolution and
spin-locking use ``exp(L t)`` on the row-major vectorized density matrix.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize

from .relaxation import hamiltonian_superoperator, n_spins_of, unvec, vec
from .spin import PCBA_PAIRS, DensityState, SpinSystem, singlet_pair_population, _embed, _PAULI_HALF

DEFAULT_LOCK_HZ = 2000.0

PHASE_X = 0.0
PHASE_Y = math.pi / 2
PHASE_MX = math.pi
PHASE_MY = 3 * math.pi / 2


@dataclass(frozen=True)
class HardPulse:
    angle: float  # rad
    phase: float = PHASE_X  # rad

    def __post_init__(self):
        if not (math.isfinite(self.angle) and math.isfinite(self.phase)):
            raise ValueError("pulse angle and phase must be finite")


@dataclass(frozen=True)
class Delay:
    duration: float  # s

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ValueError(f"delay duration must be >= 0, got {self.duration!r}")


@dataclass(frozen=True)
class Lock:
    """Continuous-wave irradiation.

    ``offset`` is the RF frequency relative to the rotating frame (Hz); the
    lock is static in a frame rotating at that offset.
    """

    amplitude: float  # Hz
    phase: float  # rad
    duration: float  # s
    offset: float = 0.0  # Hz

    def __post_init__(self):
        if not (math.isfinite(self.amplitude) and self.amplitude >= 0):
            raise ValueError(f"lock amplitude must be >= 0, got {self.amplitude!r}")
        if not math.isfinite(self.phase):
            raise ValueError("lock phase must be finite")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ValueError(f"lock duration must be >= 0, got {self.duration!r}")
        if not math.isfinite(self.offset):
            raise ValueError("lock offset must be finite")


@dataclass(frozen=True)
class Acquire:
    points: int
    dwell: float  # s

    def __post_init__(self):
        if not isinstance(self.points, (int, np.integer)) or self.points < 1:
            raise ValueError(f"acquire needs a positive point count, got {self.points!r}")
        if not (math.isfinite(self.dwell) and self.dwell >= 0):
            raise ValueError(f"dwell must be >= 0, got {self.dwell!r}")


@dataclass(frozen=True)
class Filter:
    """Ideal coherence filter, applied as a projection.

    ``"t00"`` keeps only operators invariant under global rotations, which
    is what a rank-0 filter built from gradients and phase cycling selects.
    """

    kind: str = "t00"

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter {self.kind!r}; known: {', '.join(FILTER_KINDS)}")


FILTER_KINDS = ("t00",)

SequenceEvent = Union[HardPulse, Delay, Lock, Filter, Acquire]


@dataclass(frozen=True)
class SequenceProgram:
    events: tuple[SequenceEvent, ...]
    name: str = ""
    parameters: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        n_acq = sum(isinstance(e, Acquire) for e in self.events)
        if n_acq > 1:
            raise ValueError(f"a program may contain at most one acquire, found {n_acq}")

    @property
    def duration(self) -> float:
        total = 0.0
        for e in self.events:
            if isinstance(e, (Delay, Lock)):
                total += e.duration
        return total


@dataclass(frozen=True)
class TimingSet:
    t1: float
    t2: float
    t3: float

    def __post_init__(self):
        for name in ("t1", "t2", "t3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")

    def as_dict(self) -> dict[str, float]:
        return {"t1": self.t1, "t2": self.t2, "t3": self.t3}


def compute_m2s_timings(j_hz: float, delta_nu_hz: float) -> TimingSet:
    """``t1 = 1/(4J)``, ``t2 = 1/(4J) + 1/dnu``, ``t3 = 1/(2 dnu)``."""
    if not (j_hz > 0 and delta_nu_hz > 0):
        raise ValueError("J and the shift difference must both be positive")
    quarter = 1 / (4 * j_hz)
    return TimingSet(quarter, quarter + 1 / delta_nu_hz, 1 / (2 * delta_nu_hz))


def half_period_m2s_timings(j_hz: float, delta_nu_hz: float) -> TimingSet:
    """Echo offset of half a shift period, final delay of a quarter.

    ``t1 = 1/(4J)``, ``t2 = 1/(4J) + 1/(2 dnu)``, ``t3 = 1/(4 dnu)``.  For a
    weakly coupled pair this turns Zeeman order into almost pure singlet
    order with the 90-180-90 train; the full-period variant above refocuses
    the shift difference and encodes almost nothing.
    """
    if not (j_hz > 0 and delta_nu_hz > 0):
        raise ValueError("J and the shift difference must both be positive")
    quarter = 1 / (4 * j_hz)
    return TimingSet(quarter, quarter + 1 / (2 * delta_nu_hz), 1 / (4 * delta_nu_hz))


# ---------------------------------------------------------------- propagation


class Propagator:
    """``exp(L t)`` for one generator, via a cached eigendecomposition.

    Falls back to ``scipy.linalg.expm`` when the eigenvectors are too badly
    conditioned to trust.
    """

    def __init__(self, generator: np.ndarray, max_condition: float = 1e8):
        self.generator = np.asarray(generator, dtype=complex)
        self._eig = None
        w, v = np.linalg.eig(self.generator)
        if np.linalg.cond(v) < max_condition:
            self._eig = (w, v, np.linalg.inv(v))

    def matrix(self, t: float) -> np.ndarray:
        if self._eig is None:
            return expm(self.generator * t)
        w, v, vinv = self._eig
        return (v * np.exp(w * t)) @ vinv

    def apply(self, rho: np.ndarray, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"evolution time must be >= 0, got {t!r}")
        if t == 0:
            return np.array(rho, dtype=complex)
        d = rho.shape[0]
        if self._eig is None:
            out = expm(self.generator * t) @ vec(rho)
        else:
            w, v, vinv = self._eig
            out = v @ (np.exp(w * t) * (vinv @ vec(rho)))
        return out.reshape(d, d)


GeneratorLike = Union[np.ndarray, Propagator]


def _propagator(l: GeneratorLike) -> Propagator:
    return l if isinstance(l, Propagator) else Propagator(l)


def _as_matrix(state) -> np.ndarray:
    if isinstance(state, DensityState):
        return np.array(state.matrix)
    return np.asarray(state, dtype=complex)


def _spins_from_dim(d: int) -> int:
    n = d.bit_length() - 1
    if d < 2 or 2**n != d:
        raise ValueError(f"state dimension {d} is not a power of two")
    return n


def total_operator(n: int, axis: str) -> np.ndarray:
    return sum(_embed(n, {k: _PAULI_HALF[axis]}) for k in range(n))


def rf_operator(n: int, phase: float) -> np.ndarray:
    """``sum_i (Ix cos phase + Iy sin phase)``."""
    return math.cos(phase) * total_operator(n, "x") + math.sin(phase) * total_operator(n, "y")


def pulse_unitary(n: int, angle: float, phase: float) -> np.ndarray:
    """``exp(-i angle sum_i (Ix cos phase + Iy sin phase))``, built per spin."""
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    one = np.array(
        [[c, -1j * s * np.exp(-1j * phase)], [-1j * s * np.exp(1j * phase), c]], dtype=complex
    )
    out = np.ones((1, 1), dtype=complex)
    for _ in range(n):
        out = np.kron(out, one)
    return out


def apply_hard_pulse(state, pulse: HardPulse) -> np.ndarray:
    rho = _as_matrix(state)
    if pulse.angle == 0:
        return rho.copy()
    u = pulse_unitary(_spins_from_dim(rho.shape[0]), pulse.angle, pulse.phase)
    return u @ rho @ u.conj().T


def evolve_interval(state, l: GeneratorLike, t: float) -> np.ndarray:
    return _propagator(l).apply(_as_matrix(state), t)


def lock_generator(l0: np.ndarray, amplitude_hz: float, phase: float, offset_hz: float = 0.0) -> np.ndarray:
    """Free-evolution generator plus a CW lock, in the frame of the lock.

    For a nonzero ``offset_hz`` the generator lives in a frame rotating at
    that offset, where the RF term is static; see :func:`frame_rotation`.
    """
    if amplitude_hz == 0 and offset_hz == 0:
        return np.asarray(l0)
    n = n_spins_of(l0)
    h = 2 * math.pi * amplitude_hz * rf_operator(n, phase)
    if offset_hz:
        h = h - 2 * math.pi * offset_hz * total_operator(n, "z")
    return l0 + hamiltonian_superoperator(h)


def frame_rotation(n: int, offset_hz: float, t: float) -> np.ndarray:
    """Diagonal unitary taking a state from the lock frame back to the rotating frame."""
    mz = np.diag(total_operator(n, "z")).real
    return np.exp(-2j * math.pi * offset_hz * t * mz)


def _unrotate(rho: np.ndarray, n: int, offset_hz: float, t: float) -> np.ndarray:
    if not offset_hz or not t:
        return rho
    u = frame_rotation(n, offset_hz, t)
    return u[:, None] * rho * u.conj()[None, :]


def apply_lock(state, l0: np.ndarray, lock: Lock) -> np.ndarray:
    """Evolve under the free generator plus the lock for ``lock.duration``.

    The relaxation generators commute with rotations about z, so moving to
    the lock frame and back is exact.
    """
    rho = evolve_interval(state, lock_generator(l0, lock.amplitude, lock.phase, lock.offset), lock.duration)
    return _unrotate(rho, n_spins_of(l0), lock.offset, lock.duration)


_ISOTROPIC_CACHE: dict[int, np.ndarray] = {}


def isotropic_basis(n: int) -> np.ndarray:
    """Orthonormal basis (columns, vectorized) of operators commuting with all global rotations."""
    if n not in _ISOTROPIC_CACHE:
        stacked = np.vstack([hamiltonian_superoperator(total_operator(n, a)) for a in "xyz"])
        _, sv, vh = np.linalg.svd(stacked)
        tol = 1e-9 * sv[0]
        rank = int(np.sum(sv > tol))
        basis = vh[rank:].conj().T
        basis.setflags(write=False)
        _ISOTROPIC_CACHE[n] = basis
    return _ISOTROPIC_CACHE[n]


def apply_filter(state, flt: Filter) -> np.ndarray:
    rho = _as_matrix(state)
    d = rho.shape[0]
    b = isotropic_basis(_spins_from_dim(d))
    return (b @ (b.conj().T @ vec(rho))).reshape(d, d)


# ------------------------------------------------------------------- programs


def preparation_events(timings: TimingSet) -> list[SequenceEvent]:
    """Magnetization-to-singlet block: 90x - t1 - 180y - t2 - 90(-x) - t3."""
    return [
        HardPulse(math.pi / 2, PHASE_X),
        Delay(timings.t1),
        HardPulse(math.pi, PHASE_Y),
        Delay(timings.t2),
        HardPulse(math.pi / 2, PHASE_MX),
        Delay(timings.t3),
    ]


def readout_events(timings: TimingSet) -> list[SequenceEvent]:
    """Mirror of the preparation, ending transverse (no closing 90)."""
    return [
        Delay(timings.t3),
        HardPulse(math.pi / 2, PHASE_X),
        Delay(timings.t2),
        HardPulse(math.pi, PHASE_Y),
        Delay(timings.t1),
    ]


def singlet_locking_program(
    timings: TimingSet,
    lock_amplitude: float = DEFAULT_LOCK_HZ,
    lock_duration: float = 0.0,
    lock_phase: float = PHASE_X,
    acquire: Acquire = Acquire(1, 1e-4),
    lock_offset: float = 0.0,
    t00_filter: bool = False,
) -> SequenceProgram:
    """Prepare singlet order, lock it, convert back and acquire.

    ``lock_offset`` should sit midway between the two resonances of each
    pair; a lock on one resonance leaves the pair's effective fields unequal
    in magnitude and mixes singlet and triplet.  ``t00_filter`` inserts an
    isotropic filter after the lock so triplet leftovers do not reach the
    readout.
    """
    events = (
        preparation_events(timings)
        + [Lock(lock_amplitude, lock_phase, lock_duration, lock_offset)]
        + ([Filter("t00")] if t00_filter else [])
        + readout_events(timings)
        + [acquire]
    )
    params = timings.as_dict() | {"lock_amplitude": lock_amplitude, "lock_duration": lock_duration}
    return SequenceProgram(tuple(events), name="singlet-locking", parameters=params)


def inversion_recovery_program(delay: float, acquire: Acquire = Acquire(1, 1e-4)) -> SequenceProgram:
    if not delay >= 0:
        raise ValueError(f"delay must be >= 0, got {delay!r}")
    events = (HardPulse(math.pi, PHASE_X), Delay(delay), HardPulse(math.pi / 2, PHASE_X), acquire)
    return SequenceProgram(events, name="inversion-recovery", parameters={"delay": delay})


def tip_program(angle_deg: float = 30.0, acquire: Acquire = Acquire(1, 1e-4)) -> SequenceProgram:
    """Single small-angle readout used to normalize hyperpolarized signals."""
    return SequenceProgram(
        (HardPulse(math.radians(angle_deg), PHASE_X), acquire), name=f"tip-{angle_deg:g}"
    )


# ------------------------------------------------------------------- executor


@dataclass(frozen=True, eq=False)
class SequenceResult:
    final: np.ndarray
    times: np.ndarray
    samples: np.ndarray

    @property
    def first(self) -> complex:
        if self.samples.size == 0:
            raise ValueError("program did not acquire")
        return complex(self.samples[0])


class SequenceRunner:
    """Executes programs against one free-evolution Liouvillian.

    Propagators for the free generator and for every distinct lock setting
    are diagonalized once and reused across runs.
    """

    def __init__(self, l0: np.ndarray, observable: Optional[np.ndarray] = None):
        self.l0 = np.asarray(l0, dtype=complex)
        self.n = n_spins_of(self.l0)
        self.observable = total_operator(self.n, "+") if observable is None else observable
        self._free = Propagator(self.l0)
        self._locks: dict[tuple[float, float, float], Propagator] = {}
        self._pulses: dict[tuple[float, float], np.ndarray] = {}

    def _lock(self, lock: Lock) -> Propagator:
        key = (lock.amplitude, lock.phase, lock.offset)
        if lock.amplitude == 0 and lock.offset == 0:
            return self._free
        if key not in self._locks:
            self._locks[key] = Propagator(lock_generator(self.l0, *key))
        return self._locks[key]

    def _pulse(self, p: HardPulse) -> np.ndarray:
        key = (p.angle, p.phase)
        if key not in self._pulses:
            self._pulses[key] = pulse_unitary(self.n, p.angle, p.phase)
        return self._pulses[key]

    def run(self, program: SequenceProgram, initial) -> SequenceResult:
        rho = _as_matrix(initial)
        if rho.shape != (2**self.n, 2**self.n):
            raise ValueError("initial state does not match the Liouvillian dimension")
        times = np.empty(0)
        samples = np.empty(0, dtype=complex)
        n_acq = 0
        for ev in program.events:
            if isinstance(ev, HardPulse):
                if ev.angle != 0:
                    u = self._pulse(ev)
                    rho = u @ rho @ u.conj().T
            elif isinstance(ev, Delay):
                rho = self._free.apply(rho, ev.duration)
            elif isinstance(ev, Lock):
                rho = self._lock(ev).apply(rho, ev.duration)
                rho = _unrotate(rho, self.n, ev.offset, ev.duration)
            elif isinstance(ev, Filter):
                rho = apply_filter(rho, ev)
            elif isinstance(ev, Acquire):
                n_acq += 1
                if n_acq > 1:
                    raise ValueError("program contains more than one acquire")
                times = np.arange(ev.points) * ev.dwell
                samples = np.empty(ev.points, dtype=complex)
                for k in range(ev.points):
                    if k:
                        rho = self._free.apply(rho, ev.dwell)
                    samples[k] = np.einsum("ij,ji->", rho, self.observable)
            else:
                raise TypeError(f"unknown event {ev!r}")
        return SequenceResult(final=rho, times=times, samples=samples)


def run_sequence(
    system: SpinSystem,
    l: np.ndarray,
    program: SequenceProgram,
    initial,
    observable: Optional[np.ndarray] = None,
) -> SequenceResult:
    """Apply ``program`` to ``initial``; Acquire samples ``Tr(rho O)``.

    The default observable is the total raising operator, whose expectation
    is ``<Mx> + i <My>``.
    """
    if n_spins_of(l) != system.n_spins:
        raise ValueError("Liouvillian does not match the spin system")
    return SequenceRunner(l, observable).run(program, initial)


# -------------------------------------------------------------------- timings


def preparation_objective(
    system: SpinSystem,
    l: GeneratorLike,
    timings: Union[TimingSet, Sequence[float]],
    initial,
    pairs=PCBA_PAIRS,
    phase_offset: float = 0.0,
) -> float:
    """Singlet-pair population excess over 1/4 after the preparation block.

    ``phase_offset`` is added to every pulse phase.
    """
    if not isinstance(timings, TimingSet):
        timings = TimingSet(*timings)
    prop = _propagator(l)
    rho = _as_matrix(initial)
    for ev in preparation_events(timings):
        if isinstance(ev, HardPulse):
            u = pulse_unitary(system.n_spins, ev.angle, ev.phase + phase_offset)
            rho = u @ rho @ u.conj().T
        else:
            rho = prop.apply(rho, ev.duration)
    return singlet_pair_population(system, pairs, rho) - 0.25


@dataclass(frozen=True)
class OptimizedTimings:
    timings: TimingSet
    objective: float
    start_objective: float


def default_timing_ranges(j_hz: float, delta_nu_hz: float) -> tuple[tuple[float, float], ...]:
    """Search box containing both the full- and half-period formula timings."""
    q = 1 / (4 * j_hz)
    return ((0.5 * q, 1.5 * q), (q, q + 1.5 / delta_nu_hz), (0.05 / delta_nu_hz, 0.75 / delta_nu_hz))


def optimize_timings(
    system: SpinSystem,
    l: GeneratorLike,
    initial,
    ranges: Sequence[tuple[float, float]],
    start: Optional[TimingSet] = None,
    pairs=PCBA_PAIRS,
    grid_points: int = 9,
) -> OptimizedTimings:
    """Maximize the singlet-pair population after the preparation block.

    Coarse grid search over ``ranges`` followed by a bounded Nelder-Mead
    refinement of the best grid points.  ``start`` (defaults to the range
    centre) is always a candidate, so the result never scores below it.
    """
    ranges = [tuple(map(float, r)) for r in ranges]
    if len(ranges) != 3:
        raise ValueError("need ranges for t1, t2 and t3")
    for lo, hi in ranges:
        if not (0 < lo <= hi):
            raise ValueError(f"empty or non-positive search range ({lo}, {hi})")
    prop = _propagator(l)
    rho0 = _as_matrix(initial)
    if start is None:
        start = TimingSet(*[(lo + hi) / 2 for lo, hi in ranges])

    def score(x) -> float:
        return preparation_objective(system, prop, tuple(x), rho0, pairs)

    start_x = np.array([start.t1, start.t2, start.t3])
    start_score = score(start_x)
    best_x, best = start_x, start_score
    axes = [np.linspace(lo, hi, grid_points) if hi > lo else np.array([lo]) for lo, hi in ranges]
    scored = []
    for x in itertools.product(*axes):
        scored.append((score(x), x))
    scored.sort(key=lambda p: -p[0])
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    free = hi > lo
    if free.any():
        for _, x0 in scored[:3]:
            res = minimize(
                lambda y: -score(np.where(free, y, lo)),
                np.array(x0),
                method="Nelder-Mead",
                bounds=list(zip(lo, hi)),
                options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 2000},
            )
            x = np.where(free, np.clip(res.x, lo, hi), lo)
            scored.append((score(x), x))
    for val, x in scored:
        if val > best:
            best, best_x = val, np.asarray(x)
    return OptimizedTimings(TimingSet(*map(float, best_x)), float(best), float(start_score))
