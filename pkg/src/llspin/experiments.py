"""Scenario-level recipes: built-in scenarios, states and duration sweeps."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .analysis import DecayCurve, thermal_polarization
from .calibration import LockSettings, calibrate_binding, calibrate_relaxation
from .relaxation import assemble_liouvillian, exchange_averaged_model
from .seqlang import Scenario, parse_sequence, parse_system
from .sequences import (
    Propagator,
    SequenceProgram,
    SequenceRunner,
    TimingSet,
    compute_m2s_timings,
    default_timing_ranges,
    half_period_m2s_timings,
    inversion_recovery_program,
    optimize_timings,
    singlet_locking_program,
    tip_program,
)
from .spin import PCBA_PAIRS, coherent_hamiltonian, thermal_state

BUILTIN_SCENARIOS = ("pcba-thermal-300K", "pcba-dnp-343K", "pcba-dnp-bcd")
BUILTIN_SEQUENCES = ("singlet-locking", "inversion-recovery")
SWEEP_VARIABLES = ("lock_duration", "ir_delay")
TIMING_MODES = ("half-period", "formula", "optimized")


def builtin_scenario_text(name: str) -> str:
    if name not in BUILTIN_SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; built-in: {', '.join(BUILTIN_SCENARIOS)}")
    return resources.files("llspin").joinpath("data", f"{name}.system").read_text(encoding="utf-8")


def builtin_sequence_text(name: str) -> str:
    if name not in BUILTIN_SEQUENCES:
        raise KeyError(f"unknown sequence {name!r}; built-in: {', '.join(BUILTIN_SEQUENCES)}")
    return resources.files("llspin").joinpath("data", f"{name}.seq").read_text(encoding="utf-8")


def load_scenario(name_or_path: Union[str, os.PathLike]) -> Scenario:
    """A built-in scenario by name, or a system file by path."""
    if isinstance(name_or_path, str) and name_or_path in BUILTIN_SCENARIOS:
        return parse_system(builtin_scenario_text(name_or_path))
    with open(name_or_path, "rb") as fh:
        return parse_system(fh.read())


def scenario_pairs(sc: Scenario) -> tuple[tuple[int, int], ...]:
    return sc.singlet_pairs or PCBA_PAIRS


def pair_constants(sc: Scenario) -> tuple[float, float]:
    """``(J, dnu)`` in Hz of the first singlet pair."""
    a, b = scenario_pairs(sc)[0]
    s = sc.system
    return abs(s.j_hz[a][b]), abs(s.offsets_hz[a] - s.offsets_hz[b])


class Experiment:
    """Liouvillians, states and canned sweeps for one scenario.

    Relaxation drives towards the thermal state at the scenario's field and
    temperature; a hyperpolarized starting state, if given, decays to it.
    """

    def __init__(self, scenario: Scenario):
        if scenario.relaxation is None:
            raise ValueError(f"scenario {scenario.name!r} has no [relaxation] section")
        self.scenario = scenario
        self.system = scenario.system
        self.pairs = scenario_pairs(scenario)

    @cached_property
    def equilibrium_polarization(self) -> float:
        return thermal_polarization(self.scenario.field_t, self.scenario.temperature_k)

    @property
    def initial_polarization(self) -> float:
        p = self.scenario.polarization
        return self.equilibrium_polarization if p is None else p

    def initial_state(self, polarization: Optional[float] = None):
        return thermal_state(self.system, self.initial_polarization if polarization is None else polarization)

    def equilibrium_state(self):
        return thermal_state(self.system, self.equilibrium_polarization)

    @cached_property
    def relaxation_generator(self) -> np.ndarray:
        sc = self.scenario
        return exchange_averaged_model(self.system, sc.relaxation, sc.binding)

    @cached_property
    def liouvillian(self) -> np.ndarray:
        """Generator that relaxes towards thermal equilibrium."""
        return assemble_liouvillian(
            coherent_hamiltonian(self.system),
            self.relaxation_generator,
            equilibrium=self.equilibrium_state().matrix,
        )

    @cached_property
    def free_liouvillian(self) -> np.ndarray:
        """Generator that relaxes towards the identity (deviations only)."""
        return assemble_liouvillian(coherent_hamiltonian(self.system), self.relaxation_generator)

    @cached_property
    def runner(self) -> SequenceRunner:
        return SequenceRunner(self.liouvillian)

    @property
    def lock_settings(self) -> LockSettings:
        return LockSettings(self.scenario.lock_amplitude_hz, 0.0, self.scenario.lock_offset)

    def timings(self, mode: str = "half-period") -> TimingSet:
        j, dnu = pair_constants(self.scenario)
        if mode == "formula":
            return compute_m2s_timings(j, dnu)
        if mode == "half-period":
            return half_period_m2s_timings(j, dnu)
        if mode == "optimized":
            l = Propagator(assemble_liouvillian(coherent_hamiltonian(self.system)))
            start = half_period_m2s_timings(j, dnu)
            return optimize_timings(
                self.system, l, self.initial_state(1e-3), default_timing_ranges(j, dnu), start, self.pairs
            ).timings
        raise ValueError(f"unknown timing mode {mode!r}; use one of {', '.join(TIMING_MODES)}")

    def lock_program(self, duration: float, timings: TimingSet, t00_filter: bool = True) -> SequenceProgram:
        return singlet_locking_program(
            timings,
            lock_amplitude=self.scenario.lock_amplitude_hz,
            lock_duration=duration,
            lock_offset=self.scenario.lock_offset,
            t00_filter=t00_filter,
        )

    def tip_reference(self) -> complex:
        """Signal of a 30 degree tip pulse on the starting state."""
        return self.runner.run(tip_program(30.0), self.initial_state()).first

    def sweep(
        self,
        variable: str,
        grid: Sequence[float],
        timings: Optional[TimingSet] = None,
        program: Optional[Callable[[float], SequenceProgram]] = None,
        t00_filter: bool = True,
        max_workers: Optional[int] = None,
    ) -> DecayCurve:
        """One sequence run per grid point, normalized to the tip reference.

        Lock sweeps record the signal magnitude; inversion-recovery sweeps
        the component in phase with the tip reference, which keeps the sign.
        """
        if variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {variable!r}; use one of {', '.join(SWEEP_VARIABLES)}")
        grid = np.asarray(grid, dtype=float).reshape(-1)
        if grid.size == 0:
            raise ValueError("sweep grid is empty")
        if not np.all(np.isfinite(grid)) or np.any(grid < 0):
            raise ValueError("sweep grid values must be finite and >= 0")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ValueError("sweep grid must be strictly ascending")
        if program is None:
            if variable == "lock_duration":
                tm = timings or self.timings()
                program = lambda d: self.lock_program(d, tm, t00_filter)  # noqa: E731
            else:
                program = inversion_recovery_program
        ref = self.tip_reference()
        if ref == 0:
            raise ValueError("tip reference signal is zero; the starting state carries no polarization")
        rho0 = self.initial_state()
        runner = self.runner
        first = runner.run(program(float(grid[0])), rho0).first  # warms the propagator caches
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rest = list(pool.map(lambda d: runner.run(program(float(d)), rho0).first, grid[1:]))
        samples = np.array([first] + rest)
        if variable == "lock_duration":
            amps = np.abs(samples) / abs(ref)
        else:
            amps = (samples * np.conj(ref)).real / abs(ref) ** 2
        meta = {
            "scenario": self.scenario.name,
            "variable": variable,
            "normalization": "tip30",
            "tip_reference_abs": format(abs(ref), ".17g"),
        }
        if variable == "lock_duration" and timings is not None:
            meta.update({k: format(v, ".17g") for k, v in timings.as_dict().items()})
        return DecayCurve(grid, amps, metadata=meta)


def sweep_simulate(
    scenario: Scenario,
    variable: str,
    grid: Sequence[float],
    timings: Optional[TimingSet] = None,
    sequence_text: Optional[str] = None,
    t00_filter: bool = True,
) -> DecayCurve:
    """Build a decay curve by repeating a sequence over ``grid``.

    With ``sequence_text`` the DSL program is re-parsed per point with the
    sweep value bound to ``tau``.  Also defined: ``t1``, ``t2``, ``t3``,
    ``J`` and ``dnu`` of the first pair, and the lock amplitude ``nu1`` and
    offset ``nu_lock`` in Hz.
    """
    exp = Experiment(scenario)
    program = None
    if sequence_text is not None:
        tm = timings or exp.timings()
        j, dnu = pair_constants(scenario)
        base = tm.as_dict() | {
            "J": j,
            "dnu": dnu,
            "nu1": scenario.lock_amplitude_hz,
            "nu_lock": scenario.lock_offset,
        }
        program = lambda d: parse_sequence(sequence_text, base | {"tau": d})  # noqa: E731
        program(0.0)  # surface DSL errors before any simulation
    return exp.sweep(variable, grid, timings=timings, program=program, t00_filter=t00_filter)


def calibrate_scenario(scenario: Scenario, t1: Optional[float] = None, ts: Optional[float] = None) -> Scenario:
    """Re-fit the scenario's free parameters to its (or the given) lifetime targets.

    Without a binding section this fits ``tau_c`` and the random-field rate.
    With one, the free model is kept and the bound ``tau_c`` and extra rate
    are fitted at the file's bound fraction.
    """
    t1 = t1 if t1 is not None else scenario.t1_target_s
    ts = ts if ts is not None else scenario.ts_target_s
    if t1 is None or ts is None:
        raise ValueError("calibration needs T1 and T_S targets (in the file or given explicitly)")
    pairs = scenario_pairs(scenario)
    lock = LockSettings(scenario.lock_amplitude_hz, 0.0, scenario.lock_offset)
    rel = scenario.relaxation
    if scenario.binding is None:
        res = calibrate_relaxation(
            scenario.system,
            t1,
            ts,
            scenario.larmor_rad_s,
            lock=lock,
            pairs=pairs,
            dipolar_pairs_active=None if rel is None else rel.dipolar_pairs_active,
        )
        return replace(scenario, relaxation=res.model, t1_target_s=t1, ts_target_s=ts)
    res = calibrate_binding(scenario.system, rel, t1, ts, scenario.binding.bound_fraction, lock=lock, pairs=pairs)
    return replace(scenario, binding=res.binding, t1_target_s=t1, ts_target_s=ts)
