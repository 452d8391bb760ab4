"""Fit relaxation parameters to measured T1 / T_S pairs.

Lifetimes are the eigenmode lifetimes of the Liouvillian: T1 from total
Iz under free evolution, T_S from the singlet-pair operator under the
singlet lock.  Two targets fix two parameters; the root is found by a coarse
grid followed by damped Newton steps in log-parameter space.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .analysis import eigenmode_rate
from .relaxation import (
    BindingModel,
    RelaxationModel,
    assemble_liouvillian,
    combine_dipolar_blocks,
    dipolar_redfield_blocks,
    random_field_unit,
)
from .sequences import DEFAULT_LOCK_HZ, PHASE_X, lock_generator
from .spin import PCBA_PAIRS, SpinSystem, coherent_hamiltonian, singlet_pair_operator, total_spin_operator

# Upper tau_c bound at the fast-tumbling side of the T1 minimum near
# w0 tau_c ~ 0.6 at 11.7 T, so T1(tau_c) is monotonic inside the box.
DEFAULT_TAU_BOUNDS = (1e-13, 2e-10)
DEFAULT_RATE_BOUNDS = (1e-6, 10.0)


class CalibrationError(ValueError):
    """No parameter set inside the bounds reproduces the targets."""


@dataclass(frozen=True)
class LockSettings:
    amplitude: float = DEFAULT_LOCK_HZ
    phase: float = PHASE_X
    offset: float = 0.0


def pair_centre_offset(system: SpinSystem, pairs=PCBA_PAIRS) -> float:
    """Mean resonance offset of the encoded pairs (Hz), where the lock belongs."""
    idx = [k for p in pairs for k in p]
    return float(np.mean([system.offsets_hz[k] for k in idx]))


class LifetimeModel:
    """Eigenmode T1 and T_S as cheap functions of the relaxation parameters."""

    def __init__(
        self,
        system: SpinSystem,
        larmor_rad_s: float,
        lock: Optional[LockSettings] = None,
        pairs=PCBA_PAIRS,
        dipolar_pairs_active=None,
    ):
        self.system = system
        self.larmor = larmor_rad_s
        self.pairs = pairs
        self.lock = lock or LockSettings(offset=pair_centre_offset(system, pairs))
        probe = RelaxationModel(1e-11, 0.0, larmor_rad_s, dipolar_pairs_active)
        self.dipolar_pairs_active = dipolar_pairs_active
        self._blocks = dipolar_redfield_blocks(system, probe)
        self._rf = random_field_unit(system)
        self._coherent = assemble_liouvillian(coherent_hamiltonian(system))
        self._iz = total_spin_operator(system, "z")
        self._q = singlet_pair_operator(system, pairs)

    def relaxation(self, model: RelaxationModel, binding: Optional[BindingModel] = None) -> np.ndarray:
        r = combine_dipolar_blocks(self._blocks, model.tau_c, self.larmor)
        k = model.random_field_rate
        if binding is not None and binding.bound_fraction > 0:
            f = binding.bound_fraction
            r = (1 - f) * r + f * combine_dipolar_blocks(self._blocks, binding.bound_tau_c, self.larmor)
            k = k + f * binding.bound_extra_random_field_rate
        return r + k * self._rf

    def liouvillian(self, model: RelaxationModel, binding: Optional[BindingModel] = None) -> np.ndarray:
        return self._coherent + self.relaxation(model, binding)

    def lifetimes(self, model: RelaxationModel, binding: Optional[BindingModel] = None) -> tuple[float, float]:
        l0 = self.liouvillian(model, binding)
        r1 = eigenmode_rate(l0, self._iz).rate
        ll = lock_generator(l0, self.lock.amplitude, self.lock.phase, self.lock.offset)
        rs = eigenmode_rate(ll, self._q).rate
        return 1 / r1, 1 / rs

    def model(self, tau_c: float, rate: float) -> RelaxationModel:
        return RelaxationModel(tau_c, rate, self.larmor, self.dipolar_pairs_active)


@dataclass(frozen=True)
class CalibrationResult:
    model: RelaxationModel
    binding: Optional[BindingModel]
    t1: float
    ts: float
    t1_target: float
    ts_target: float
    iterations: int

    @property
    def ratio(self) -> float:
        return self.ts / self.t1


def _solve_two(
    lifetimes: Callable[[float, float], tuple[float, float]],
    targets: tuple[float, float],
    bounds: tuple[tuple[float, float], tuple[float, float]],
    grid: int = 7,
    tol: float = 1e-9,
    max_iter: int = 60,
) -> tuple[np.ndarray, tuple[float, float], int]:
    log_t = np.log(targets)
    lo = np.log([bounds[0][0], bounds[1][0]])
    hi = np.log([bounds[0][1], bounds[1][1]])
    if np.any(hi <= lo):
        raise ValueError(f"empty parameter bounds {bounds}")

    def resid(x):
        t1, ts = lifetimes(*np.exp(x))
        return np.log([t1, ts]) - log_t

    axes = [np.linspace(lo[i], hi[i], grid) for i in range(2)]
    points = [np.array([a, b]) for a in axes[0] for b in axes[1]]
    with ThreadPoolExecutor() as pool:
        residuals = list(pool.map(resid, points))
    order = sorted(range(len(points)), key=lambda i: (float(residuals[i] @ residuals[i]), i))
    x, r = points[order[0]], residuals[order[0]]
    it = 0
    h = 1e-6
    while it < max_iter and np.max(np.abs(r)) > tol:
        it += 1
        jac = np.empty((2, 2))
        for j in range(2):
            step = np.zeros(2)
            step[j] = h if x[j] + h <= hi[j] else -h
            jac[:, j] = (resid(x + step) - r) / step[j]
        try:
            dx = -np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(jac, r, rcond=None)[0]
        norm0 = float(r @ r)
        alpha = 1.0
        while alpha > 1e-6:
            xn = np.clip(x + alpha * dx, lo, hi)
            rn = resid(xn)
            if float(rn @ rn) < norm0:
                break
            alpha /= 2
        else:
            break
        x, r = xn, rn
    if np.max(np.abs(r)) > 1e-6:
        raise CalibrationError(
            f"no root for targets {targets} within bounds {bounds}; "
            f"closest log-residual {np.max(np.abs(r)):.3g} at {tuple(np.exp(x))}"
        )
    t1, ts = np.exp(r + log_t)
    return np.exp(x), (float(t1), float(ts)), it


def calibrate_relaxation(
    system: SpinSystem,
    t1_target: float,
    ts_target: float,
    larmor_rad_s: float,
    tau_bounds: tuple[float, float] = DEFAULT_TAU_BOUNDS,
    rate_bounds: tuple[float, float] = DEFAULT_RATE_BOUNDS,
    lock: Optional[LockSettings] = None,
    pairs=PCBA_PAIRS,
    dipolar_pairs_active=None,
) -> CalibrationResult:
    """Find ``tau_c`` and the random-field rate reproducing ``(T1, T_S)``."""
    if not (t1_target > 0 and ts_target > 0):
        raise ValueError("lifetime targets must be positive")
    lm = LifetimeModel(system, larmor_rad_s, lock, pairs, dipolar_pairs_active)
    params, (t1, ts), it = _solve_two(
        lambda tau, k: lm.lifetimes(lm.model(tau, k)),
        (t1_target, ts_target),
        (tau_bounds, rate_bounds),
    )
    return CalibrationResult(lm.model(*params), None, t1, ts, t1_target, ts_target, it)


def calibrate_binding(
    system: SpinSystem,
    free: RelaxationModel,
    t1_target: float,
    ts_target: float,
    bound_fraction: float,
    tau_bounds: Optional[tuple[float, float]] = None,
    rate_bounds: tuple[float, float] = (1e-8, 100.0),
    lock: Optional[LockSettings] = None,
    pairs=PCBA_PAIRS,
) -> CalibrationResult:
    """Find the bound-state ``tau_c`` and extra leakage for a fixed bound fraction.

    The free-ligand model is held fixed, so the bound scenario differs from
    the free one only through the binding parameters.  The bound ``tau_c`` is
    searched no lower than the free one.
    """
    if not 0 < bound_fraction <= 1:
        raise ValueError("bound_fraction must lie in (0, 1]")
    if tau_bounds is None:
        tau_bounds = (free.tau_c, DEFAULT_TAU_BOUNDS[1])
    lm = LifetimeModel(system, free.larmor_rad_s, lock, pairs, free.dipolar_pairs_active)

    def lifetimes(tau_b, extra):
        return lm.lifetimes(free, BindingModel(bound_fraction, extra, tau_b))

    params, (t1, ts), it = _solve_two(lifetimes, (t1_target, ts_target), (tau_bounds, rate_bounds))
    binding = BindingModel(bound_fraction, float(params[1]), float(params[0]))
    return CalibrationResult(free, binding, t1, ts, t1_target, ts_target, it)
