"""Lifetime extraction, contrast and polarization arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .constants import GAMMA_1H, HBAR, K_B, ROOM_TEMPERATURE
from .relaxation import vec


class FitError(RuntimeError):
    """A curve fit failed to converge or the data cannot constrain it."""


class DegenerateCurveError(FitError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DecayCurve:
    """Sampled ``(time, amplitude)`` series with optional per-point noise."""

    times: np.ndarray
    amplitudes: np.ndarray
    sigma: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        y = np.array(self.amplitudes, dtype=float).reshape(-1)
        if t.size != y.size:
            raise ValueError(f"{t.size} times but {y.size} amplitudes")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError("curve contains non-finite values")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("curve times must be strictly increasing")
        s = None
        if self.sigma is not None:
            s = np.array(self.sigma, dtype=float).reshape(-1)
            if s.size != t.size:
                raise ValueError("sigma length does not match the curve")
            if not np.all(s > 0):
                raise ValueError("sigma must be positive")
            s.setflags(write=False)
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "amplitudes", y)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, DecayCurve):
            return NotImplemented
        same_sigma = (self.sigma is None and other.sigma is None) or (
            self.sigma is not None and other.sigma is not None and np.array_equal(self.sigma, other.sigma)
        )
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.amplitudes, other.amplitudes)
            and same_sigma
            and self.metadata == other.metadata
        )


@dataclass(frozen=True)
class FitResult:
    lifetime: float
    lifetime_stderr: float
    amplitude: float
    offset: float
    model: str  # "exp", "inversion-recovery" or "buildup"
    rms_residual: float
    kappa: Optional[float] = None
    params: tuple[float, ...] = ()


# ------------------------------------------------------------------ fitting
#
# Each model is linear in everything except the lifetime; starts solve the
# linear part exactly for a trial lifetime, then damped Gauss-Newton refines
# all parameters jointly.


def _exp_model(p, t):
    a, tau, c = p
    e = np.exp(-t / tau)
    f = a * e + c
    jac = np.column_stack([e, a * e * t / tau**2, np.ones_like(t)])
    return f, jac


def _ir_model(p, t):
    m, kappa, tau = p
    e = np.exp(-t / tau)
    f = m * (1 - 2 * kappa * e)
    jac = np.column_stack([1 - 2 * kappa * e, -2 * m * e, -2 * m * kappa * e * t / tau**2])
    return f, jac


def _buildup_model(p, t):
    pinf, tau = p
    e = np.exp(-t / tau)
    f = pinf * (1 - e)
    jac = np.column_stack([1 - e, -pinf * e * t / tau**2])
    return f, jac


def _exp_start(t, y, tau):
    e = np.exp(-t / tau)
    (a, c), *_ = np.linalg.lstsq(np.column_stack([e, np.ones_like(t)]), y, rcond=None)
    return np.array([a, tau, c])


def _ir_start(t, y, tau):
    e = np.exp(-t / tau)
    (m, q), *_ = np.linalg.lstsq(np.column_stack([np.ones_like(t), e]), y, rcond=None)
    kappa = -q / (2 * m) if m != 0 else 1.0
    return np.array([m, kappa, tau])


def _buildup_start(t, y, tau):
    e = 1 - np.exp(-t / tau)
    pinf = float(e @ y / (e @ e)) if e @ e > 0 else float(y.max())
    return np.array([pinf, tau])


_MODELS = {
    "exp": (_exp_model, _exp_start, 1),
    "inversion-recovery": (_ir_model, _ir_start, 2),
    "buildup": (_buildup_model, _buildup_start, 1),
}


def _gauss_newton(model, p0, t, y, w, tau_index, max_iter=200):
    """Levenberg-damped Gauss-Newton; returns (params, sse, converged)."""
    p = p0.astype(float)
    f, jac = model(p, t)
    r = (y - f) * w
    sse = float(r @ r)
    lam = 1e-3
    scale = max(float(np.sum((y * w) ** 2)), 1e-300)
    for _ in range(max_iter):
        jw = jac * w[:, None]
        a = jw.T @ jw
        g = jw.T @ r
        diag = np.diag(a).copy()
        diag[diag == 0] = 1.0
        improved = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            q = p + step
            if not (np.all(np.isfinite(q)) and q[tau_index] > 0):
                lam *= 10
                continue
            fq, jq = model(q, t)
            rq = (y - fq) * w
            sq = float(rq @ rq)
            if sq <= sse:
                improved = True
                break
            lam *= 10
        if not improved:
            # no descent direction left: at a minimum to working precision
            return p, sse, True
        small_step = np.all(np.abs(step) <= 1e-12 * (np.abs(p) + 1e-300)) or np.all(step == 0)
        small_gain = (sse - sq) <= 1e-14 * max(sse, 1e-30 * scale)
        p, f, jac, r, sse = q, fq, jq, rq, sq
        lam = max(lam / 10, 1e-12)
        if small_step or small_gain or sse <= 1e-30 * scale:
            return p, sse, True
    return p, sse, False


def _fit(curve: DecayCurve, kind: str) -> FitResult:
    model, start, tau_index = _MODELS[kind]
    t, y = curve.times, curve.amplitudes
    n_par = 3 if kind != "buildup" else 2
    if t.size < 4:
        raise ValueError(f"need at least 4 points to fit, got {t.size}")
    if np.ptp(y) == 0:
        raise DegenerateCurveError("curve has zero variance; lifetime is undetermined")
    w = np.ones_like(t) if curve.sigma is None else 1 / curve.sigma
    span = t[-1] - t[0]
    step = float(np.min(np.diff(t)))
    taus = np.geomspace(max(step, span * 1e-3) / 2, 10 * span, 9)
    best = None
    for tau0 in taus:
        p0 = start(t, y, tau0)
        p, sse, ok = _gauss_newton(model, p0, t, y, w, tau_index)
        if ok and (best is None or sse < best[1]):
            best = (p, sse)
    if best is None:
        raise FitError(f"{kind} fit did not converge from any start")
    p, sse = best
    _, jac = model(p, t)
    jw = jac * w[:, None]
    dof = t.size - n_par
    s2 = sse / dof if dof > 0 else float("nan")
    try:
        cov = s2 * np.linalg.inv(jw.T @ jw)
        tau_err = float(math.sqrt(max(cov[tau_index, tau_index], 0.0)))
    except np.linalg.LinAlgError:
        tau_err = float("inf")
    rms = math.sqrt(sse / t.size)
    tau = float(p[tau_index])
    if kind == "exp":
        return FitResult(tau, tau_err, float(p[0]), float(p[2]), kind, rms, params=tuple(map(float, p)))
    if kind == "inversion-recovery":
        return FitResult(tau, tau_err, float(p[0]), 0.0, kind, rms, kappa=float(p[1]), params=tuple(map(float, p)))
    return FitResult(tau, tau_err, float(p[0]), 0.0, kind, rms, params=tuple(map(float, p)))


def fit_exponential(curve: DecayCurve) -> FitResult:
    """Fit ``A exp(-t/T) + c``."""
    return _fit(curve, "exp")


def fit_inversion_recovery(curve: DecayCurve) -> FitResult:
    """Fit ``M(1 - 2 kappa exp(-t/T1))``; ``kappa`` absorbs imperfect inversion."""
    return _fit(curve, "inversion-recovery")


def fit_buildup(curve: DecayCurve) -> FitResult:
    """Fit ``P(1 - exp(-t/tau))``, which passes through zero at t = 0."""
    return _fit(curve, "buildup")


FITTERS: dict[str, Callable[[DecayCurve], FitResult]] = {
    "exp": fit_exponential,
    "inversion-recovery": fit_inversion_recovery,
    "buildup": fit_buildup,
}


# ------------------------------------------------------------ eigenmode rates


@dataclass(frozen=True)
class ModeRate:
    """Decay rate of the eigenmode that best overlaps a given operator.

    ``overlap`` is the fraction of the operator carried by that mode (or
    degenerate group of modes).  ``ambiguous`` is set when it is below the
    threshold, in which case ``rate`` is the overlap-weighted mean.
    """

    rate: float
    overlap: float
    eigenvalue: complex
    ambiguous: bool


def eigenmode_rate(l: np.ndarray, mode_operator: np.ndarray, threshold: float = 0.6) -> ModeRate:
    """``-Re(lambda)`` of the eigenmode of ``l`` best matching ``mode_operator``."""
    l = np.asarray(l, dtype=complex)
    v = vec(mode_operator)
    if not np.any(v):
        raise ValueError("mode operator is zero")
    w, r = np.linalg.eig(l)
    coef = np.linalg.solve(r, v)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(w)))) + 1e-12
    order = np.lexsort((w.imag, w.real))
    groups: list[list[int]] = []
    for k in order:
        for g in groups:
            if abs(w[g[0]] - w[k]) <= tol:
                g.append(k)
                break
        else:
            groups.append([k])
    weights = []
    for g in groups:
        part = r[:, g] @ coef[g]
        weights.append(float(np.vdot(part, part).real))
    weights = np.array(weights)
    total = weights.sum()
    frac = weights / total
    best = int(np.argmax(frac))
    lam = complex(np.mean(w[groups[best]]))
    if frac[best] >= threshold:
        return ModeRate(-lam.real, float(frac[best]), lam, False)
    rates = np.array([-np.mean(w[g]).real for g in groups])
    return ModeRate(float(frac @ rates), float(frac[best]), lam, True)


# ------------------------------------------------------- contrast, polarization


def contrast(t_free: float, t_obs: float) -> float:
    """``|T_free - T_obs| / (T_free + T_obs)``."""
    if not (t_free > 0 and t_obs > 0):
        raise ValueError("lifetimes must be positive")
    return abs(t_free - t_obs) / (t_free + t_obs)


def thermal_polarization(
    field_t: float, temperature_k: float = ROOM_TEMPERATURE, gyromagnetic_ratio: float = GAMMA_1H
) -> float:
    """Spin-1/2 Boltzmann polarization ``tanh(hbar gamma B / 2 k T)``."""
    if not temperature_k > 0:
        raise ValueError(f"temperature must be positive, got {temperature_k!r}")
    return math.tanh(HBAR * gyromagnetic_ratio * field_t / (2 * K_B * temperature_k))


def enhancement_factor(
    polarization: float, field_t: float, temperature_k: float = ROOM_TEMPERATURE
) -> float:
    """Ratio of a measured polarization to the thermal value."""
    if not (polarization > 0 and field_t > 0 and temperature_k > 0):
        raise ValueError("polarization, field and temperature must be positive")
    return polarization / thermal_polarization(field_t, temperature_k)
