"""Relaxation superoperators, Liouvillian assembly and decoherence-free subspaces.

Density matrices are vectorized row-major (``rho.reshape(-1)``), so
``vec(A rho B) = (A kron B^T) vec(rho)`` and a commutator with ``A`` is the
superoperator ``A kron 1 - 1 kron A^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .constants import GAMMA_1H, HBAR, MU0_OVER_4PI
from .spin import SpinSystem, _rank2_tensors, single_spin_operator

# Per-m weight of the isotropic-tumbling Redfield sum.  With J(w) = 2 tau_c /
# (1 + w^2 tau_c^2) this gives the like-spin result
# 1/T1 = (3/20) b^2 [J(w0) + 4 J(2 w0)] for an isolated pair.
DIPOLAR_CM = 2.0 / 5.0


@dataclass(frozen=True)
class RelaxationModel:
    """Parameters of the relaxation mechanisms.

    ``dipolar_pairs_active`` of ``None`` means every registered pair.
    """

    tau_c: float
    random_field_rate: float = 0.0
    larmor_rad_s: float = 0.0
    dipolar_pairs_active: Optional[tuple[tuple[int, int], ...]] = None

    def __post_init__(self):
        if not (math.isfinite(self.tau_c) and self.tau_c > 0):
            raise ValueError(f"tau_c must be positive, got {self.tau_c!r}")
        if not (math.isfinite(self.random_field_rate) and self.random_field_rate >= 0):
            raise ValueError(f"random_field_rate must be >= 0, got {self.random_field_rate!r}")
        if not (math.isfinite(self.larmor_rad_s) and self.larmor_rad_s >= 0):
            raise ValueError(f"larmor_rad_s must be >= 0, got {self.larmor_rad_s!r}")
        if self.dipolar_pairs_active is not None:
            pairs = tuple(tuple(sorted((int(i), int(j)))) for i, j in self.dipolar_pairs_active)
            object.__setattr__(self, "dipolar_pairs_active", pairs)


@dataclass(frozen=True)
class BindingModel:
    """Fast-exchange binding to a receptor.

    Attributes:
        bound_fraction: fraction of ligand bound at any instant.
        bound_extra_random_field_rate: leakage added while bound (s^-1),
            standing in for intermolecular dipoles with receptor protons.
        bound_tau_c: rotational correlation time of the complex (s).
    """

    bound_fraction: float
    bound_extra_random_field_rate: float
    bound_tau_c: float

    def __post_init__(self):
        if not 0 <= self.bound_fraction <= 1:
            raise ValueError(f"bound_fraction must lie in [0, 1], got {self.bound_fraction!r}")
        if not (math.isfinite(self.bound_extra_random_field_rate) and self.bound_extra_random_field_rate >= 0):
            raise ValueError("bound_extra_random_field_rate must be >= 0")
        if not (math.isfinite(self.bound_tau_c) and self.bound_tau_c > 0):
            raise ValueError("bound_tau_c must be positive")


def larmor_frequency(field_t: float, gyromagnetic_ratio: float = GAMMA_1H) -> float:
    """Larmor angular frequency |gamma B| in rad/s."""
    return abs(gyromagnetic_ratio * field_t)


def dipolar_coupling_constant(distance_m: float, gyromagnetic_ratio: float = GAMMA_1H) -> float:
    """``b = -(mu0 / 4 pi) hbar gamma^2 / r^3`` in rad/s."""
    if not distance_m > 0:
        raise ValueError(f"distance must be positive, got {distance_m!r}")
    return -MU0_OVER_4PI * HBAR * gyromagnetic_ratio**2 / distance_m**3


def spectral_density(omega, tau_c: float):
    """Lorentzian ``J(w) = 2 tau_c / (1 + w^2 tau_c^2)``."""
    if not tau_c > 0:
        raise ValueError(f"tau_c must be positive, got {tau_c!r}")
    omega = np.asarray(omega, dtype=float)
    out = 2 * tau_c / (1 + (omega * tau_c) ** 2)
    return float(out) if out.ndim == 0 else out


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1)


def unvec(v: np.ndarray) -> np.ndarray:
    d = math.isqrt(v.size)
    return np.asarray(v).reshape(d, d)


def n_spins_of(generator: np.ndarray) -> int:
    """Spin count from a Liouville-space generator's dimension 4**n."""
    dim = generator.shape[0]
    n = round(math.log(dim, 4)) if dim > 0 else -1
    if dim < 4 or 4**n != dim:
        raise ValueError(f"generator dimension {dim} is not a power of four")
    return n


def commutator_superoperator(a: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> [a, rho]``."""
    eye = np.eye(a.shape[0], dtype=complex)
    return np.kron(a, eye) - np.kron(eye, a.T)


def hamiltonian_superoperator(h: np.ndarray) -> np.ndarray:
    """Coherent generator ``-i [H, .]``."""
    return -1j * commutator_superoperator(h)


def _active_pairs(system: SpinSystem, model: RelaxationModel) -> list[tuple[int, int, float]]:
    registered = {(i, j): r for i, j, r in system.dipolar_pairs}
    if model.dipolar_pairs_active is None:
        return [(i, j, r) for (i, j), r in registered.items()]
    out = []
    for i, j in model.dipolar_pairs_active:
        if (i, j) not in registered:
            raise KeyError(f"active dipolar pair ({i}, {j}) is not registered in the system")
        out.append((i, j, registered[(i, j)]))
    return out


def dipolar_redfield_blocks(system: SpinSystem, model: RelaxationModel) -> dict[int, np.ndarray]:
    """Unweighted dipolar pieces keyed by ``|m|``.

    ``blocks[|m|] = -(3/2) c_m sum_pairs b^2 sum_{+-m} [T_m, [T_m^dag, .]]``;
    the Redfield generator is ``sum_|m| J(|m| w0) blocks[|m|]``.
    """
    d = system.dim**2
    blocks = {m: np.zeros((d, d), dtype=complex) for m in range(3)}
    for i, j, r in _active_pairs(system, model):
        b = dipolar_coupling_constant(r, system.gyromagnetic_ratio)
        for m, t in zip(range(-2, 3), _rank2_tensors(system, i, j)):
            c = commutator_superoperator(t)
            blocks[abs(m)] -= 1.5 * b**2 * DIPOLAR_CM * (c @ c.conj().T)
    return blocks


def combine_dipolar_blocks(blocks: dict[int, np.ndarray], tau_c: float, larmor_rad_s: float) -> np.ndarray:
    return sum(spectral_density(m * larmor_rad_s, tau_c) * blk for m, blk in blocks.items())


def dipolar_redfield_superoperator(system: SpinSystem, model: RelaxationModel) -> np.ndarray:
    """Secular intramolecular dipolar Redfield generator.

    ``R = -sum_pairs (3/2) b^2 sum_m c_m J(m w0) [T_m, [T_m^dag, .]]`` with
    isotropic rotational diffusion (one correlation time).  Every term
    conserves coherence order, which is the secular approximation at high
    field.
    """
    return combine_dipolar_blocks(dipolar_redfield_blocks(system, model), model.tau_c, model.larmor_rad_s)


def random_field_superoperator(system: SpinSystem, rate: float) -> np.ndarray:
    """Uncorrelated isotropic fluctuating fields on every spin.

    ``R = -k sum_i sum_a [I_a^i, [I_a^i, .]]``; a lone spin then has
    ``1/T1 = 1/T2 = 2k``.
    """
    if not rate >= 0:
        raise ValueError(f"random-field rate must be >= 0, got {rate!r}")
    d = system.dim**2
    if rate == 0:
        return np.zeros((d, d), dtype=complex)
    return rate * random_field_unit(system)


def random_field_unit(system: SpinSystem) -> np.ndarray:
    """Random-field generator at unit rate."""
    d = system.dim**2
    gen = np.zeros((d, d), dtype=complex)
    for k in range(system.n_spins):
        for axis in "xyz":
            c = commutator_superoperator(single_spin_operator(system, k, axis))
            gen -= c @ c
    return gen


def relaxation_superoperator(system: SpinSystem, model: RelaxationModel) -> np.ndarray:
    """Dipolar plus random-field generator for one model."""
    return dipolar_redfield_superoperator(system, model) + random_field_superoperator(
        system, model.random_field_rate
    )


def bound_model(free: RelaxationModel, binding: BindingModel) -> RelaxationModel:
    """Relaxation parameters felt by a ligand while bound."""
    return replace(
        free,
        tau_c=binding.bound_tau_c,
        random_field_rate=free.random_field_rate + binding.bound_extra_random_field_rate,
    )


def exchange_averaged_model(
    system: SpinSystem, free: RelaxationModel, binding: Optional[BindingModel]
) -> np.ndarray:
    """Fast-exchange average ``(1 - f) R(free) + f R(bound)``."""
    r_free = relaxation_superoperator(system, free)
    if binding is None or binding.bound_fraction == 0:
        return r_free
    f = binding.bound_fraction
    r_bound = relaxation_superoperator(system, bound_model(free, binding))
    if f == 1:
        return r_bound
    return (1 - f) * r_free + f * r_bound


def assemble_liouvillian(
    h: np.ndarray,
    *relaxation: np.ndarray,
    equilibrium: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``L = -i (H kron 1 - 1 kron H^T) + sum R_k``.

    With ``equilibrium`` the relaxation drives towards that state instead of
    the identity: ``R(rho) -> R(rho - Tr(rho) rho_eq)``.  The extra term is
    linear in ``rho`` because the trace is, so ``L`` stays a matrix.
    """
    h = np.asarray(h, dtype=complex)
    d = h.shape[0] ** 2
    gen = hamiltonian_superoperator(h)
    r_total = np.zeros((d, d), dtype=complex)
    for r in relaxation:
        if r.shape != (d, d):
            raise ValueError(f"relaxation generator of shape {r.shape} does not match {(d, d)}")
        r_total += r
    gen += r_total
    if equilibrium is not None:
        eq = vec(equilibrium)
        if eq.size != d:
            raise ValueError("equilibrium state does not match the Liouvillian dimension")
        trace_row = vec(np.eye(h.shape[0])).conj()
        gen -= np.outer(r_total @ eq, trace_row)
    return gen


def liouvillian(
    system: SpinSystem,
    model: Optional[RelaxationModel] = None,
    binding: Optional[BindingModel] = None,
    equilibrium: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Coherent Hamiltonian plus (exchange-averaged) relaxation."""
    from .spin import coherent_hamiltonian

    h = coherent_hamiltonian(system)
    if model is None:
        return assemble_liouvillian(h)
    return assemble_liouvillian(h, exchange_averaged_model(system, model, binding), equilibrium=equilibrium)


@dataclass(frozen=True, eq=False)
class DecoherenceFreeSubspace:
    """Hilbert-Schmidt orthonormal basis of the kernel of a relaxation generator."""

    basis: tuple[np.ndarray, ...]
    singular_values: np.ndarray
    tol: float

    @property
    def dimension(self) -> int:
        return len(self.basis)

    def projection_residual(self, op: np.ndarray) -> float:
        """Max-norm of the part of ``op`` outside the subspace."""
        v = vec(op)
        if not self.basis:
            return float(np.max(np.abs(v)))
        q = np.stack([vec(b) for b in self.basis], axis=1)
        resid = v - q @ (q.conj().T @ v)
        return float(np.max(np.abs(resid)))


def decoherence_free_subspace(l_relax: np.ndarray, tol: Optional[float] = None) -> DecoherenceFreeSubspace:
    """Null space of a relaxation-only generator.

    ``tol`` defaults to ``1e-9`` times the largest singular value.  Raises
    ``ValueError`` if the singular-value gap at the cut is smaller than
    ``10 * tol``.
    """
    l_relax = np.asarray(l_relax, dtype=complex)
    n_spins_of(l_relax)
    d = math.isqrt(l_relax.shape[0])
    _, s, vh = np.linalg.svd(l_relax)
    if tol is None:
        tol = 1e-9 * s[0] if s[0] > 0 else 1e-12
    null = s < tol
    if null.any() and not null.all():
        above = s[~null].min()
        below = s[null].max()
        if above - below < 10 * tol:
            raise ValueError(
                f"singular values {below:.3e} and {above:.3e} straddle tol={tol:.3e}; no clean gap"
            )
    elif not null.any() and s[-1] < 10 * tol:
        raise ValueError(f"smallest singular value {s[-1]:.3e} is within 10x of tol={tol:.3e}")
    basis = tuple(vh[k].conj().reshape(d, d) for k in np.flatnonzero(null))
    return DecoherenceFreeSubspace(basis=basis, singular_values=s, tol=float(tol))
