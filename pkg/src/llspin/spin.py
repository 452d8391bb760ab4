"""Spin-1/2 operators, coherent Hamiltonians and special states.

Basis convention: spin 0 is the most significant tensor factor and
``|0> = |alpha>`` (m = +1/2).  Operators are dense ``complex128`` arrays of
shape ``(2**n, 2**n)``; Hamiltonians are in rad/s.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .constants import GAMMA_1H, ORTHO_HH_DISTANCE

MAX_SPINS = 8
HERMITIAN_TOL = 1e-12

_PAULI_HALF = {
    "x": np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    "y": np.array([[0, -0.5j], [0.5j, 0]], dtype=complex),
    "z": np.array([[0.5, 0], [0, -0.5]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}
_AXIS_ALIASES = {"p": "+", "m": "-", "−": "-"}


@dataclass(frozen=True)
class SpinSystem:
    """Static description of a homonuclear spin-1/2 system.

    Args:
        n_spins: number of spins.
        offsets_hz: rotating-frame chemical-shift offset of every spin (Hz).
        j_hz: symmetric matrix of scalar couplings (Hz), zero diagonal.
        dipolar_pairs: ``(i, j, distance_m)`` entries with ``i < j``.
        gyromagnetic_ratio: rad s^-1 T^-1, protons by default.
        labels: optional display names, one per spin.
    """

    n_spins: int
    offsets_hz: tuple[float, ...]
    j_hz: tuple[tuple[float, ...], ...]
    dipolar_pairs: tuple[tuple[int, int, float], ...] = ()
    gyromagnetic_ratio: float = GAMMA_1H
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.n_spins
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ValueError(f"n_spins must be a positive integer, got {n!r}")
        if n > MAX_SPINS:
            raise ValueError(f"n_spins={n} exceeds the cap of {MAX_SPINS}")
        offsets = tuple(float(v) for v in self.offsets_hz)
        if len(offsets) != n:
            raise ValueError(f"expected {n} offsets, got {len(offsets)}")
        j = np.asarray(self.j_hz, dtype=float)
        if j.shape != (n, n):
            raise ValueError(f"j_hz must be {n}x{n}, got shape {j.shape}")
        if not np.all(np.isfinite(j)) or not all(np.isfinite(offsets)):
            raise ValueError("offsets and couplings must be finite")
        if np.any(np.diag(j) != 0):
            raise ValueError("j_hz must have a zero diagonal")
        if not np.array_equal(j, j.T):
            raise ValueError("j_hz must be symmetric")
        pairs = []
        seen = set()
        for entry in self.dipolar_pairs:
            i, k, r = entry
            i, k, r = int(i), int(k), float(r)
            if not (0 <= i < k < n):
                raise ValueError(f"dipolar pair ({i}, {k}) must satisfy 0 <= i < j < {n}")
            if not (np.isfinite(r) and r > 0):
                raise ValueError(f"dipolar pair ({i}, {k}) has non-positive distance {r!r}")
            if (i, k) in seen:
                raise ValueError(f"dipolar pair ({i}, {k}) listed twice")
            seen.add((i, k))
            pairs.append((i, k, r))
        labels = tuple(str(s) for s in self.labels) or tuple(str(i) for i in range(n))
        if len(labels) != n or len(set(labels)) != n:
            raise ValueError("labels must be unique, one per spin")
        object.__setattr__(self, "n_spins", int(n))
        object.__setattr__(self, "offsets_hz", offsets)
        object.__setattr__(self, "j_hz", tuple(tuple(float(v) for v in row) for row in j))
        object.__setattr__(self, "dipolar_pairs", tuple(pairs))
        object.__setattr__(self, "gyromagnetic_ratio", float(self.gyromagnetic_ratio))
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    @property
    def j_matrix(self) -> np.ndarray:
        return np.array(self.j_hz, dtype=float)

    def pair_distance(self, i: int, j: int) -> float:
        i, j = sorted((i, j))
        for a, b, r in self.dipolar_pairs:
            if (a, b) == (i, j):
                return r
        raise KeyError(f"dipolar pair ({i}, {j}) is not registered")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown spin label {label!r}") from None

    def permuted(self, order: Sequence[int]) -> "SpinSystem":
        """Relabel spins so that new spin ``k`` is old spin ``order[k]``."""
        order = list(order)
        if sorted(order) != list(range(self.n_spins)):
            raise ValueError("order must be a permutation of the spin indices")
        inv = {old: new for new, old in enumerate(order)}
        j = self.j_matrix[np.ix_(order, order)]
        pairs = []
        for a, b, r in self.dipolar_pairs:
            na, nb = sorted((inv[a], inv[b]))
            pairs.append((na, nb, r))
        return SpinSystem(
            n_spins=self.n_spins,
            offsets_hz=tuple(self.offsets_hz[k] for k in order),
            j_hz=tuple(map(tuple, j)),
            dipolar_pairs=tuple(sorted(pairs)),
            gyromagnetic_ratio=self.gyromagnetic_ratio,
            labels=tuple(self.labels[k] for k in order),
        )


def pcba_system(
    delta_nu_hz: float = 190.0,
    j_ortho_hz: float = 8.0,
    distance_m: float = ORTHO_HH_DISTANCE,
) -> SpinSystem:
    """Aromatic AA'XX' protons of p-chlorobenzoic acid.

    Spin order is ``A, X, X', A'`` so the ortho pairs are (0, 1) and (3, 2).
    Only the two ortho couplings and dipolar pairs are switched on.
    """
    j = np.zeros((4, 4))
    j[0, 1] = j[1, 0] = j_ortho_hz
    j[2, 3] = j[3, 2] = j_ortho_hz
    return SpinSystem(
        n_spins=4,
        offsets_hz=(0.0, delta_nu_hz, delta_nu_hz, 0.0),
        j_hz=tuple(map(tuple, j)),
        dipolar_pairs=((0, 1, distance_m), (2, 3, distance_m)),
        labels=("A", "X", "X'", "A'"),
    )


PCBA_PAIRS = ((0, 1), (3, 2))


@dataclass(frozen=True, eq=False)
class DensityState:
    """A validated density matrix (Hermitian, unit trace, positive)."""

    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or not _is_power_of_two(m.shape[0]):
            raise ValueError(f"density matrix must be square with a power-of-two dimension, got {m.shape}")
        if not is_hermitian(m):
            raise ValueError("density matrix is not Hermitian")
        tr = np.trace(m).real
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"density matrix trace is {tr!r}, expected 1")
        if np.linalg.eigvalsh(m).min() < -1e-10:
            raise ValueError("density matrix has negative eigenvalues")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def expect(self, op: np.ndarray) -> complex:
        return expectation(self.matrix, op)


def _is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


def is_hermitian(m: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(m - m.conj().T), initial=0.0) < tol)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def expectation(rho: np.ndarray, op: np.ndarray) -> complex:
    """``Tr(rho @ op)`` without forming the product."""
    return complex(np.einsum("ij,ji->", rho, op))


def _embed(n: int, factors: dict[int, np.ndarray]) -> np.ndarray:
    eye = np.eye(2, dtype=complex)
    return reduce(np.kron, [factors.get(k, eye) for k in range(n)])


def _check_spin(system: SpinSystem, spin: int) -> int:
    if not isinstance(spin, (int, np.integer)) or not 0 <= spin < system.n_spins:
        raise IndexError(f"spin index {spin!r} out of range for {system.n_spins} spins")
    return int(spin)


def single_spin_operator(system: SpinSystem, spin: int, axis: str) -> np.ndarray:
    """Spin-1/2 operator ``I_axis`` of one spin embedded in the full space.

    ``axis`` is one of ``x, y, z, +, -``.
    """
    spin = _check_spin(system, spin)
    key = _AXIS_ALIASES.get(axis, axis)
    if key not in _PAULI_HALF:
        raise ValueError(f"unknown axis {axis!r}")
    return _embed(system.n_spins, {spin: _PAULI_HALF[key]})


def total_spin_operator(system: SpinSystem, axis: str) -> np.ndarray:
    return sum(single_spin_operator(system, k, axis) for k in range(system.n_spins))


def scalar_product(system: SpinSystem, i: int, j: int) -> np.ndarray:
    """``I_i . I_j``."""
    return sum(
        single_spin_operator(system, i, a) @ single_spin_operator(system, j, a) for a in "xyz"
    )


def coherent_hamiltonian(system: SpinSystem) -> np.ndarray:
    """Offsets plus full isotropic J couplings, rad/s."""
    h = np.zeros((system.dim, system.dim), dtype=complex)
    for k, nu in enumerate(system.offsets_hz):
        if nu:
            h += 2 * np.pi * nu * single_spin_operator(system, k, "z")
    jm = system.j_matrix
    for i in range(system.n_spins):
        for k in range(i + 1, system.n_spins):
            if jm[i, k]:
                h += 2 * np.pi * jm[i, k] * scalar_product(system, i, k)
    return h


def _check_pair(system: SpinSystem, pair: Iterable[int]) -> tuple[int, int]:
    i, j = (int(p) for p in pair)
    _check_spin(system, i)
    _check_spin(system, j)
    if i == j:
        raise ValueError("a pair needs two distinct spins")
    return i, j


def dipolar_tensor_components(system: SpinSystem, pair: tuple[int, int]) -> list[np.ndarray]:
    """Rank-2 bilinear spherical tensor operators ``T_{2,m}``, m = -2..2.

    Normalization follows ``T_{2,0} = (3 Iz Sz - I.S) / sqrt(6)``.  The pair
    must be registered as a dipolar pair of ``system``.
    """
    i, j = _check_pair(system, pair)
    system.pair_distance(i, j)
    return _rank2_tensors(system, i, j)


def _rank2_tensors(system: SpinSystem, i: int, j: int) -> list[np.ndarray]:
    op = lambda k, a: single_spin_operator(system, k, a)  # noqa: E731
    ip, im, iz = op(i, "+"), op(i, "-"), op(i, "z")
    sp, sm, sz = op(j, "+"), op(j, "-"), op(j, "z")
    t0 = (2 * iz @ sz - op(i, "x") @ op(j, "x") - op(i, "y") @ op(j, "y")) / np.sqrt(6)
    tp1 = -(ip @ sz + iz @ sp) / 2
    tm1 = (im @ sz + iz @ sm) / 2
    tp2 = ip @ sp / 2
    tm2 = im @ sm / 2
    return [tm2, tm1, t0, tp1, tp2]


def singlet_projector(system: SpinSystem, pair: tuple[int, int]) -> np.ndarray:
    """Projector onto the two-spin singlet of ``pair``, identity elsewhere."""
    i, j = _check_pair(system, pair)
    return np.eye(system.dim, dtype=complex) / 4 - scalar_product(system, i, j)


def _disjoint_pairs(system, pairs) -> tuple[tuple[int, int], tuple[int, int]]:
    (a, x), (a2, x2) = pairs
    p1 = _check_pair(system, (a, x))
    p2 = _check_pair(system, (a2, x2))
    if set(p1) & set(p2):
        raise ValueError(f"pairs {p1} and {p2} overlap")
    return p1, p2


def singlet_pair_unnormalized(
    system: SpinSystem, pairs: tuple[tuple[int, int], tuple[int, int]], epsilon: float
) -> np.ndarray:
    """The singlet-pair operator with the literal coefficients (trace ``4 + 4 eps`` for n = 4)."""
    p1, p2 = _disjoint_pairs(system, pairs)
    eye = np.eye(system.dim, dtype=complex)
    rest = 2 ** (system.n_spins - 4)
    return epsilon / 2 * (singlet_projector(system, p1) + singlet_projector(system, p2)) + eye / (4 * rest)


def singlet_pair_state(
    system: SpinSystem,
    pairs: tuple[tuple[int, int], tuple[int, int]],
    epsilon: float,
) -> DensityState:
    """Singlet order on two disjoint pairs, renormalized to unit trace.

    ``epsilon`` is the coefficient before renormalization.
    """
    if system.n_spins < 4:
        raise ValueError("a singlet-pair state needs at least four spins")
    if not abs(epsilon) <= 1:
        raise ValueError(f"|epsilon| must be <= 1, got {epsilon!r}")
    rho = singlet_pair_unnormalized(system, pairs, epsilon)
    tr = np.trace(rho).real
    if tr <= 0:
        raise ValueError(f"epsilon={epsilon!r} gives a non-normalizable state")
    return DensityState(rho / tr, label=f"singlet-pair eps={epsilon:g}")


def singlet_pair_operator(system: SpinSystem, pairs) -> np.ndarray:
    """Traceless singlet-order operator ``P_S(AX) + P_S(A'X') - 1/2``.

    This is the part of the singlet-pair state that carries the encoded
    polarization.
    """
    p1, p2 = _disjoint_pairs(system, pairs)
    eye = np.eye(system.dim, dtype=complex)
    return singlet_projector(system, p1) + singlet_projector(system, p2) - eye / 2


def singlet_pair_population(system: SpinSystem, pairs, rho: np.ndarray) -> float:
    """Mean singlet population of the two pairs; 1/4 for the mixed state."""
    p1, p2 = _disjoint_pairs(system, pairs)
    return 0.5 * (
        expectation(rho, singlet_projector(system, p1)).real
        + expectation(rho, singlet_projector(system, p2)).real
    )


def thermal_state(system: SpinSystem, polarization: float) -> DensityState:
    """High-temperature Zeeman state with ``<Iz_k> = p / 2`` on every spin."""
    if not abs(polarization) <= 1:
        raise ValueError(f"|polarization| must be <= 1, got {polarization!r}")
    dim = system.dim
    rho = np.eye(dim, dtype=complex) / dim + polarization * total_spin_operator(system, "z") / (dim / 2)
    return DensityState(rho, label=f"thermal p={polarization:g}")


def maximally_mixed(system: SpinSystem) -> DensityState:
    return DensityState(np.eye(system.dim, dtype=complex) / system.dim, label="mixed")


def swap_operator(system: SpinSystem, i: int, j: int) -> np.ndarray:
    """Permutation operator exchanging spins ``i`` and ``j``."""
    i, j = _check_pair(system, (i, j))
    return 2 * scalar_product(system, i, j) + np.eye(system.dim, dtype=complex) / 2
