import itertools

import numpy as np
import pytest

from llspin.spin import (
    DensityState,
    SpinSystem,
    coherent_hamiltonian,
    commutator,
    dipolar_tensor_components,
    pcba_system,
    single_spin_operator,
    singlet_pair_population,
    singlet_pair_state,
    singlet_pair_unnormalized,
    singlet_projector,
    swap_operator,
    thermal_state,
    total_spin_operator,
)
from oracles import SX, SY, SZ, ab_levels_hz, op

PAIRS = ((0, 1), (3, 2))


def two_spins(offsets=(0.0, 0.0), j=0.0, pairs=()):
    return SpinSystem(2, offsets, ((0.0, j), (j, 0.0)), pairs)


def bare(n):
    return SpinSystem(n, (0.0,) * n, tuple((0.0,) * n for _ in range(n)))


# ------------------------------------------------------------- SpinSystem


def test_system_rejects_asymmetric_j():
    with pytest.raises(ValueError, match="symmetric"):
        SpinSystem(2, (0, 0), ((0, 1), (2, 0)))


def test_system_rejects_nonzero_diagonal():
    with pytest.raises(ValueError, match="diagonal"):
        SpinSystem(2, (0, 0), ((1, 0), (0, 0)))


@pytest.mark.parametrize("pair", [(0, 0, 1e-10), (1, 0, 1e-10), (0, 2, 1e-10), (0, 1, 0.0), (0, 1, -1e-10)])
def test_system_rejects_bad_pairs(pair):
    with pytest.raises(ValueError):
        SpinSystem(2, (0, 0), ((0, 0), (0, 0)), (pair,))


def test_system_caps_spin_count():
    with pytest.raises(ValueError, match="cap"):
        bare(9)


def test_pair_distance_lookup(pcba):
    assert pcba.pair_distance(1, 0) == pytest.approx(2.48e-10)
    with pytest.raises(KeyError):
        pcba.pair_distance(0, 3)


# ------------------------------------------------------------- operators


def test_single_spin_z_one_spin():
    np.testing.assert_array_equal(single_spin_operator(bare(1), 0, "z"), np.diag([0.5, -0.5]))


def test_single_spin_z_first_of_two_is_most_significant():
    np.testing.assert_array_equal(single_spin_operator(bare(2), 0, "z"), np.diag([0.5, 0.5, -0.5, -0.5]))


def test_ladder_operators():
    s = bare(1)
    np.testing.assert_allclose(single_spin_operator(s, 0, "+"), [[0, 1], [0, 0]])
    np.testing.assert_allclose(single_spin_operator(s, 0, "-"), [[0, 0], [1, 0]])


def test_spin_index_out_of_range():
    with pytest.raises(IndexError):
        single_spin_operator(bare(2), 2, "x")


def test_unknown_axis():
    with pytest.raises(ValueError):
        single_spin_operator(bare(2), 0, "w")


@pytest.mark.parametrize("n", [1, 2, 4])
def test_su2_algebra_every_spin(n):
    s = bare(n)
    eps = {("x", "y"): "z", ("y", "z"): "x", ("z", "x"): "y"}
    for k in range(n):
        for (a, b), c in eps.items():
            lhs = commutator(single_spin_operator(s, k, a), single_spin_operator(s, k, b))
            np.testing.assert_allclose(lhs, 1j * single_spin_operator(s, k, c), atol=1e-15)


def test_embedding_matches_oracle():
    s = bare(3)
    for k, (axis, m) in itertools.product(range(3), zip("xyz", (SX, SY, SZ))):
        np.testing.assert_array_equal(single_spin_operator(s, k, axis), op(3, k, m))


# ------------------------------------------------------------ Hamiltonian


def test_hamiltonian_zero_when_nothing_set():
    assert not np.any(coherent_hamiltonian(bare(3)))


def test_hamiltonian_is_traceless_and_hermitian(pcba):
    h = coherent_hamiltonian(pcba)
    assert abs(np.trace(h)) < 1e-9
    assert np.max(np.abs(h - h.conj().T)) < 1e-12


def test_ab_spectrum_matches_closed_form():
    s = two_spins((0.0, 190.0), 8.0)
    levels = np.sort(np.linalg.eigvalsh(coherent_hamiltonian(s))) / (2 * np.pi)
    np.testing.assert_allclose(levels, ab_levels_hz(0.0, 190.0, 8.0), atol=1e-9)


def test_hamiltonian_spectrum_invariant_under_relabelling(pcba):
    ref = np.linalg.eigvalsh(coherent_hamiltonian(pcba))
    for order in ([3, 2, 1, 0], [1, 0, 3, 2], [2, 0, 3, 1]):
        perm = np.linalg.eigvalsh(coherent_hamiltonian(pcba.permuted(order)))
        np.testing.assert_allclose(perm, ref, atol=1e-10)


# ---------------------------------------------------------- dipolar tensors


def test_t20_definition(pcba):
    t0 = dipolar_tensor_components(pcba, (0, 1))[2]
    ix, iy, iz = (single_spin_operator(pcba, 0, a) for a in "xyz")
    sx, sy, sz = (single_spin_operator(pcba, 1, a) for a in "xyz")
    np.testing.assert_allclose(t0, (2 * iz @ sz - ix @ sx - iy @ sy) / np.sqrt(6), atol=1e-15)


def test_tensors_swap_symmetric(pcba):
    p = swap_operator(pcba, 0, 1)
    for t in dipolar_tensor_components(pcba, (0, 1)):
        np.testing.assert_allclose(p @ t @ p, t, atol=1e-14)


def test_tensors_need_registered_pair(pcba):
    with pytest.raises(KeyError):
        dipolar_tensor_components(pcba, (0, 2))


def test_tensor_adjoint_relation(pcba):
    t = dipolar_tensor_components(pcba, (0, 1))
    for m in range(-2, 3):
        np.testing.assert_allclose(t[m + 2].conj().T, (-1) ** m * t[-m + 2], atol=1e-15)


def test_pair_singlet_commutes_with_tensors(pcba):
    p = singlet_projector(pcba, (0, 1))
    for t in dipolar_tensor_components(pcba, (0, 1)):
        assert np.max(np.abs(commutator(p, t))) < 1e-12


# ------------------------------------------------------------- singlets


def test_singlet_has_no_zeeman_order():
    s = bare(2)
    singlet = np.array([0, 1, -1, 0]) / np.sqrt(2)
    assert abs(singlet @ single_spin_operator(s, 0, "z") @ singlet) < 1e-15
    np.testing.assert_allclose(singlet_projector(s, (0, 1)), np.outer(singlet, singlet), atol=1e-15)


def test_projector_idempotent_unit_trace():
    p = singlet_projector(bare(2), (0, 1))
    np.testing.assert_allclose(p @ p, p, atol=1e-15)
    assert np.trace(p).real == pytest.approx(1)


def test_projector_trace_four_spins(pcba):
    assert np.trace(singlet_projector(pcba, (0, 1))).real == pytest.approx(4)


def test_projector_commutes_with_pair_total_spin(pcba):
    p = singlet_projector(pcba, (0, 1))
    for a in "xyz":
        tot = single_spin_operator(pcba, 0, a) + single_spin_operator(pcba, 1, a)
        assert np.max(np.abs(commutator(p, tot))) < 1e-14


def test_singlet_pair_state_zero_epsilon_is_mixed(pcba):
    np.testing.assert_allclose(singlet_pair_state(pcba, PAIRS, 0.0).matrix, np.eye(16) / 16, atol=1e-16)


@pytest.mark.parametrize("eps", [-0.2, 0.1, 0.7, 1.0])
def test_singlet_pair_state_unit_trace_hermitian(pcba, eps):
    m = singlet_pair_state(pcba, PAIRS, eps).matrix
    assert np.trace(m).real == pytest.approx(1, abs=1e-12)
    assert np.max(np.abs(m - m.conj().T)) < 1e-12


def test_literal_state_has_trace_four_plus_four_eps(pcba):
    assert np.trace(singlet_pair_unnormalized(pcba, PAIRS, 0.3)).real == pytest.approx(4 + 4 * 0.3)


def test_singlet_singlet_population_two_ways(pcba):
    eps = 0.1
    rho = singlet_pair_state(pcba, PAIRS, eps).matrix
    s = np.array([0, 1, -1, 0]) / np.sqrt(2)
    # spin order is A, X, X', A'; build |S>_(A,X) |S>_(A',X') element by element
    psi2 = np.zeros(16)
    for a, x, x2, a2 in itertools.product(range(2), repeat=4):
        psi2[8 * a + 4 * x + 2 * x2 + a2] = s.reshape(2, 2)[a, x] * s.reshape(2, 2)[a2, x2]
    element = float(psi2 @ rho.real @ psi2)
    # formula: (1/4 + eps/2 (P1 + P2)) / (4 + 4 eps) has <SS|.|SS> = (1/4 + eps) / (4 + 4 eps)
    assert element == pytest.approx((0.25 + eps) / (4 + 4 * eps), abs=1e-12)


def test_singlet_pair_state_rejects_non_positive(pcba):
    with pytest.raises(ValueError):
        singlet_pair_state(pcba, PAIRS, -0.5)


def test_overlapping_pairs_rejected(pcba):
    with pytest.raises(ValueError, match="overlap"):
        singlet_pair_state(pcba, ((0, 1), (1, 2)), 0.1)


def test_singlet_pair_population_baseline(pcba):
    assert singlet_pair_population(pcba, PAIRS, np.eye(16) / 16) == pytest.approx(0.25)


# ------------------------------------------------------------- thermal


def test_thermal_zero_is_mixed(pcba):
    np.testing.assert_allclose(thermal_state(pcba, 0.0).matrix, np.eye(16) / 16)


def test_thermal_full_single_spin():
    np.testing.assert_allclose(thermal_state(bare(1), 1.0).matrix, np.diag([1.0, 0.0]))


@pytest.mark.parametrize("p", [1e-5, 3e-3, 0.1])
def test_thermal_expectation_linear(pcba, p):
    rho = thermal_state(pcba, p)
    assert rho.expect(total_spin_operator(pcba, "z")).real == pytest.approx(4 * p / 2, abs=1e-12)


# ------------------------------------------------------------ DensityState


def test_density_state_validation():
    with pytest.raises(ValueError, match="trace"):
        DensityState(np.eye(2))
    with pytest.raises(ValueError, match="Hermitian"):
        DensityState(np.array([[0.5, 1], [0, 0.5]]))
    with pytest.raises(ValueError, match="negative"):
        DensityState(np.diag([1.5, -0.5]))
    with pytest.raises(ValueError, match="power-of-two"):
        DensityState(np.eye(3) / 3)


def test_density_state_is_read_only(pcba):
    rho = thermal_state(pcba, 1e-3)
    with pytest.raises(ValueError):
        rho.matrix[0, 0] = 1
