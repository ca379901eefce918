"""Charge tower, closed-form kernels, and open-chain boundary completions."""

import numpy as np
import pytest

from xxzdeform.chains import OpenKernel, open_commute, open_kernel_matrix
from xxzdeform.charges import (
    charge_tower,
    closed_vacuum_value,
    complete_open_charge,
    open_q2,
    open_q3,
    open_q4,
    open_vacuum_value,
    pin_pool,
    q3_kernel,
    q4_kernel,
    solve_left_pin,
    vacuum_normalized,
    vacuum_weight,
)
from xxzdeform.model import ModelParams, BoundaryParams, boundary_hamiltonians
from xxzdeform.pauli import LocalKernel, kernel_to_matrix, random_kernel

GENERIC = ModelParams(hbar=0.37j, phi=0.21)
SECOND = ModelParams(hbar=0.52j, phi=-0.34)
COMPLEX = ModelParams(hbar=0.3 + 0.11j, phi=0.17 - 0.05j)
BOUNDARY = BoundaryParams(xi_minus=0.8 - 0.3j, xi_plus=1.1 + 0.2j)


def comm_norm(a, b):
    return np.abs(a @ b - b @ a).max()


def test_typed_q3_matches_tower():
    for p in (GENERIC, SECOND, COMPLEX):
        qs = charge_tower(p, max_r=3)
        diff = (qs[3] - q3_kernel(p)).norm()
        assert diff < 1e-12 * qs[3].norm()


def test_typed_q4_matches_tower():
    for p in (GENERIC, SECOND, COMPLEX):
        qs = charge_tower(p, max_r=4)
        diff = (qs[4] - q4_kernel(p)).norm()
        assert diff < 1e-12 * qs[4].norm()


def test_typed_forms_require_unit_kappa():
    p = ModelParams(hbar=0.37j, phi=0.21, kappa=1.3)
    with pytest.raises(ValueError):
        q3_kernel(p)
    with pytest.raises(ValueError):
        q4_kernel(p)


def test_tower_pairwise_commuting_dense():
    L = 10
    qs = charge_tower(GENERIC, max_r=5)
    mats = {r: kernel_to_matrix(k, L, boundary="closed").toarray()
            for r, k in qs.items()}
    scale = max(np.abs(m).max() for m in mats.values())
    for r in (2, 3, 4):
        for s in range(r + 1, 6):
            assert comm_norm(mats[r], mats[s]) < 1e-10 * scale


def test_q4_vacuum_density():
    # the canonical range-4 charge is not vacuum-subtracted: its diagonal
    # words carry weight -pref/(2 ch^2) per window
    L = 8
    q4 = q4_kernel(GENERIC)
    ih = 1j * GENERIC.hbar
    pref = 1j * GENERIC.hbar**3 / (3 * np.tanh(ih) ** 3)
    expected = -pref / (2 * np.cosh(ih) ** 2)
    assert abs(vacuum_weight(q4) - expected) < 1e-12
    m = kernel_to_matrix(q4, L, boundary="closed")
    assert abs(m[0, 0] - closed_vacuum_value(q4, L)) < 1e-12


def test_open_q2_pins_are_boundary_fields():
    h2 = open_q2(GENERIC, BOUNDARY)
    hm, hp = boundary_hamiltonians(GENERIC, BOUNDARY)
    assert abs(h2.left.terms["Z"] - 0.5 * (hm[0, 0] - hm[1, 1])) < 1e-12
    assert abs(h2.right.terms["Z"] - 0.5 * (hp[0, 0] - hp[1, 1])) < 1e-12
    for L in (2, 5, 9):
        assert abs(open_vacuum_value(h2, L)) < 1e-12
    m = open_kernel_matrix(h2, 5)
    assert abs(m[0, 0]) < 1e-12


def test_open_q4_conserved_dense():
    for p in (GENERIC, SECOND):
        h2 = open_q2(p, BOUNDARY)
        q4o = open_q4(p, BOUNDARY)
        for L in (6, 7):
            hm = open_kernel_matrix(h2, L).toarray()
            qm = open_kernel_matrix(q4o, L).toarray()
            assert comm_norm(hm, qm) < 1e-12 * np.abs(qm).max()
            assert abs(qm[0, 0]) < 1e-12


def test_open_q4_pin_diagnostics():
    bulk = charge_tower(GENERIC, max_r=4)[4]
    h2 = open_q2(GENERIC, BOUNDARY)
    pin, info = solve_left_pin(bulk, h2)
    assert info["residual"] < 1e-12
    assert info["rank"] == info["pool"] == len(pin_pool(3)) == 19
    assert "obstructed" not in info
    # the solved system has full column rank, so the pin is unique
    _, info2 = complete_open_charge(bulk, h2)
    assert info2["left"]["residual"] < 1e-12
    assert info2["right"]["residual"] < 1e-12


def test_open_q3_has_no_boundary_completion():
    # odd charges cannot be completed on the open chain; the least-squares
    # residual stays at order one instead of dropping to rounding level
    bulk = q3_kernel(GENERIC)
    h2 = open_q2(GENERIC, BOUNDARY)
    _, info = solve_left_pin(bulk, h2)
    assert info["obstructed"]
    assert info["residual"] > 0.5


def test_open_q3_reference_generator():
    # with the reference pins the open commutator with the Hamiltonian is
    # purely pinned (admissible as a deformation generator) in both frames,
    # while the finite-chain commutator itself stays nonzero
    h2 = open_q2(GENERIC, BOUNDARY)
    q3o = open_q3(GENERIC, BOUNDARY)
    der = open_commute(q3o, h2)
    assert der.bulk.canonical().norm() < 1e-12
    assert der.left.norm() > 0.1
    der_m = open_commute(q3o.mirror(), h2.mirror())
    assert der_m.bulk.canonical().norm() < 1e-12
    assert der_m.left.norm() > 0.1
    L = 6
    hm = open_kernel_matrix(h2, L).toarray()
    qm = open_kernel_matrix(q3o, L).toarray()
    assert comm_norm(hm, qm) > 0.1


def test_vacuum_normalized_random_kernels():
    rng = np.random.default_rng(7)
    for _ in range(10):
        op = OpenKernel(
            left=random_kernel(rng, 2, n_terms=3),
            bulk=random_kernel(rng, 3, n_terms=5),
            right=random_kernel(rng, 2, n_terms=3),
        )
        n = vacuum_normalized(op)
        for L in (4, 7):
            assert abs(open_vacuum_value(n, L)) < 1e-12
            m = open_kernel_matrix(n, L)
            assert abs(m[0, 0]) < 1e-12
