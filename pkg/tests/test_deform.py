"""Deformation classification: brute-force nullspaces vs generator actions."""

import numpy as np
import pytest

from xxzdeform.chains import OpenKernel, commute_bilocal, commute_boost, \
    commute_homogeneous
from xxzdeform.charges import charge_tower
from xxzdeform.deform import (
    brute_force_closed,
    brute_force_open,
    closed_deformation,
    closed_generator_directions,
    count_deformations,
    generator_step,
    magnon_counter,
    match_basis,
    new_series,
    open_deformation,
    open_generator_directions,
    reduce_range,
    series_matrix,
    typed_first_order,
)
from xxzdeform.model import ModelParams, BoundaryParams
from xxzdeform.pauli import LocalKernel, random_kernel

GENERIC = ModelParams(hbar=0.37j, phi=0.21)
SECOND = ModelParams(hbar=0.52j, phi=-0.34)
BOUNDARY = BoundaryParams(xi_minus=0.8 - 0.3j, xi_plus=1.1 + 0.2j)


@pytest.fixture(scope="module")
def brute1():
    return brute_force_closed(1, GENERIC)


@pytest.fixture(scope="module")
def brute2():
    return brute_force_closed(2, GENERIC)


@pytest.fixture(scope="module")
def bruteo():
    return brute_force_open(GENERIC, BOUNDARY)


@pytest.fixture(scope="module")
def geno():
    return open_generator_directions(GENERIC, BOUNDARY)


def test_counting_split():
    # (basis, local, boost, bilocal, coupling, total)
    assert count_deformations(3) == (4, 2, 2, 1, 1, 10)
    assert count_deformations(4) == (5, 11, 3, 3, 1, 23)
    for k in range(2, 9):
        parts = count_deformations(k)
        assert sum(parts[:5]) == parts[5]


def test_twist_derivative_is_boosted_magnon_counter():
    # dQ2/dphi = -i[B[Z], Q2]: the hopping phases sit on PM ~ e^{-i phi},
    # so the twist flows by the boosted hole counter
    step = 1e-5
    for p in (GENERIC, SECOND):
        q2 = charge_tower(p, max_r=2)[2]
        boosted = commute_boost(magnon_counter(), q2)[1].scale(1j).canonical()
        up = charge_tower(p.replace(phi=p.phi + step), max_r=2)[2].canonical()
        dn = charge_tower(p.replace(phi=p.phi - step), max_r=2)[2].canonical()
        diff = (boosted + (up - dn).scale(0.5 / step)).norm()
        assert diff < 1e-8 * boosted.norm()


def test_boosted_q3_reduces_to_q4():
    qs = charge_tower(GENERIC, max_r=5)
    raw = commute_boost(qs[3], qs[2])[1].scale(1j)
    red, coeffs = reduce_range(raw, qs)
    assert abs(coeffs[4] - 1.5) < 1e-9
    assert red.range <= 3
    assert red.norm() > 1e-3


def test_boosted_q2_is_twice_q3():
    qs = charge_tower(GENERIC, max_r=3)
    raw = commute_boost(qs[2], qs[2])[1].scale(1j)
    red, coeffs = reduce_range(raw, qs)
    assert abs(coeffs[3] - 2.0) < 1e-9
    assert red.norm() < 1e-9 * qs[3].norm()


def test_bilocal_local_part_range_bound():
    # [[A|B], Q] local part has range <= r_A + r_B - 1
    qs = charge_tower(GENERIC, max_r=3)
    loc = commute_bilocal(qs[2], qs[3], qs[2])[2]
    assert loc.canonical().range <= 4


def test_closed_first_order_counts(brute1):
    assert brute1.dimension == 10
    assert brute1.nullity == 15
    assert brute1.label_counts() == {
        "homogeneous": 4, "NN": 2, "long-range": 4}
    assert brute1.dimension == count_deformations(3)[5]


def test_closed_second_order_counts(brute2):
    assert brute2.dimension == 23
    assert brute2.nullity == 29
    assert brute2.label_counts() == {
        "homogeneous": 5, "NN": 2, "long-range": 16}
    assert brute2.dimension == count_deformations(4)[5]


def test_degenerate_point_rejected():
    # free-fermion point: extra conserved structures make the nullspace
    # dimension disagree with the cross-validation point
    with pytest.raises(ValueError):
        brute_force_closed(1, ModelParams(hbar=np.pi / 2, phi=0.21))


def test_closed_partners_solve_pair_equation(brute1):
    qs = charge_tower(GENERIC, max_r=3)
    for x2, x3 in brute1.basis:
        resid = (commute_homogeneous(x2, qs[3])
                 + commute_homogeneous(qs[2], x3)).canonical().norm()
        assert resid < 1e-8 * max(1.0, x2.norm())


def test_match_closed_first_order(brute1):
    rep = match_basis(brute1, closed_generator_directions(GENERIC, 1))
    assert rep["full_rank"]
    assert rep["generator_rank"] == 10
    assert rep["max_residual"] < 1e-8


def test_match_displayed_first_order(brute1):
    rep = match_basis(brute1, typed_first_order(GENERIC))
    assert rep["full_rank"]
    assert rep["max_residual"] < 1e-8


def test_match_closed_second_order(brute2):
    gen = closed_generator_directions(GENERIC, 2)
    assert len(gen) == 23
    rep = match_basis(brute2, gen)
    assert rep["full_rank"]
    assert rep["generator_rank"] == 23
    assert rep["max_residual"] < 1e-8


def test_second_order_local_word_dependency(brute2):
    # the tenth range-3 word adds nothing: one combination of the local
    # directions is the conserved-charge relabeling by Q3 and already spanned
    gen = closed_generator_directions(GENERIC, 2)
    q2 = charge_tower(GENERIC, max_r=2)[2]
    gen["local:MPZ"] = commute_homogeneous(
        LocalKernel({"MPZ": 1.0}), q2).scale(1j)
    rep = match_basis(brute2, gen)
    assert rep["generator_rank"] == 23
    assert not rep["unmatched"]


def test_open_first_order_counts(bruteo):
    assert bruteo.dimension == 13
    assert bruteo.nullity == 17
    assert bruteo.label_counts() == {
        "homogeneous": 3, "NN": 2, "long-range": 5, "boundary": 3}


def test_match_open_first_order(bruteo, geno):
    assert len(geno) == 13
    rep = match_basis(bruteo, geno)
    assert rep["full_rank"]
    assert rep["generator_rank"] == 13
    assert rep["max_residual"] < 1e-8


def test_open_dictionary_left_frame(geno):
    # left-frame reporting: no right pins, short left pins, range <= 3 bulk
    for name, d in geno.items():
        assert d.right.norm() == 0.0
        assert max((len(w) for w in d.left.terms), default=0) <= 2
        assert d.bulk.canonical().norm() == 0.0 or d.bulk.canonical().range <= 3


def test_boost_series_first_order():
    s = new_series(GENERIC, rs=(2, 3))
    generator_step(("boost", 3), s)
    assert s.order == 1
    direct = commute_boost(s.charges[3][0], s.charges[2][0])[1].scale(1j)
    diff = (s.charges[2][1] - direct.canonical()).norm()
    assert diff < 1e-12 * direct.norm()


def test_series_remnant_guard():
    # a non-conserved partner leaves a boost remnant, which must be fatal
    s = new_series(GENERIC, rs=(2, 3))
    rng = np.random.default_rng(3)
    s.charges[3][0] = s.charges[3][0] + \
        random_kernel(rng, 3, n_terms=4).scale(1e-3)
    with pytest.raises(ArithmeticError):
        generator_step(("boost", 3), s)


def test_bilocal_series_commutes_order_by_order():
    s = new_series(GENERIC, rs=(2, 3))
    generator_step(("bilocal", 2, 3), s)
    generator_step(("bilocal", 2, 3), s)
    assert s.order == 2
    scale = max(q.norm() for ql in s.charges.values() for q in ql)
    for k in range(3):
        acc = LocalKernel({})
        for a in range(k + 1):
            acc = acc + commute_homogeneous(s.charges[2][a],
                                            s.charges[3][k - a])
        assert acc.canonical().norm() < 1e-9 * scale**2


def test_similarity_generator_preserves_spectrum():
    s = new_series(GENERIC, rs=(2,))
    x = LocalKernel({"PM": 1.0, "ZZ": 0.4})
    for _ in range(3):
        generator_step(x, s)
    L, lam = 8, 1e-3
    base = series_matrix(s, 2, 0.0, L).toarray()
    m = series_matrix(s, 2, lam, L).toarray()
    e0 = np.sort_complex(np.linalg.eigvals(base))
    e1 = np.sort_complex(np.linalg.eigvals(m))
    assert np.abs(e1 - e0).max() < 1e-9


def test_match_accepts_series_objects(brute1):
    s = new_series(GENERIC, rs=(2,))
    generator_step(LocalKernel({"PM": 1.0}), s)
    rep = match_basis(brute1, {"sim:PM": s})
    assert rep["generator_residuals"]["sim:PM"] < 1e-8


def test_named_closed_deformations():
    ranges = {"alpha3": 3, "beta23": 4, "eta2": 3, "phi": 2}
    for name, r in ranges.items():
        k = closed_deformation(name, GENERIC).canonical()
        assert k.norm() > 1e-3
        assert k.range == r
    with pytest.raises(ValueError):
        closed_deformation("nope", GENERIC)


def test_named_open_deformations():
    for name in ("delta3", "alpha3", "beta23", "eta3"):
        d = open_deformation(name, GENERIC, BOUNDARY)
        assert isinstance(d, OpenKernel)
        if name == "delta3":
            # pure boundary direction: conserved bulk commutes away
            assert d.bulk.canonical().norm() < 1e-10
            assert d.left.norm() > 1e-3 and d.right.norm() > 1e-3
        else:
            assert d.bulk.canonical().norm() > 1e-3
    with pytest.raises(ValueError):
        open_deformation("nope", GENERIC, BOUNDARY)
