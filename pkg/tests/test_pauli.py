"""Word algebra, canonical forms and realizations on finite chains."""

import numpy as np
import pytest

from xxzdeform.pauli import (
    ALPHABET,
    LETTER_MATRICES,
    LocalKernel,
    binomial,
    canonical_words,
    canonicalize,
    kernel_commutator_at_offset,
    kernel_sector_matrix,
    kernel_to_matrix,
    matrix_to_kernel,
    random_kernel,
    sector_basis,
    spin_preserving_words,
    trim_word,
    word_matrix,
    word_product,
    word_spin,
)


def kron_chain(mats):
    out = np.array([[1.0 + 0.0j]])
    for m in mats:
        out = np.kron(out, m)
    return out


def word_at(word, a, L, wrap):
    """Dense realization of a word with first letter on site a (1-based)."""
    letters = ["I"] * L
    for k, letter in enumerate(word):
        site = a + k
        if wrap:
            site = (site - 1) % L + 1
        letters[site - 1] = letter
    return kron_chain([LETTER_MATRICES[c] for c in letters])


def dense(kernel, L, boundary="closed", a=None):
    out = np.zeros((2**L, 2**L), dtype=complex)
    wrap = boundary == "closed"
    for w, c in kernel.terms.items():
        if boundary == "pinned":
            out += c * word_at(w, a, L, False)
        else:
            stop = L if wrap else L - len(w) + 1
            for pos in range(1, stop + 1):
                out += c * word_at(w, pos, L, wrap)
    return out


def test_letter_products_match_matrices():
    for x in ALPHABET:
        for y in ALPHABET:
            prod = word_product(x, y)
            mat = sum(
                (c * LETTER_MATRICES[w] for w, c in prod),
                np.zeros((2, 2), dtype=complex),
            )
            assert np.allclose(mat, LETTER_MATRICES[x] @ LETTER_MATRICES[y])


def test_word_product_random_words():
    rng = np.random.default_rng(11)
    letters = list(ALPHABET)
    for _ in range(80):
        n = rng.integers(1, 4)
        w1 = "".join(rng.choice(letters, size=n))
        w2 = "".join(rng.choice(letters, size=n))
        prod = word_product(w1, w2)
        mat = sum(
            (c * word_matrix(w) for w, c in prod),
            np.zeros((2**n, 2**n), dtype=complex),
        )
        assert np.allclose(mat, word_matrix(w1) @ word_matrix(w2))


def test_word_product_length_mismatch():
    with pytest.raises(ValueError):
        word_product("PZ", "M")


def test_word_spin_counts_ladder_imbalance():
    assert word_spin("PM") == 0
    assert word_spin("PPM") == 1
    assert word_spin("MZM") == -2


def test_trim_word():
    assert trim_word("IPZI") == (1, "PZ", 1)
    assert trim_word("Z") == (0, "Z", 0)
    assert trim_word("III") == (0, "I", 2)


def test_canonicalize_merges_shifted_words():
    k = canonicalize({"IPM": 1.0, "PMI": 2.0, "PM": 0.5})
    assert k.terms == {"PM": 3.5}


def test_kernel_algebra_and_json_roundtrip():
    rng = np.random.default_rng(5)
    k = random_kernel(rng, 3)
    k2 = LocalKernel.loads(k.dumps())
    assert (k - k2).is_zero()
    assert (k.scale(2.0) - k - k).is_zero()


def test_dagger_matches_conjugate_transpose():
    rng = np.random.default_rng(17)
    for _ in range(10):
        k = random_kernel(rng, 3)
        L = 3
        m = dense(k, L, boundary="pinned", a=1)
        md = dense(k.dagger(), L, boundary="pinned", a=1)
        assert np.allclose(md, m.conj().T)


def test_mirror_reverses_words():
    k = LocalKernel({"PZM": 2.0, "PM": 1.0})
    assert k.mirror().terms == {"MZP": 2.0, "MP": 1.0}


def test_kernel_to_matrix_closed_translation_invariant():
    rng = np.random.default_rng(23)
    L = 6
    # one-site translation as a permutation on basis masks
    dim = 2**L
    T = np.zeros((dim, dim))
    for m in range(dim):
        # site 1 is the most significant bit; shift left cyclically
        T[((m << 1) | (m >> (L - 1))) & (dim - 1), m] = 1.0
    for _ in range(5):
        k = random_kernel(rng, 3)
        mat = kernel_to_matrix(k, L, "closed").toarray()
        assert np.allclose(mat, dense(k, L, "closed"))
        assert np.allclose(T @ mat @ T.T, mat)


def test_kernel_to_matrix_open_and_pinned():
    rng = np.random.default_rng(29)
    L = 5
    for _ in range(5):
        k = random_kernel(rng, 3)
        assert np.allclose(kernel_to_matrix(k, L, "open").toarray(), dense(k, L, "open"))
        assert np.allclose(
            kernel_to_matrix(k, L, "pinned", a=2).toarray(),
            dense(k, L, "pinned", a=2),
        )


def test_kernel_to_matrix_range_guards():
    k = LocalKernel({"PZZM": 1.0})
    with pytest.raises(ValueError):
        kernel_to_matrix(k, 4, "closed")  # wrap would overlap itself
    kernel_to_matrix(k, 4, "open")
    with pytest.raises(ValueError):
        kernel_to_matrix(k, 3, "open")


def test_sector_basis_dimensions():
    for L in (4, 6):
        for M in range(L + 1):
            assert len(sector_basis(L, M)) == binomial(L, M)


def test_sector_matrix_matches_projected_full():
    rng = np.random.default_rng(31)
    L, M = 6, 2
    basis = sector_basis(L, M)
    for boundary in ("closed", "open"):
        for _ in range(4):
            k = random_kernel(rng, 3)
            full = dense(k, L, boundary)
            proj = full[np.ix_(basis, basis)]
            sec = kernel_sector_matrix(k, L, M, boundary)
            assert np.allclose(sec, proj)


def test_sector_matrix_extra_pinned():
    rng = np.random.default_rng(37)
    L, M = 5, 2
    basis = sector_basis(L, M)
    k = random_kernel(rng, 2)
    pin = random_kernel(rng, 2)
    full = dense(k, L, "open") + dense(pin, L, "pinned", a=2)
    sec = kernel_sector_matrix(k, L, M, "open", extra_pinned=[(pin, 2)])
    assert np.allclose(sec, full[np.ix_(basis, basis)])


def test_matrix_to_kernel_roundtrip():
    rng = np.random.default_rng(41)
    for n in (1, 2, 3):
        k = random_kernel(rng, n, spin_preserving=False, n_terms=5)
        # pad to exactly n sites so the matrix size is fixed
        mat = dense(k, n, boundary="pinned", a=1)
        back = matrix_to_kernel(mat, n)
        mat2 = dense(back, n, boundary="pinned", a=1)
        assert np.allclose(mat, mat2)


def test_word_counting_identities():
    # spin-preserving words on r sites: sum_l C(r, l)^2 = C(2r, r)
    for r in (1, 2, 3, 4):
        assert len(spin_preserving_words(r)) == binomial(2 * r, r)
    # trimmed classes of range <= r, identity excluded:
    # C(2r, r) - (C(2r-2, r-1) - 1) - 1
    for r in (2, 3, 4, 5):
        expect = binomial(2 * r, r) - (binomial(2 * r - 2, r - 1) - 1) - 1
        assert len(canonical_words(r)) == expect


def test_commutator_at_offset_dense():
    """Canonical kernels only carry translation classes, so the commutator at
    a fixed offset is checked through its closed homogeneous realization."""
    rng = np.random.default_rng(43)
    L = 6
    for _ in range(8):
        k1 = random_kernel(rng, 2)
        k2 = random_kernel(rng, 2)
        d = int(rng.integers(-1, 3))
        res = kernel_commutator_at_offset(k1, k2, d)
        got = np.zeros((2**L, 2**L), dtype=complex)
        for a in range(1, L + 1):
            m1 = sum(
                c * word_at(w, a, L, True) for w, c in k1.terms.items()
            )
            m2 = sum(
                c * word_at(w, a + d, L, True) for w, c in k2.terms.items()
            )
            got += m1 @ m2 - m2 @ m1
        want = dense(res, L, "closed") if res.terms else np.zeros_like(got)
        assert np.allclose(got, want)
