"""Spin-preserving Pauli-word algebra for nearest-neighbour and long-range kernels.

Operators on the spin-1/2 chain are stored as sums of tensor-product words over
the single-site alphabet

    I = identity,  Z = sigma_z,  P = sigma_+,  M = sigma_-,

with complex coefficients.  A word string such as ``"PZM"`` denotes
sigma_+ x sigma_z x sigma_- acting on three consecutive sites, leftmost letter
on the leftmost site.  The computational basis orders spin-up first (bit 0) and
puts site 1 on the most significant bit.

A kernel is canonical when every word starts and ends with a non-identity
letter (interior identities are allowed); translation-invariant sums of a
kernel do not change when identities are stripped from either end, so the
canonical form is the unique representative of that equivalence class.
"""

from __future__ import annotations

import json
import math
from itertools import product as _iproduct

import numpy as np
from scipy import sparse as _sp

__all__ = [
    "ALPHABET",
    "LETTER_MATRICES",
    "LocalKernel",
    "word_product",
    "word_spin",
    "trim_word",
    "canonicalize",
    "kernel_commutator_at_offset",
    "kernel_to_matrix",
    "kernel_sector_matrix",
    "matrix_to_kernel",
    "word_matrix",
    "sector_basis",
    "random_kernel",
    "spin_preserving_words",
    "canonical_words",
]

ALPHABET = "IZPM"

COEFF_TOL = 1e-12

LETTER_MATRICES = {
    "I": np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex),
    "Z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
    "P": np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex),
    "M": np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex),
}

# Single-site products expanded back into the alphabet:
#   Z.P = P, P.Z = -P, Z.M = -M, M.Z = M,
#   P.M = (I+Z)/2, M.P = (I-Z)/2, P.P = M.M = 0.
_LETTER_PRODUCT = {
    ("I", "I"): (("I", 1.0),),
    ("I", "Z"): (("Z", 1.0),),
    ("I", "P"): (("P", 1.0),),
    ("I", "M"): (("M", 1.0),),
    ("Z", "I"): (("Z", 1.0),),
    ("P", "I"): (("P", 1.0),),
    ("M", "I"): (("M", 1.0),),
    ("Z", "Z"): (("I", 1.0),),
    ("Z", "P"): (("P", 1.0),),
    ("P", "Z"): (("P", -1.0),),
    ("Z", "M"): (("M", -1.0),),
    ("M", "Z"): (("M", 1.0),),
    ("P", "P"): (),
    ("M", "M"): (),
    ("P", "M"): (("I", 0.5), ("Z", 0.5)),
    ("M", "P"): (("I", 0.5), ("Z", -0.5)),
}

_DAGGER = {"I": "I", "Z": "Z", "P": "M", "M": "P"}

_SPIN = {"I": 0, "Z": 0, "P": 1, "M": -1}


def word_spin(word):
    """Net spin charge of a word: number of P letters minus number of M letters."""
    return sum(_SPIN[ch] for ch in word)


def word_product(w1, w2):
    """Site-wise product of two equal-length words.

    Returns a list of (word, coefficient) pairs expanding w1 . w2 in the
    alphabet.  Raises ValueError on a length mismatch; callers align words
    explicitly before multiplying.
    """
    if len(w1) != len(w2):
        raise ValueError("word lengths differ: %r vs %r" % (w1, w2))
    factors = []
    for a, b in zip(w1, w2):
        terms = _LETTER_PRODUCT[(a, b)]
        if not terms:
            return []
        factors.append(terms)
    out = []
    for combo in _iproduct(*factors):
        word = "".join(ch for ch, _ in combo)
        coeff = 1.0
        for _, c in combo:
            coeff *= c
        out.append((word, coeff))
    return out


def trim_word(word):
    """Strip edge identities.  Returns (n_leading, core, n_trailing).

    The all-identity word trims to the single letter "I" with the leading
    count set to zero.
    """
    n = 0
    while n < len(word) and word[n] == "I":
        n += 1
    if n == len(word):
        return 0, "I", len(word) - 1
    m = 0
    while word[len(word) - 1 - m] == "I":
        m += 1
    return n, word[n:len(word) - m], m


class LocalKernel:
    """A finite sum of Pauli words with complex coefficients.

    ``terms`` maps word strings to coefficients.  The kernel range is the
    maximum word length; words of different lengths may coexist (each word is
    anchored at the kernel's first site when the kernel is placed on a chain).
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = dict(terms) if terms else {}

    @property
    def range(self):
        return max((len(w) for w in self.terms), default=0)

    def canonical(self, tol=COEFF_TOL):
        return canonicalize(self, tol=tol)

    def copy(self):
        return LocalKernel(self.terms)

    def __add__(self, other):
        out = dict(self.terms)
        for w, c in other.terms.items():
            out[w] = out.get(w, 0.0) + c
        return LocalKernel(out)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, factor):
        return LocalKernel({w: factor * c for w, c in self.terms.items()})

    def dagger(self):
        """Hermitian conjugate: letter-wise dagger, conjugated coefficients."""
        out = {}
        for w, c in self.terms.items():
            wd = "".join(_DAGGER[ch] for ch in w)
            out[wd] = out.get(wd, 0.0) + np.conj(c)
        return LocalKernel(out)

    def mirror(self):
        """Spatial reflection: every word is reversed."""
        out = {}
        for w, c in self.terms.items():
            wr = w[::-1]
            out[wr] = out.get(wr, 0.0) + c
        return LocalKernel(out)

    def norm(self):
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def is_zero(self, tol=1e-10):
        return self.canonical().norm() <= tol

    def is_spin_preserving(self, tol=COEFF_TOL):
        return all(word_spin(w) == 0 for w, c in self.terms.items() if abs(c) > tol)

    def __repr__(self):
        parts = ", ".join(
            "%s: %s" % (w, format(c, ".6g")) for w, c in sorted(self.terms.items())
        )
        return "LocalKernel({%s})" % parts

    def to_json(self):
        k = self.canonical()
        return {
            "range": k.range,
            "terms": [
                {"word": w, "re": float(np.real(c)), "im": float(np.imag(c))}
                for w, c in sorted(k.terms.items())
            ],
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, obj):
        terms = {}
        for t in obj["terms"]:
            w = t["word"]
            if any(ch not in ALPHABET for ch in w):
                raise ValueError("invalid letter in word %r" % w)
            terms[w] = terms.get(w, 0.0) + complex(t.get("re", 0.0), t.get("im", 0.0))
        k = cls(terms).canonical()
        if "range" in obj and obj["range"] != k.range:
            raise ValueError(
                "declared range %s does not match canonical range %s"
                % (obj["range"], k.range)
            )
        return k

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


def canonicalize(kernel, tol=COEFF_TOL):
    """Trim edge identities from every word, merge, and drop tiny coefficients."""
    terms = kernel.terms if isinstance(kernel, LocalKernel) else kernel
    out = {}
    for w, c in terms.items():
        _, core, _ = trim_word(w)
        out[core] = out.get(core, 0.0) + c
    out = {w: c for w, c in sorted(out.items()) if abs(c) > tol}
    return LocalKernel(out)


def _pair_window(k1, k2, d, sign):
    """Words of k1 placed at relative site 0 times k2 at site d, combined as
    k1.k2 + sign * k2.k1, embedded in the window [min(0,d), max(r1-1, d+r2-1)].

    Returns a plain dict of full-window words (no trimming); the window start
    is min(0, d).  sign=-1 gives the commutator, sign=+1 the anticommutator.
    """
    t1 = k1.terms if isinstance(k1, LocalKernel) else k1
    t2 = k2.terms if isinstance(k2, LocalKernel) else k2
    r1 = max((len(w) for w in t1), default=0)
    r2 = max((len(w) for w in t2), default=0)
    lo = min(0, d)
    hi = max(r1 - 1, d + r2 - 1)
    width = hi - lo + 1
    out = {}
    for w1, c1 in t1.items():
        pad1 = "I" * (-lo) + w1 + "I" * (width + lo - len(w1))
        for w2, c2 in t2.items():
            pad2 = "I" * (d - lo) + w2 + "I" * (width - d + lo - len(w2))
            c = c1 * c2
            for w, f in word_product(pad1, pad2):
                out[w] = out.get(w, 0.0) + c * f
            for w, f in word_product(pad2, pad1):
                out[w] = out.get(w, 0.0) + sign * c * f
    return out


def kernel_commutator_at_offset(k1, k2, d):
    """Commutator [k1 at site 0, k2 at site d] as a canonical kernel."""
    return canonicalize(_pair_window(k1, k2, d, -1.0))


def _word_sites(word, a, L, wrap):
    """Chain sites (1-based) covered by a word anchored at site a."""
    sites = []
    for j in range(len(word)):
        s = a + j
        if wrap:
            s = (s - 1) % L + 1
        elif s > L:
            raise ValueError("word %r at site %d exceeds chain length %d" % (word, a, L))
        sites.append(s)
    return sites


def _word_sparse(word, a, L, wrap):
    ops = [None] * L
    for ch, s in zip(word, _word_sites(word, a, L, wrap)):
        ops[s - 1] = ch
    mat = _sp.identity(1, format="csr", dtype=complex)
    for i in range(L):
        m = LETTER_MATRICES[ops[i]] if ops[i] else LETTER_MATRICES["I"]
        mat = _sp.kron(mat, _sp.csr_matrix(m), format="csr")
    return mat


def kernel_to_matrix(kernel, L, boundary="closed", a=None):
    """Realize a kernel on a length-L chain as a sparse matrix (2^L x 2^L).

    boundary:
      "closed" -- cyclic homogeneous sum over all L placements (requires
                  range < L so no placement overlaps itself),
      "open"   -- homogeneous sum over all non-wrapping placements (requires
                  range <= L),
      "pinned" -- single placement anchored at site ``a``.

    Site 1 is the most significant bit; spin-up is bit 0.
    """
    k = kernel if isinstance(kernel, LocalKernel) else LocalKernel(kernel)
    r = k.range
    dim = 2 ** L
    total = _sp.csr_matrix((dim, dim), dtype=complex)
    if boundary == "closed":
        if r >= L:
            raise ValueError("closed realization needs range < L (range %d, L %d)" % (r, L))
        for w, c in k.terms.items():
            for pos in range(1, L + 1):
                total = total + c * _word_sparse(w, pos, L, wrap=True)
    elif boundary == "open":
        if r > L:
            raise ValueError("open realization needs range <= L (range %d, L %d)" % (r, L))
        for w, c in k.terms.items():
            for pos in range(1, L - len(w) + 2):
                total = total + c * _word_sparse(w, pos, L, wrap=False)
    elif boundary == "pinned":
        if a is None:
            raise ValueError("pinned realization needs an anchor site a")
        if not (1 <= a <= L - r + 1):
            raise ValueError("anchor %d outside [1, %d]" % (a, L - r + 1))
        for w, c in k.terms.items():
            total = total + c * _word_sparse(w, a, L, wrap=False)
    else:
        raise ValueError("unknown boundary mode %r" % boundary)
    return total


def sector_basis(L, M):
    """Bit masks of the M-down-spin sector, ascending.  Bit (L - site) flags
    a down spin on that site, so site 1 is the most significant bit."""
    return [m for m in range(2 ** L) if bin(m).count("1") == M]


def _apply_word(word, sites, mask, L):
    """Apply a word placement to a basis mask.  Returns (new_mask, amplitude)."""
    amp = 1.0
    for ch, s in zip(word, sites):
        bit = (mask >> (L - s)) & 1
        if ch == "I":
            continue
        if ch == "Z":
            amp *= 1.0 - 2.0 * bit
        elif ch == "P":
            if bit == 0:
                return mask, 0.0
            mask &= ~(1 << (L - s))
        else:  # M
            if bit == 1:
                return mask, 0.0
            mask |= 1 << (L - s)
    return mask, amp


def kernel_sector_matrix(kernel, L, M, boundary="closed", a=None, extra_pinned=()):
    """Dense matrix of a spin-preserving kernel restricted to the M-magnon sector.

    ``extra_pinned`` adds (kernel, site) placements on top of the homogeneous
    part; used for open chains with boundary terms.
    """
    k = kernel if isinstance(kernel, LocalKernel) else LocalKernel(kernel)
    basis = sector_basis(L, M)
    index = {m: i for i, m in enumerate(basis)}
    dim = len(basis)
    out = np.zeros((dim, dim), dtype=complex)

    placements = []
    if boundary == "closed":
        if k.range >= L:
            raise ValueError("closed realization needs range < L")
        for w, c in k.terms.items():
            for pos in range(1, L + 1):
                placements.append((w, c, _word_sites(w, pos, L, True)))
    elif boundary == "open":
        if k.range > L:
            raise ValueError("open realization needs range <= L")
        for w, c in k.terms.items():
            for pos in range(1, L - len(w) + 2):
                placements.append((w, c, _word_sites(w, pos, L, False)))
    elif boundary == "pinned":
        for w, c in k.terms.items():
            placements.append((w, c, _word_sites(w, a, L, False)))
    else:
        raise ValueError("unknown boundary mode %r" % boundary)
    for extra, site in extra_pinned:
        ek = extra if isinstance(extra, LocalKernel) else LocalKernel(extra)
        for w, c in ek.terms.items():
            placements.append((w, c, _word_sites(w, site, L, False)))

    for w, c, sites in placements:
        for col, mask in enumerate(basis):
            new, amp = _apply_word(w, sites, mask, L)
            if amp != 0.0:
                out[index[new], col] += c * amp
    return out


def spin_preserving_words(length):
    """All words of exactly the given length with equal P and M counts."""
    out = []
    for combo in _iproduct(ALPHABET, repeat=length):
        w = "".join(combo)
        if word_spin(w) == 0:
            out.append(w)
    return out


def canonical_words(max_range, spin_preserving=True, include_identity=False):
    """Trimmed words up to the given range, sorted by (length, word).

    These are the distinct equivalence classes of homogeneous operators with
    that interaction range.  The single-letter identity word is excluded
    unless requested.
    """
    out = ["I"] if include_identity else []
    for n in range(1, max_range + 1):
        words = spin_preserving_words(n) if spin_preserving else (
            "".join(c) for c in _iproduct(ALPHABET, repeat=n)
        )
        for w in sorted(words):
            if w[0] != "I" and w[-1] != "I" and w != "I" * n:
                out.append(w)
    return out


def word_matrix(word):
    """Dense matrix of a word on exactly ``len(word)`` sites."""
    out = np.array([[1.0 + 0.0j]])
    for letter in word:
        out = np.kron(out, LETTER_MATRICES[letter])
    return out


def matrix_to_kernel(mat, n_sites, tol=COEFF_TOL):
    """Expand a dense operator on ``n_sites`` sites in the word basis.

    The letters are orthogonal under the Hilbert-Schmidt pairing with squared
    norms 2 (I, Z) and 1 (P, M), so the expansion is a projection.  The result
    is canonical; it reproduces ``mat`` exactly when summed back up.
    """
    mat = np.asarray(mat, dtype=complex)
    if mat.shape != (2**n_sites, 2**n_sites):
        raise ValueError("matrix shape does not match the site count")
    terms = {}
    for combo in _iproduct(ALPHABET, repeat=n_sites):
        w = "".join(combo)
        nrm = 2.0 ** (w.count("I") + w.count("Z"))
        c = np.trace(word_matrix(w).conj().T @ mat) / nrm
        if abs(c) > tol:
            terms[w] = c
    return canonicalize(terms, tol=tol)


def random_kernel(rng, max_range, spin_preserving=True, n_terms=6):
    """Seeded random canonical kernel for property tests."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pool = canonical_words(max_range, spin_preserving=spin_preserving)
    n = min(n_terms, len(pool))
    picks = rng.choice(len(pool), size=n, replace=False)
    terms = {}
    for i in sorted(picks):
        c = rng.standard_normal() + 1j * rng.standard_normal()
        terms[pool[i]] = c
    return LocalKernel(terms).canonical()


def binomial(n, k):
    if k < 0 or k > n:
        return 0
    return math.comb(n, k)
