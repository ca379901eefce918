"""Classification and generation of integrable long-range deformations.

Two complementary routes to the same space of deformations:

* brute force: solve the first non-trivial commutation constraint over a
  lexicographic basis of spin-preserving kernels and read off the nullspace;
* generators: drive the deformation equation dQ/dlambda = i[X, Q] with the
  admissible operator classes (local sums, boosted charges, bilocal pairings)
  and reduce ranges by subtracting higher conserved charges.

The two routes are reconciled by ``match_basis``.  Closed chains use plain
``LocalKernel`` directions; open chains use ``OpenKernel`` directions on the
left-open half chain, with trivial identity boundary terms quotiented out.
"""

from dataclasses import dataclass, field

import numpy as np

from .pauli import LocalKernel, canonical_words, canonicalize, binomial
from .chains import (ChainOperator, OpenKernel, commute_homogeneous,
                     commute_boost, commute_bilocal, open_commute)
from .model import ModelParams, q2_kernel
from .charges import charge_tower, open_q2, open_q3, open_q4, pin_pool

_SVD_REL = 1e-9


def magnon_counter():
    """Single-site magnon-number density (eigenvalue M on the chain)."""
    return LocalKernel({"I": 0.5, "Z": -0.5})


# ---------------------------------------------------------------------------
# linear algebra over kernel coordinates

def _nullspace(a, rel_tol=_SVD_REL):
    if a.size == 0:
        return np.eye(a.shape[1], dtype=complex)
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    cut = rel_tol * (s[0] if s.size else 1.0)
    rank = int(np.sum(s > cut))
    return vh[rank:].conj().T


def _colspace(a, rel_tol=_SVD_REL):
    if a.shape[1] == 0:
        return a
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    cut = rel_tol * (s[0] if s.size else 1.0)
    rank = int(np.sum(s > cut))
    return u[:, :rank]

def _rank(a, rel_tol=_SVD_REL):
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(s > rel_tol * s[0])) if s.size else 0


def _intersect(a, b, rel_tol=_SVD_REL):
    """Orthonormal basis of span(a) ∩ span(b), columns as subspace bases."""
    if a.shape[1] == 0 or b.shape[1] == 0:
        return a[:, :0]
    ns = _nullspace(np.hstack([a, -b]), rel_tol)
    if ns.shape[1] == 0:
        return a[:, :0]
    return _colspace(a @ ns[:a.shape[1], :], rel_tol)


def _complement_in(v, w, rel_tol=_SVD_REL):
    """Orthonormal basis of the part of span(v) orthogonal to span(w)."""
    if w.shape[1] == 0:
        return _colspace(v, rel_tol)
    wo = _colspace(w, rel_tol)
    proj = v - wo @ (wo.conj().T @ v)
    return _colspace(proj, rel_tol)


def _closed_coords(kernels):
    """Coordinate matrix of LocalKernels over the sorted union of words."""
    keys = sorted({w for k in kernels for w in k.terms})
    idx = {w: i for i, w in enumerate(keys)}
    mat = np.zeros((len(keys), len(kernels)), dtype=complex)
    for j, k in enumerate(kernels):
        for w, c in k.terms.items():
            mat[idx[w], j] = c
    return keys, mat


def _open_coords(ops, drop_trivial=True):
    """Coordinate matrix of left-open OpenKernels over ("b", w) / ("l", w).

    Identity pins are the trivial boundary degrees of freedom and are dropped
    from the coordinates unless requested otherwise.
    """
    cleaned = [op.cleaned() for op in ops]
    keys = set()
    for op in cleaned:
        keys.update(("b", w) for w in op.bulk.terms)
        keys.update(("l", w) for w in op.left.terms)
        keys.update(("r", w) for w in op.right.terms)
    if drop_trivial:
        keys.discard(("l", "I"))
        keys.discard(("r", "I"))
    keys = sorted(keys)
    idx = {k: i for i, k in enumerate(keys)}
    mat = np.zeros((len(keys), len(ops)), dtype=complex)
    for j, op in enumerate(cleaned):
        for w, c in op.bulk.terms.items():
            mat[idx[("b", w)], j] = c
        for w, c in op.left.terms.items():
            if ("l", w) in idx:
                mat[idx[("l", w)], j] = c
        for w, c in op.right.terms.items():
            if ("r", w) in idx:
                mat[idx[("r", w)], j] = c
    return keys, mat


def _embed(keys_small, mat_small, keys_big):
    out = np.zeros((len(keys_big), mat_small.shape[1]), dtype=complex)
    pos = {k: i for i, k in enumerate(keys_big)}
    for i, k in enumerate(keys_small):
        if k in pos:
            out[pos[k], :] = mat_small[i, :]
        elif np.any(np.abs(mat_small[i, :]) > 1e-12):
            raise ValueError("coordinate %r missing from target space" % (k,))
    return out


def _normalize_columns(mat):
    out = mat.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        i = int(np.argmax(np.abs(col)))
        if abs(col[i]) > 0:
            out[:, j] = col / col[i]
    return out


def _vec_to_kernel(keys, vec, tol=1e-11):
    return LocalKernel({w: c for w, c in zip(keys, vec) if abs(c) > tol})


def _vec_to_open(keys, vec, tol=1e-11):
    bulk, left = {}, {}
    for (kind, w), c in zip(keys, vec):
        if abs(c) <= tol:
            continue
        (bulk if kind == "b" else left)[w] = c
    return OpenKernel(left=LocalKernel(left), bulk=LocalKernel(bulk))


# ---------------------------------------------------------------------------
# counting formulas

def count_deformations(k):
    """Number of deformations of the Hamiltonian of range at most k, split by
    generator class (unit-cell basis change, local, boost, bilocal, coupling).
    """
    if k < 2:
        raise ValueError("counting starts at range k = 2")
    n_basis = k + 1
    n_local = binomial(2 * k - 2, k - 1) - binomial(2 * k - 4, k - 2) - k + 1
    n_boost = k - 1
    n_bilocal = (k - 1) * (k - 2) // 2
    n_hbar = 1
    n_tot = (binomial(2 * k - 2, k - 1) - binomial(2 * k - 4, k - 2)
             + (k * k - k + 6) // 2)
    parts = n_basis + n_local + n_boost + n_bilocal + n_hbar
    if n_tot != parts:
        raise AssertionError("component identity violated: %d != %d"
                             % (n_tot, parts))
    return n_basis, n_local, n_boost, n_bilocal, n_hbar, n_tot


# ---------------------------------------------------------------------------
# range reduction

def _top_fit(kern, charge, r):
    """Coefficient c with the range-r part of (kern - c*charge) minimal."""
    av = {w: c for w, c in kern.terms.items() if len(w) == r}
    bv = {w: c for w, c in charge.terms.items() if len(w) == r}
    words = sorted(set(av) | set(bv))
    a = np.array([av.get(w, 0j) for w in words])
    b = np.array([bv.get(w, 0j) for w in words])
    nb = np.vdot(b, b)
    if abs(nb) == 0:
        return 0j, float(np.linalg.norm(a))
    c = np.vdot(b, a) / nb
    return c, float(np.linalg.norm(a - c * b))


def reduce_range(deformed, tower, tol=1e-9):
    """Subtract conserved charges to minimize the range of a deformation.

    ``tower`` maps r to the closed charge of range r.  Returns the reduced
    kernel and the subtraction coefficients {r: c}.  Subtraction happens only
    while the top-range content is proportional to the matching charge, so the
    result is the canonical representative modulo the conserved tower.
    """
    red = deformed.canonical()
    scale = max(1.0, red.norm())
    coeffs = {}
    while red.terms:
        r = red.range
        if r not in tower:
            break
        c, resid = _top_fit(red, tower[r], r)
        if resid > tol * scale or abs(c) <= tol * scale:
            break
        red = (red - tower[r].scale(c)).canonical()
        red = LocalKernel({w: x for w, x in red.terms.items()
                           if abs(x) > 1e-14 * scale})
        coeffs[r] = coeffs.get(r, 0j) + c
        if red.terms and red.range >= r:
            break
    return red, coeffs


# ---------------------------------------------------------------------------
# brute-force classification

@dataclass
class DeformationBasis:
    """Labeled nullspace basis of the leading commutation constraint."""
    order: int
    boundary: str
    basis: list                      # [(q2 direction, partner direction)]
    labels: list                     # per element
    dimension: int
    nullity: int                     # incl. pure-partner relabelings
    keys: list = field(default_factory=list, repr=False)
    vectors: np.ndarray = None       # q2-block coordinates, one column each

    def label_counts(self):
        out = {}
        for lab in self.labels:
            out[lab] = out.get(lab, 0) + 1
        return out


def _second_point(p):
    return p.replace(hbar=1.31 * p.hbar + 0.05j, phi=p.phi - 0.47)


def _closed_constraint(order, p):
    """Constraint matrix of (X2, X3) -> [X2, Q3] + [Q2, X3] plus bookkeeping."""
    qs = charge_tower(p, max_r=order + 2)
    q2, q3 = qs[2], qs[3]
    basis2 = [LocalKernel({"I": 1.0})] + \
        [LocalKernel({w: 1.0}) for w in canonical_words(2 + order)]
    basis3 = [LocalKernel({"I": 1.0})] + \
        [LocalKernel({w: 1.0}) for w in canonical_words(3 + order)]
    cols = [commute_homogeneous(e, q3) for e in basis2]
    cols += [commute_homogeneous(q2, f) for f in basis3]
    keys, mat = _closed_coords(cols)
    return qs, basis2, basis3, keys, mat


def brute_force_closed(order, p):
    """Nullspace classification of closed-chain deformations at the given
    lambda order (1 or 2), labeled homogeneous / NN / long-range."""
    if order not in (1, 2):
        raise ValueError("brute force supports orders 1 and 2")
    qs, basis2, basis3, _, mat = _closed_constraint(order, p)
    n2 = len(basis2)
    null = _nullspace(mat)
    nullity = null.shape[1]

    _, _, _, _, mat_b = _closed_constraint(order, _second_point(p))
    if _nullspace(mat_b).shape[1] != nullity:
        raise ValueError("non-generic parameters: nullspace dimension is "
                         "unstable across parameter points")

    word_keys = [("w", "I")] + [("w", w) for w in canonical_words(2 + order)]
    v_all = _colspace(null[:n2, :])
    dim = v_all.shape[1]

    # label filtration: homogeneous charges, then range <= 2, then the rest
    homog_kernels = [LocalKernel({"I": 1.0}), magnon_counter()] + \
        [qs[r].canonical() for r in range(2, order + 3)]
    hk, hmat = _closed_coords(homog_kernels)
    hmat = _embed([("w", w) for w in hk], hmat, word_keys)
    short_idx = [i for i, (_, w) in enumerate(word_keys) if len(w) <= 2]
    short = np.eye(len(word_keys), dtype=complex)[:, short_idx]

    v_h = _intersect(v_all, _colspace(hmat))
    v_nn_all = _intersect(v_all, short)
    v_nn = _complement_in(v_nn_all, v_h)
    v_lr = _complement_in(v_all, np.hstack([v_h, v_nn]))

    blocks = [(v_h, "homogeneous"), (v_nn, "NN"), (v_lr, "long-range")]
    vecs, labels = [], []
    for block, lab in blocks:
        block = _normalize_columns(block)
        for j in range(block.shape[1]):
            vecs.append(block[:, j])
            labels.append(lab)
    vectors = np.array(vecs).T if vecs else np.zeros((len(word_keys), 0))

    # partners: minimal-norm X3 with [X2, Q3] + [Q2, X3] = 0
    a2 = mat[:, :n2]
    a3 = mat[:, n2:]
    basis_pairs = []
    for j in range(vectors.shape[1]):
        rhs = -(a2 @ vectors[:, j])
        sol, _, _, _ = np.linalg.lstsq(a3, rhs, rcond=None)
        k2 = _vec_to_kernel([w for _, w in word_keys], vectors[:, j])
        k3 = LocalKernel({})
        for c, f in zip(sol, basis3):
            if abs(c) > 1e-11:
                k3 = k3 + f.scale(c)
        basis_pairs.append((k2, k3.canonical()))

    return DeformationBasis(order=order, boundary="closed", basis=basis_pairs,
                            labels=labels, dimension=dim, nullity=nullity,
                            keys=word_keys, vectors=vectors)


def _strip_trivial_pins(op):
    def drop(k):
        return LocalKernel({w: c for w, c in k.terms.items() if w != "I"})
    return OpenKernel(left=drop(op.left), bulk=op.bulk, right=drop(op.right))


def _left_frame(op):
    """Drop the right edge.  On the left-open chain the right pins carry no
    independent data: they transform with the mirrored generator."""
    return OpenKernel(left=op.left, bulk=op.bulk)


def _open_constraint(p, bp):
    """Columns of (X2, X4) -> [X2, Q4] + [Q2, X4] on the left-open chain.

    Unknowns follow the representative expansion of a range-R charge
    correction: bulk words up to range R plus boundary pins of length < R.
    Allowing longer pins would admit conjugation flows by short edge
    operators, which pair with partner corrections of longer pin range and
    are not counted as deformation degrees of freedom.
    """
    h = open_q2(p, bp)
    q4o = open_q4(p, bp)
    bulk2 = [OpenKernel(bulk=LocalKernel({"I": 1.0}))] + \
        [OpenKernel(bulk=LocalKernel({w: 1.0})) for w in canonical_words(3)]
    pins2 = [OpenKernel(left=LocalKernel({w: 1.0})) for w in pin_pool(2)]
    bulk4 = [OpenKernel(bulk=LocalKernel({"I": 1.0}))] + \
        [OpenKernel(bulk=LocalKernel({w: 1.0})) for w in canonical_words(5)]
    pins4 = [OpenKernel(left=LocalKernel({w: 1.0})) for w in pin_pool(4)]
    els2 = bulk2 + pins2
    els4 = bulk4 + pins4
    cols = [open_commute(e, q4o) for e in els2]
    cols += [open_commute(h, f) for f in els4]
    keys, mat = _open_coords(cols)
    return h, els2, els4, keys, mat


def brute_force_open(p, bp):
    """Nullspace classification of first-order deformations on the left-open
    chain, labeled homogeneous / NN / long-range / boundary.

    Trivial identity boundary terms are excluded from the unknowns, so the
    charge relabelings appear with their identity pins stripped.
    """
    h, els2, els4, _, mat = _open_constraint(p, bp)
    n2 = len(els2)
    null = _nullspace(mat)
    nullity = null.shape[1]

    bp2 = bp.replace(xi_minus=1.17 * bp.xi_minus + 0.21,
                     xi_plus=0.83 * bp.xi_plus - 0.13j)
    _, _, _, _, mat_b = _open_constraint(_second_point(p), bp2)
    if _nullspace(mat_b).shape[1] != nullity:
        raise ValueError("non-generic parameters: nullspace dimension is "
                         "unstable across parameter points")

    el_keys, el_mat = _open_coords(els2)
    v_all = _colspace(null[:n2, :])
    dim = v_all.shape[1]

    # coordinates of the Q2 block expressed directly over element index space;
    # element order: bulk words then pin words, both lexicographic
    bulk_idx = [j for j, e in enumerate(els2) if e.bulk.terms]
    pin_idx = [j for j, e in enumerate(els2) if e.left.terms]
    eye = np.eye(n2, dtype=complex)

    homog_ops = [OpenKernel(bulk=LocalKernel({"I": 1.0})),
                 OpenKernel(bulk=magnon_counter()),
                 _strip_trivial_pins(h)]
    hmat = np.zeros((n2, len(homog_ops)), dtype=complex)
    for j, op in enumerate(homog_ops):
        op = op.cleaned()
        for i, e in enumerate(els2):
            if e.bulk.terms:
                (w,) = e.bulk.terms
                hmat[i, j] = op.bulk.terms.get(w, 0j)
            else:
                (w,) = e.left.terms
                hmat[i, j] = op.left.terms.get(w, 0j)

    short_idx = [j for j in pin_idx] + \
        [j for j in bulk_idx if els2[j].bulk.range <= 2]
    v_h = _intersect(v_all, _colspace(hmat))
    v_bnd = _intersect(v_all, eye[:, pin_idx])
    v_nn_all = _intersect(v_all, eye[:, sorted(short_idx)])
    v_nn = _complement_in(v_nn_all, np.hstack([v_h, v_bnd]))
    v_lr = _complement_in(v_all, np.hstack([v_h, v_nn, v_bnd]))

    blocks = [(v_h, "homogeneous"), (v_nn, "NN"), (v_lr, "long-range"),
              (v_bnd, "boundary")]
    vecs, labels = [], []
    for block, lab in blocks:
        block = _normalize_columns(block)
        for j in range(block.shape[1]):
            vecs.append(block[:, j])
            labels.append(lab)
    vectors = np.array(vecs).T if vecs else np.zeros((n2, 0))

    def el_to_open(vec):
        out = OpenKernel()
        for c, e in zip(vec, els2):
            if abs(c) > 1e-11:
                out = out + e.scale(c)
        return out.cleaned()

    a2 = mat[:, :n2]
    a4 = mat[:, n2:]
    basis_pairs = []
    for j in range(vectors.shape[1]):
        rhs = -(a2 @ vectors[:, j])
        sol, _, _, _ = np.linalg.lstsq(a4, rhs, rcond=None)
        x2 = el_to_open(vectors[:, j])
        x4 = OpenKernel()
        for c, f in zip(sol, els4):
            if abs(c) > 1e-11:
                x4 = x4 + f.scale(c)
        basis_pairs.append((x2, x4.cleaned()))

    el_key_list = [("b", next(iter(e.bulk.terms))) if e.bulk.terms
                   else ("l", next(iter(e.left.terms))) for e in els2]
    return DeformationBasis(order=1, boundary="open", basis=basis_pairs,
                            labels=labels, dimension=dim, nullity=nullity,
                            keys=el_key_list, vectors=vectors)


# ---------------------------------------------------------------------------
# generator dictionaries

def hbar_direction(p, step=1e-6):
    """Derivative of the NN charge density with respect to the coupling."""
    up = q2_kernel(p.replace(hbar=p.hbar + step))
    dn = q2_kernel(p.replace(hbar=p.hbar - step))
    return (up - dn).scale(0.5 / step).canonical()


def typed_first_order(p):
    """The displayed closed first-order directions a1..a10 (Hermitian for
    real coefficients)."""
    qs = charge_tower(p, max_r=3)
    e = lambda n: np.exp(1j * n * p.phi)
    return {
        "a1": LocalKernel({"I": 1.0}),
        "a2": magnon_counter(),
        "a3": qs[2],
        "a4": qs[3],
        "a5": LocalKernel({"PM": e(-1), "MP": e(1)}),
        "a6": LocalKernel({"PM": 1j * e(-1), "MP": -1j * e(1)}),
        "a7": LocalKernel({"ZIZ": 1.0, "MIP": 2 * e(2), "PIM": 2 * e(-2)}),
        "a8": LocalKernel({"MIP": 1j * e(2), "PIM": -1j * e(-2)}),
        "a9": LocalKernel({"MPZ": 1.0, "PMZ": 1.0, "ZMP": -1.0, "ZPM": -1.0}),
        # both brackets antisymmetric: the similarity flows by PM and MP
        # span (PMZ - ZPM) and (MPZ - ZMP) only
        "a10": LocalKernel({"MPZ": 1j, "PMZ": -1j, "ZMP": -1j, "ZPM": 1j}),
    }


_ORDER2_LOCAL_WORDS = ("PIM", "MIP", "ZZZ", "PZM", "MZP", "PMZ", "ZPM",
                       "ZMP", "ZIZ")


def closed_generator_directions(p, order=1):
    """First-order action i[X, Q2] of each admissible generator class.

    Boost directions are range-reduced by the conserved tower; the coupling
    derivative enters as an explicit parameter re-expansion since it lies
    outside the deformation-equation formalism.
    """
    qs = charge_tower(p, max_r=5)
    tower = {r: qs[r] for r in qs}
    zm = magnon_counter()
    q2 = qs[2]
    d = {
        "basis:1": LocalKernel({"I": 1.0}),
        "basis:Z": zm,
        "basis:Q2": q2,
        "basis:Q3": qs[3],
        "hbar": hbar_direction(p),
        "boost:Z": commute_boost(zm, q2)[1].scale(1j),
        "boost:Q3": reduce_range(commute_boost(qs[3], q2)[1].scale(1j),
                                 tower)[0],
        "biloc:Z,Q2": commute_bilocal(zm, q2, q2)[2].scale(1j),
        "local:PM": commute_homogeneous(LocalKernel({"PM": 1.0}), q2).scale(1j),
        "local:MP": commute_homogeneous(LocalKernel({"MP": 1.0}), q2).scale(1j),
    }
    if order >= 2:
        d["basis:Q4"] = qs[4]
        d["boost:Q4"] = reduce_range(commute_boost(qs[4], q2)[1].scale(1j),
                                     tower)[0]
        d["biloc:Z,Q3"] = commute_bilocal(zm, qs[3], q2)[2].scale(1j)
        d["biloc:Q2,Q3"] = commute_bilocal(q2, qs[3], q2)[2].scale(1j)
        for w in _ORDER2_LOCAL_WORDS:
            d["local:" + w] = commute_homogeneous(
                LocalKernel({w: 1.0}), q2).scale(1j)
    return d


_SHORT_PINS = ("Z", "IZ", "ZZ", "PM", "MP")


def _q3_short_pins(q3o, h, q4o=None):
    """Fix the boundary terms of the odd charge so its flow has short pins.

    The bulk of Q3 determines the deformation direction only up to short
    edge operators, and different generator entries need different choices.
    The length >= 3 pin content of the flow is linear in that freedom, so a
    least-squares solve over short pins cancels it.  With ``q4o`` the flow
    is the boosted combination i[B[Q3], H] - (3/2) Q4 instead of i[Q3, H].
    """
    def flow(q3):
        if q4o is None:
            return open_commute(q3, h).scale(1j)
        return (open_commute(ChainOperator("boost", q3), h).scale(1j)
                - q4o.scale(1.5))
    base = flow(q3o).cleaned()
    resp = []
    for w in _SHORT_PINS:
        shifted = OpenKernel(left=q3o.left + LocalKernel({w: 1.0}),
                             bulk=q3o.bulk, right=q3o.right)
        resp.append((flow(shifted) - base).cleaned())
    keys, mat = _open_coords([base] + resp)
    over = [i for i, (kind, w) in enumerate(keys)
            if kind == "l" and len(w) >= 3]
    sol, _, _, _ = np.linalg.lstsq(mat[over, 1:], -mat[over, 0], rcond=None)
    delta = LocalKernel({w: sol[i] for i, w in enumerate(_SHORT_PINS)})
    fixed = OpenKernel(left=(q3o.left + delta).canonical(),
                       bulk=q3o.bulk, right=q3o.right)
    out = flow(fixed).cleaned()
    bad = max((abs(c) for w, c in out.left.terms.items() if len(w) >= 3),
              default=0.0)
    if bad > 1e-9 * max(out.norm(), 1.0):
        raise ArithmeticError(
            "odd-charge boundary completion failed: residual %.3e" % bad)
    return fixed


def open_generator_directions(p, bp):
    """First-order action of the admissible generators on the left-open chain.

    Directions are reported in the left frame: right pins transform with the
    mirrored generator and carry no independent data, so they are dropped.
    The boundary block consists of the odd-charge sum, the boundary magnon
    counter, and the commutator with the edge-pinned spin; the coupling and
    boundary-parameter derivatives are parameter re-expansions.  The two
    odd-charge entries fix the boundary terms of Q3 by requiring the flow
    to keep pins of length <= 2; no single choice serves both.
    """
    h = open_q2(p, bp)
    q3o = open_q3(p, bp)
    q4o = open_q4(p, bp)
    zm = magnon_counter()
    step = 1e-6
    dh = (open_q2(p.replace(hbar=p.hbar + step), bp)
          - open_q2(p.replace(hbar=p.hbar - step), bp)).scale(0.5 / step)
    q3_bound = _q3_short_pins(q3o, h)
    q3_boost = _q3_short_pins(q3o, h, q4o=q4o)
    d = {
        "basis:1": OpenKernel(bulk=LocalKernel({"I": 1.0})),
        "basis:Z": OpenKernel(bulk=zm),
        "basis:Q2": _strip_trivial_pins(h),
        "boost:H": open_commute(ChainOperator("boost", h), h).scale(1j),
        "hbar": _strip_trivial_pins(dh.cleaned()),
        "boost:Z": open_commute(
            ChainOperator("boost", OpenKernel(bulk=zm)), h).scale(1j),
        "boost:Q3": _strip_trivial_pins(
            (open_commute(ChainOperator("boost", q3_boost), h).scale(1j)
             - q4o.scale(1.5)).cleaned()),
        "biloc:Z,H": open_commute(ChainOperator("bilocal", zm, h), h).scale(1j),
        "local:PM": open_commute(
            OpenKernel(bulk=LocalKernel({"PM": 1.0})), h).scale(1j),
        "local:MP": open_commute(
            OpenKernel(bulk=LocalKernel({"MP": 1.0})), h).scale(1j),
        "bound:Q3": open_commute(q3_bound, h).scale(1j),
        "bound:Z": OpenKernel(left=LocalKernel({"Z": 1.0})),
        "bound:sz": open_commute(
            OpenKernel(left=LocalKernel({"Z": 1.0})), h).scale(1j),
    }
    return {k: _left_frame(v.cleaned()) for k, v in d.items()}


# ---------------------------------------------------------------------------
# matching brute force against generators

def match_basis(brute, generated, tol=1e-8):
    """Express brute-force directions in the generated span and vice versa.

    ``generated`` maps names to LocalKernel / OpenKernel directions (or to
    DeformationSeries, from which the relevant order of Q2 is taken).
    Returns a report with per-direction residuals and the change of basis.
    """
    items = []
    for name, g in generated.items():
        if isinstance(g, DeformationSeries):
            g = g.charges[2][brute.order]
        items.append((name, g))
    names = [n for n, _ in items]

    if brute.boundary == "closed":
        kernels = [g.canonical() for _, g in items]
        gkeys, gmat = _closed_coords(kernels)
        gkeys = [("w", w) for w in gkeys]
    else:
        opens = [_left_frame(_strip_trivial_pins(g.cleaned()))
                 for _, g in items]
        gkeys, gmat = _open_coords(opens)

    all_keys = sorted(set(brute.keys) | set(gkeys))
    vb = _embed(brute.keys, brute.vectors, all_keys)
    vg = _embed(gkeys, gmat, all_keys)

    def resid_onto(target, span):
        sol, _, _, _ = np.linalg.lstsq(span, target, rcond=None)
        r = np.linalg.norm(span @ sol - target)
        return sol, r / max(np.linalg.norm(target), 1e-30)

    gen_resid, cob = {}, np.zeros((vb.shape[1], vg.shape[1]), dtype=complex)
    for j, name in enumerate(names):
        sol, r = resid_onto(vg[:, j], vb)
        gen_resid[name] = r
        cob[:, j] = sol
    brute_resid = []
    for j in range(vb.shape[1]):
        _, r = resid_onto(vb[:, j], vg)
        brute_resid.append(r)

    rank = _rank(vg)
    unmatched = [n for n, r in gen_resid.items() if r > tol]
    unmatched += ["brute[%d]" % j for j, r in enumerate(brute_resid)
                  if r > tol]
    return {
        "names": names,
        "generator_residuals": gen_resid,
        "brute_residuals": brute_resid,
        "max_residual": max([*gen_resid.values(), *brute_resid, 0.0]),
        "generator_rank": rank,
        "full_rank": rank == min(vg.shape[1], vb.shape[1]) and not unmatched,
        "change_of_basis": cob,
        "unmatched": unmatched,
    }


# ---------------------------------------------------------------------------
# deformation series via the deformation equation

@dataclass
class DeformationSeries:
    """Charges of a lambda-deformed model, order by order."""
    charges: dict                    # r -> [kernel per order 0..order]
    order: int = 0
    boundary: str = "closed"
    generators: list = field(default_factory=list)

    def kernel(self, r, lam):
        total = LocalKernel({})
        for k, q in enumerate(self.charges[r]):
            total = total + q.scale(lam ** k)
        return total


def new_series(p, rs=(2, 3), max_r=None):
    """Fresh closed-chain series at lambda order 0."""
    qs = charge_tower(p, max_r=max(max(rs), max_r or 0))
    return DeformationSeries(charges={r: [qs[r]] for r in rs})


def _generator_terms(x, series, i):
    """Operator content X^{(i)} of the generator at lambda order i.

    Yields (op, first_group, second_group); the group keys identify which
    remnant sums have to cancel for lambda-dependent bilocal slots.
    """
    if isinstance(x, ChainOperator):
        return [(x, ("b", 0), ("a", 0))] if i == 0 else []
    if isinstance(x, LocalKernel):
        return [(ChainOperator("homogeneous", x), None, None)] if i == 0 else []
    if isinstance(x, (list,)):
        return [(x[i], ("b", i), ("a", i))] if i < len(x) else []
    if isinstance(x, tuple) and x and x[0] == "boost":
        ql = series.charges[x[1]]
        if i < len(ql):
            return [(ChainOperator("boost", ql[i]), None, None)]
        return []
    if isinstance(x, tuple) and x and x[0] == "bilocal":
        r, s = x[1], x[2]
        out = []
        for m in range(i + 1):
            n = i - m
            if m < len(series.charges[r]) and n < len(series.charges[s]):
                out.append((ChainOperator("bilocal", series.charges[r][m],
                                          series.charges[s][n]),
                            (s, n), (r, m)))
        return out
    if isinstance(x, tuple) and x and x[0] == "bilocal_z":
        ql = series.charges[x[1]]
        if i < len(ql):
            return [(ChainOperator("bilocal", magnon_counter(), ql[i]),
                     (x[1], i), ("Z", 0))]
        return []
    raise ValueError("non-admissible generator %r" % (x,))


def generator_step(x, series, k=None, tol=1e-9):
    """One order of the deformation-equation recursion.

    Extends every stored charge from order k to k+1 using
    Q^{(k+1)} = (i/(k+1)) sum_i [X^{(i)}, Q^{(k-i)}].  Boost and bilocal
    remnants must cancel across the order sum; a surviving remnant means the
    generator is not admissible for this family and raises ArithmeticError.
    """
    if series.boundary != "closed":
        raise NotImplementedError("series continuation is closed-chain only")
    if k is None:
        k = series.order
    if k != series.order:
        raise ValueError("series is at order %d, cannot step order %d"
                         % (series.order, k))
    for r, ql in series.charges.items():
        total = LocalKernel({})
        remnants = {}

        def add_rem(key, kern):
            if key in remnants:
                remnants[key] = remnants[key] + kern
            else:
                remnants[key] = kern

        for i in range(k + 1):
            for xop, gfirst, gsecond in _generator_terms(x, series, i):
                qk = ql[k - i]
                if xop.kind == "homogeneous":
                    total = total + commute_homogeneous(xop.k1, qk)
                elif xop.kind == "boost":
                    b_rem, loc = commute_boost(xop.k1, qk)
                    total = total + loc
                    add_rem(("boost",), b_rem)
                elif xop.kind == "bilocal":
                    first, second, loc = commute_bilocal(xop.k1, xop.k2, qk)
                    total = total + loc
                    add_rem(("first",) + (gfirst or ()), first)
                    add_rem(("second",) + (gsecond or ()), second)
                else:
                    raise ValueError("non-admissible generator kind %r"
                                     % (xop.kind,))
        scale = max(1.0, total.norm())
        for key, kern in remnants.items():
            if kern.norm() > tol * scale:
                raise ArithmeticError(
                    "generator remnant %r of size %.3e does not cancel"
                    % (key, kern.norm()))
        ql.append(total.scale(1j / (k + 1)).canonical())
    series.order = k + 1
    series.generators.append(x)
    return series


def series_matrix(series, r, lam, L, boundary="closed"):
    """Dense realization of Q_r(lambda) truncated at the stored order."""
    from .pauli import kernel_to_matrix
    total = None
    for k, q in enumerate(series.charges[r]):
        m = kernel_to_matrix(q, L, boundary=boundary) * (lam ** k)
        total = m if total is None else total + m
    return total


# ---------------------------------------------------------------------------
# named deformation directions for spectrum tests

def closed_deformation(name, p):
    """First-order closed deformation kernel for a named coupling class."""
    qs = charge_tower(p, max_r=4)
    tower = {r: qs[r] for r in qs}
    q2, q3 = qs[2], qs[3]
    if name == "alpha3":
        red, _ = reduce_range(commute_boost(q3, q2)[1].scale(1j), tower)
        return red
    if name == "beta23":
        return commute_bilocal(q2, q3, q2)[2].scale(1j)
    if name == "eta2":
        return commute_bilocal(magnon_counter(), q2, q2)[2].scale(1j)
    if name == "phi":
        return commute_boost(magnon_counter(), q2)[1].scale(1j)
    raise ValueError("unknown closed deformation class %r" % (name,))


def open_deformation(name, p, bp, tol=1e-8):
    """First-order open deformation with both boundaries, assembled from the
    left-frame and the mirrored right-frame generator actions.

    The odd generator classes pair with a relative minus sign between the two
    frames; the bulk actions of the two frames must agree, which is asserted.
    """
    h = open_q2(p, bp)
    q3o = open_q3(p, bp)
    hm, q3m = h.mirror(), q3o.mirror()
    zm = magnon_counter()

    def frame_op(hh, qq):
        if name == "delta3":
            return qq
        if name == "alpha3":
            return ChainOperator("boost", qq)
        if name == "beta23":
            first = OpenKernel(left=hh.left, bulk=hh.bulk)
            return ChainOperator("bilocal", first, qq)
        if name == "eta3":
            return ChainOperator("bilocal", zm, qq)
        raise ValueError("unknown open deformation class %r" % (name,))

    d_left = open_commute(frame_op(h, q3o), h).scale(1j).cleaned()
    d_right = open_commute(frame_op(hm, q3m), hm).scale(1j).cleaned()
    a_r = -1.0
    mism = (d_left.bulk - d_right.bulk.mirror().scale(a_r)).norm()
    scale = max(1.0, d_left.bulk.norm())
    if mism > tol * scale:
        raise ArithmeticError(
            "left/right bulk actions disagree by %.3e for %s" % (mism, name))
    return OpenKernel(left=d_left.left, bulk=d_left.bulk,
                      right=d_right.left.mirror().scale(a_r)).cleaned()
