"""Commutator calculus for translation-invariant, boosted and bilocal operators.

On the infinite chain a kernel L defines the homogeneous operator
sum_a L_a and the boost B[L] = sum_a a L_a.  The bilocal pairing of two
kernels is

    [A|B] = 1/2 sum_{a,c} Theta((c - a) - (r_A - r_B)/2) {A_a, B_c},

with the half-step function Theta(x) = 0, 1/2, 1 for x < 0, x = 0, x > 0.
Commutators of boosted or bilocal operators with a homogeneous operator are
again expressible through homogeneous, boosted, bilocal and (on half-infinite
chains) boundary-pinned pieces; the routines here track all of them exactly.

Open chains are handled in left-open form: sites 1, 2, 3, ... with operators
written as a bulk kernel (summed over all placements a >= 1) plus a pinned
kernel anchored at site 1.  Leading identity letters of a pinned word are
meaningful (they shift the content away from the edge); trailing ones are not.
The open boost is the pairing [1|L].  Right boundaries are obtained by
mirroring, so right-edge terms never appear in the left-open calculus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pauli import (
    LocalKernel,
    canonicalize,
    trim_word,
    _pair_window,
    kernel_to_matrix,
    kernel_sector_matrix,
    _word_sparse,
    _word_sites,
    _apply_word,
    sector_basis,
)

__all__ = [
    "ChainOperator",
    "OpenKernel",
    "theta_step",
    "commute_homogeneous",
    "commute_boost",
    "commute_bilocal",
    "bilocal_matrix",
    "bilocal_sector_matrix",
    "open_commute",
    "open_kernel_matrix",
    "open_kernel_sector_matrix",
    "chain_operator_open_matrix",
    "LocalityError",
]

_TINY = 1e-14


class LocalityError(ValueError):
    """Raised when a commutator that should reduce to local plus boundary
    pieces retains bilocal remnants above tolerance."""


@dataclass
class ChainOperator:
    """Tagged operator on the chain.

    kind:
      "homogeneous" -- sum_a (k1)_a,
      "boost"       -- B[k1] (closed: weighted sum; open: the pairing [1|k1]),
      "bilocal"     -- [k1|k2],
      "pinned"      -- k1 anchored at ``site``.
    """

    kind: str
    k1: object
    k2: object = None
    site: int = 1


@dataclass
class OpenKernel:
    """Operator data on an open chain: left-pinned, bulk, right-pinned parts."""

    left: LocalKernel = field(default_factory=LocalKernel)
    bulk: LocalKernel = field(default_factory=LocalKernel)
    right: LocalKernel = field(default_factory=LocalKernel)

    def __add__(self, other):
        return OpenKernel(self.left + other.left, self.bulk + other.bulk,
                          self.right + other.right)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, factor):
        return OpenKernel(self.left.scale(factor), self.bulk.scale(factor),
                          self.right.scale(factor))

    def mirror(self):
        """Reflect the chain; left and right parts swap, words reverse."""
        return OpenKernel(self.right.mirror(), self.bulk.mirror(), self.left.mirror())

    def cleaned(self, tol=1e-12):
        return OpenKernel(_clean_pinned(self.left.terms, tol),
                          self.bulk.canonical(tol),
                          _clean_right(self.right.terms, tol))

    def norm(self):
        return max(self.left.norm(), self.bulk.norm(), self.right.norm())

    def to_json(self):
        return {
            "left": self.left.to_json() if self.left.terms else None,
            "bulk": self.bulk.to_json(),
            "right": self.right.to_json() if self.right.terms else None,
        }


def _clean_pinned(terms, tol=1e-12):
    """Merge left-pinned words: strip trailing identities only."""
    out = {}
    for w, c in terms.items():
        s = w.rstrip("I")
        if not s:
            s = "I"
        out[s] = out.get(s, 0.0) + c
    return LocalKernel({w: c for w, c in sorted(out.items()) if abs(c) > tol})


def _clean_right(terms, tol=1e-12):
    """Merge right-pinned words: strip leading identities only."""
    out = {}
    for w, c in terms.items():
        s = w.lstrip("I")
        if not s:
            s = "I"
        out[s] = out.get(s, 0.0) + c
    return LocalKernel({w: c for w, c in sorted(out.items()) if abs(c) > tol})


def theta_step(x, tol=1e-9):
    if x > tol:
        return 1.0
    if x < -tol:
        return 0.0
    return 0.5


def _overlap_offsets(k1, k2):
    r1 = k1.range if isinstance(k1, LocalKernel) else max(map(len, k1), default=0)
    r2 = k2.range if isinstance(k2, LocalKernel) else max(map(len, k2), default=0)
    return range(1 - r2, r1)


def commute_homogeneous(k1, k2, tol=1e-12):
    """Kernel of [sum_a (k1)_a, sum_c (k2)_c] on the infinite chain."""
    acc = {}
    for d in _overlap_offsets(k1, k2):
        win = _pair_window(k1, k2, d, -1.0)
        for w, c in win.items():
            if abs(c) < _TINY:
                continue
            _, core, _ = trim_word(w)
            acc[core] = acc.get(core, 0.0) + c
    return canonicalize(acc, tol=tol)


def commute_boost(b, k, tol=1e-12):
    """[B[b], sum_a k_a] = B[boost_part] + sum_a (local_part)_a.

    Uses B[L x 1] = B[L] and B[1 x L] = B[L] - sum_a L_a to push every window
    word back to canonical form; the boost origin sits on the first leg of the
    window, which starts at min(0, d) for relative placement d.
    """
    boost_acc, local_acc = {}, {}
    for d in _overlap_offsets(b, k):
        win = _pair_window(b, k, d, -1.0)
        shift = min(0, d)
        for w, c in win.items():
            if abs(c) < _TINY:
                continue
            n, core, _ = trim_word(w)
            boost_acc[core] = boost_acc.get(core, 0.0) + c
            corr = -c * (n + shift)
            if corr != 0.0:
                local_acc[core] = local_acc.get(core, 0.0) + corr
    return canonicalize(boost_acc, tol=tol), canonicalize(local_acc, tol=tol)


def _theta_corr_closed(acc, X, Y, t_from, t_to, coeff):
    """Add to ``acc`` the kernel of the threshold shift

        1/2 sum_j (Theta(j - t_from) - Theta(j - t_to)) sum_a {X_a, Y_{a+j}}.
    """
    if abs(coeff) < _TINY:
        return
    lo = int(np.floor(min(t_from, t_to))) - 1
    hi = int(np.ceil(max(t_from, t_to))) + 1
    for j in range(lo, hi + 1):
        w = theta_step(j - t_from) - theta_step(j - t_to)
        if abs(w) < _TINY:
            continue
        win = _pair_window(X, Y, j, +1.0)
        for word, c in win.items():
            if abs(c) < _TINY:
                continue
            _, core, _ = trim_word(word)
            acc[core] = acc.get(core, 0.0) + 0.5 * w * coeff * c


def commute_bilocal(a, b, k, tol=1e-12):
    """Commutator of the bilocal [a|b] with the homogeneous operator of k.

    Returns (first, second, local) with

        [[a|b], sum k] = [first|b] + [a|second] + sum_a (local)_a,

    all kernels canonical and the bilocal thresholds those of the standard
    pairing.  ``first`` equals the kernel of [sum a, sum k] and ``second``
    that of [sum b, sum k]; both vanish when a and b commute with k, leaving
    a purely local result that depends on the Theta regularization.
    """
    ra = a.range
    rb = b.range
    s0 = 0.5 * (ra - rb)

    entries_first = []
    for d in _overlap_offsets(a, k):
        win = _pair_window(a, k, d, -1.0)
        t_d = s0 - min(0, d)
        for w, c in win.items():
            if abs(c) < _TINY:
                continue
            n, core, _ = trim_word(w)
            entries_first.append((core, c, t_d - n))

    entries_second = []
    for d in _overlap_offsets(b, k):
        win = _pair_window(b, k, d, -1.0)
        t_d = s0 + min(0, d)
        for w, c in win.items():
            if abs(c) < _TINY:
                continue
            n, core, _ = trim_word(w)
            entries_second.append((core, c, t_d + n))

    acc = {}
    for core, c, _ in entries_first:
        acc[core] = acc.get(core, 0.0) + c
    first = canonicalize(acc, tol=tol)
    acc = {}
    for core, c, _ in entries_second:
        acc[core] = acc.get(core, 0.0) + c
    second = canonicalize(acc, tol=tol)

    s_first = 0.5 * (first.range - rb) if first.terms else s0
    s_second = 0.5 * (ra - second.range) if second.terms else s0

    local_acc = {}
    for core, c, t in entries_first:
        _theta_corr_closed(local_acc, LocalKernel({core: 1.0}), b, t, s_first, c)
    for core, c, t in entries_second:
        _theta_corr_closed(local_acc, a, LocalKernel({core: 1.0}), t, s_second, c)
    return first, second, canonicalize(local_acc, tol=tol)


def _bilocal_placements(a, b, L):
    ra, rb = a.range, b.range
    s0 = 0.5 * (ra - rb)
    for wa, ca in a.terms.items():
        for wb, cb in b.terms.items():
            for pa in range(1, L - len(wa) + 2):
                for pb in range(1, L - len(wb) + 2):
                    w = theta_step((pb - pa) - s0)
                    if w == 0.0:
                        continue
                    yield wa, ca, pa, wb, cb, pb, w


def bilocal_matrix(a, b, L, boundary="open"):
    """Realize [a|b] on a finite chain (sum over non-wrapping placements).

    ``boundary`` accepts "open" or "closed_window"; both truncate the
    infinite-chain double sum to placements inside [1, L], which is the only
    meaningful finite realization of an ordered bilocal."""
    if boundary not in ("open", "closed_window"):
        raise ValueError("unknown boundary mode %r" % boundary)
    dim = 2 ** L
    import scipy.sparse as sp
    total = sp.csr_matrix((dim, dim), dtype=complex)
    for wa, ca, pa, wb, cb, pb, w in _bilocal_placements(a, b, L):
        ma = _word_sparse(wa, pa, L, wrap=False)
        mb = _word_sparse(wb, pb, L, wrap=False)
        total = total + (0.5 * w * ca * cb) * (ma @ mb + mb @ ma)
    return total


def bilocal_sector_matrix(a, b, L, M):
    """Sector-restricted dense realization of [a|b] on the open chain."""
    basis = sector_basis(L, M)
    index = {m: i for i, m in enumerate(basis)}
    dim = len(basis)

    def word_mat(word, pos):
        out = np.zeros((dim, dim), dtype=complex)
        sites = _word_sites(word, pos, L, False)
        for col, mask in enumerate(basis):
            new, amp = _apply_word(word, sites, mask, L)
            if amp != 0.0:
                out[index[new], col] += amp
        return out

    total = np.zeros((dim, dim), dtype=complex)
    for wa, ca, pa, wb, cb, pb, w in _bilocal_placements(a, b, L):
        ma = word_mat(wa, pa)
        mb = word_mat(wb, pb)
        total += (0.5 * w * ca * cb) * (ma @ mb + mb @ ma)
    return total


# ---------------------------------------------------------------------------
# Left-open calculus
# ---------------------------------------------------------------------------


class _OpenAccumulator:
    """Collects bulk, pinned, bilocal-remnant and edge-tail contributions of a
    left-open commutator."""

    def __init__(self):
        self.bulk = {}
        self.pinned = {}
        # remnants: [F|b]-type with F accumulated in the first slot, and
        # [a|S]-type in the second slot; entries carry their Theta threshold.
        self.first_entries = []   # (word, coeff, threshold) paired with fixed b
        self.second_entries = []  # (word, coeff, threshold) paired with fixed a
        # pinned-bilocal tails: word pinned at a site, paired with the second
        # kernel summed to its right.  Keyed (site, word) -> [(coeff, thr)].
        self.tails = {}
        # non-cancellable pin-times-homogeneous-sum content
        self.pin_residual = 0.0

    def add_bulk(self, word, coeff):
        if abs(coeff) > _TINY:
            self.bulk[word] = self.bulk.get(word, 0.0) + coeff

    def add_pinned(self, word_at_1, coeff):
        if abs(coeff) < _TINY:
            return
        s = word_at_1.rstrip("I")
        if not s:
            s = "I"
        self.pinned[s] = self.pinned.get(s, 0.0) + coeff

    def add_pinned_at(self, word, site, coeff):
        self.add_pinned("I" * (site - 1) + word, coeff)

    def add_window_open_sum(self, win, coeff=1.0):
        """Add sum_{m>=1} (win)_m for a window kernel anchored at its start,
        reducing leading identities: sum_{m>=1} (1^n x u)_m = sum u - sum_{j<=n} u_j."""
        for w, c in win.items():
            c = c * coeff
            if abs(c) < _TINY:
                continue
            n, core, _ = trim_word(w)
            self.add_bulk(core, c)
            for j in range(1, n + 1):
                self.add_pinned_at(core, j, -c)

    def add_tail(self, word, site, coeff, threshold):
        if abs(coeff) < _TINY:
            return
        key = (site, word)
        self.tails.setdefault(key, []).append((coeff, threshold))


def _open_theta_corr(acc, X, Y, t_from, t_to, coeff):
    """Left-open version of the threshold shift: the homogeneous sum of each
    anticommutator window starts at chain site 1, so leading identities feed
    pinned corrections."""
    if abs(coeff) < _TINY or abs(t_from - t_to) < 1e-12:
        return
    lo = int(np.floor(min(t_from, t_to))) - 1
    hi = int(np.ceil(max(t_from, t_to))) + 1
    for j in range(lo, hi + 1):
        w = theta_step(j - t_from) - theta_step(j - t_to)
        if abs(w) < _TINY:
            continue
        win = _pair_window(X, Y, j, +1.0)
        acc.add_window_open_sum(win, 0.5 * w * coeff)


def _pinned_window(k_pinned, other, a_other, sign, flip):
    """Window words of [k_pinned at site 1, other at site a_other] (sign=-1)
    or the anticommutator (sign=+1), anchored at site 1 (a_other >= 1).
    ``flip`` swaps the commutator order."""
    win = _pair_window(k_pinned, other, a_other - 1, sign)
    if flip and sign == -1.0:
        win = {w: -c for w, c in win.items()}
    return win


def _promote(x):
    """Normalize ``x`` to (kind, payload) for the open calculus."""
    if isinstance(x, OpenKernel):
        return "open", x
    if isinstance(x, LocalKernel):
        return "open", OpenKernel(bulk=x)
    if isinstance(x, ChainOperator):
        if x.kind == "homogeneous":
            return "open", OpenKernel(bulk=_as_kernel(x.k1))
        if x.kind == "pinned":
            k = _as_kernel(x.k1)
            shifted = {"I" * (x.site - 1) + w: c for w, c in k.terms.items()}
            return "open", OpenKernel(left=LocalKernel(shifted))
        if x.kind == "boost":
            return "bilocal", (OpenKernel(bulk=LocalKernel({"I": 1.0})),
                               _as_open(x.k1))
        if x.kind == "bilocal":
            return "bilocal", (_as_open(x.k1), _as_open(x.k2))
    raise TypeError("cannot interpret %r as an open-chain operator" % (x,))


def _as_kernel(k):
    return k if isinstance(k, LocalKernel) else LocalKernel(k)


def _as_open(k):
    if isinstance(k, OpenKernel):
        return k
    return OpenKernel(bulk=_as_kernel(k))


def _open_commute_kernels(acc, x_open, q_open):
    """[x_bulk + x_pinned, q_bulk + q_pinned] on the left-open chain."""
    xb, xp = x_open.bulk, x_open.left
    qb, qp = q_open.bulk, q_open.left

    if xb.terms and qb.terms:
        for d in _overlap_offsets(xb, qb):
            win = _pair_window(xb, qb, d, -1.0)
            acc.add_window_open_sum(win)

    # bulk against pinned: finitely many placements near the edge
    if xb.terms and qp.terms:
        for pos in range(1, qp.range + 1):
            win = _pinned_window(qp, xb, pos, -1.0, flip=True)
            for w, c in win.items():
                acc.add_pinned(w, c)
    if xp.terms and qb.terms:
        for pos in range(1, xp.range + 1):
            win = _pinned_window(xp, qb, pos, -1.0, flip=False)
            for w, c in win.items():
                acc.add_pinned(w, c)
    if xp.terms and qp.terms:
        win = _pair_window(xp, qp, 0, -1.0)
        for w, c in win.items():
            acc.add_pinned(w, c)


def _bilocal_first_pin(acc, ap, b_open, q_open):
    """Contributions of a pinned first slot: [[ap|B], q] with ap at site 1.

    The pin pairs with B summed to its right.  The genuinely non-local pieces
    are {[ap, q], B-right} (tail entries, cancelling against the bulk-slot
    tails) and {ap, sum [B, q]} (local only when the homogeneous part of
    [b, q] vanishes; otherwise recorded in pin_residual).  Theta-cutoff
    choices here differ from other conventions by pinned-local terms only,
    i.e. by a boundary similarity transformation.
    """
    b_kern = b_open.bulk
    qb, qp = q_open.bulk, q_open.left
    sp = 0.5 * (ap.range - b_kern.range) if b_kern.terms else 0.0

    # [ap | b_pin] is a finite pinned operator; fold into the kernel commutator
    if b_open.left.terms:
        bp = b_open.left
        w0 = theta_step(-0.5 * (ap.range - bp.range))
        if w0 != 0.0:
            win = _pair_window(ap, bp, 0, +1.0)
            pin_op = OpenKernel(left=_clean_pinned(
                {w: 0.5 * w0 * c for w, c in win.items()}))
            if pin_op.left.terms:
                _open_commute_kernels(acc, pin_op, q_open)

    if not b_kern.terms or not ap.terms:
        return

    # {[ap, q], b_pos}: pinned cores paired with b summed to the right
    pin_comm = {}
    if qb.terms:
        for pos in range(1, ap.range + 1):
            win = _pinned_window(ap, qb, pos, -1.0, flip=False)
            for w, c in win.items():
                pin_comm[w] = pin_comm.get(w, 0.0) + c
    if qp.terms:
        win = _pair_window(ap, qp, 0, -1.0)
        for w, c in win.items():
            pin_comm[w] = pin_comm.get(w, 0.0) + c
    for w, c in pin_comm.items():
        if abs(c) < _TINY:
            continue
        n, core, _ = trim_word(w)
        acc.add_tail(core, 1 + n, c, sp - n)

    # {ap, sum_pos [b_pos, q]}: half-line sum of the commutator of b with q
    scratch = _OpenAccumulator()
    _open_commute_kernels(scratch, OpenKernel(bulk=b_kern), q_open)
    c_hom = canonicalize(scratch.bulk)
    if c_hom.terms:
        acc.pin_residual = max(acc.pin_residual, c_hom.norm() * ap.norm())
    for w, c in _clean_pinned(scratch.pinned).terms.items():
        win = _pair_window(ap, LocalKernel({w: 1.0}), 0, +1.0)
        for w2, c2 in win.items():
            acc.add_pinned(w2, 0.5 * c * c2)
    # Theta-cutoff corrections near the edge: weight (Theta - 1) for b at pos,
    # commuted against the q placements that exist on the half line
    pos_max = max(int(np.ceil(sp)) + 2, 1)
    for pos in range(1, pos_max + 1):
        wgt = theta_step((pos - 1) - sp) - 1.0
        if wgt == 0.0:
            continue
        if qb.terms:
            for d in _overlap_offsets(b_kern, qb):
                if pos + d < 1:
                    continue
                win = _pair_window(b_kern, qb, d, -1.0)
                anchor = pos + min(0, d)
                for w, c in win.items():
                    if abs(c) < _TINY:
                        continue
                    win2 = _pair_window(ap, LocalKernel({w: 1.0}),
                                        anchor - 1, +1.0)
                    for w2, c2 in win2.items():
                        acc.add_pinned(w2, 0.5 * wgt * c * c2)
        if qp.terms:
            win = _pinned_window(qp, b_kern, pos, -1.0, flip=True)
            for w, c in win.items():
                if abs(c) < _TINY:
                    continue
                win2 = _pair_window(ap, LocalKernel({w: 1.0}), 0, +1.0)
                for w2, c2 in win2.items():
                    acc.add_pinned(w2, 0.5 * wgt * c * c2)


def _open_commute_bilocal(acc, a_open, b_open, q_open):
    """[[a|b], q] on the left-open chain, all slots with possible pinned parts."""
    a_kern = a_open.bulk
    b_kern = b_open.bulk
    qb, qp = q_open.bulk, q_open.left
    ra, rb = a_kern.range, b_kern.range
    s0 = 0.5 * (ra - rb)

    if a_open.left.terms:
        _bilocal_first_pin(acc, a_open.left, b_open, q_open)

    # Pinned part of the second slot: [a | b_pinned] is itself a finite pinned
    # operator; fold it into the plain kernel commutator.
    if b_open.left.terms:
        bp = b_open.left
        s0p = 0.5 * (ra - bp.range)
        extra = _OpenAccumulator()
        amax = int(np.ceil(1 - s0p)) + 2
        for pos in range(1, max(amax, 1) + 1):
            w = theta_step((1 - pos) - s0p)
            if w == 0.0:
                continue
            win = _pinned_window(bp, a_kern, pos, +1.0, flip=False)
            for word, c in win.items():
                extra.add_pinned(word, 0.5 * w * c)
        pin_op = OpenKernel(left=_clean_pinned(extra.pinned))
        _open_commute_kernels(acc, pin_op, q_open)

    if not b_kern.terms or not a_kern.terms:
        return

    # --- first slot against the bulk of q
    if qb.terms:
        for d in _overlap_offsets(a_kern, qb):
            win = _pair_window(a_kern, qb, d, -1.0)
            t_d = s0 - min(0, d)
            for w, c in win.items():
                if abs(c) < _TINY:
                    continue
                n, core, _ = trim_word(w)
                acc.first_entries.append((core, c, t_d - n))
                for j in range(1, n + 1):
                    acc.add_tail(core, j, -c, t_d - n)

        # --- second slot against the bulk of q
        for d in _overlap_offsets(b_kern, qb):
            win = _pair_window(b_kern, qb, d, -1.0)
            t_d = s0 + min(0, d)
            for w, c in win.items():
                if abs(c) < _TINY:
                    continue
                n, core, _ = trim_word(w)
                t = t_d + n
                acc.second_entries.append((core, c, t))
                # word placements with the core at sites 1..n are missing from
                # the half-chain sum; each pairs with a finite sum over a.
                for j in range(1, n + 1):
                    amax = int(np.ceil(j - t)) + 2
                    for pos in range(1, max(amax, 1) + 1):
                        w_a = theta_step((j - pos) - t)
                        if w_a == 0.0:
                            continue
                        win2 = _pair_window(
                            LocalKernel({core: 1.0}), a_kern, pos - j, +1.0)
                        for word2, c2 in win2.items():
                            acc.add_pinned_at(word2, min(j, pos), -0.5 * w_a * c * c2)

    # --- bilocal against the pinned part of q
    if qp.terms:
        # {[a_pos, qp], b_c}: pinned content paired with b summed to the right
        for pos in range(1, qp.range + 1):
            win = _pinned_window(qp, a_kern, pos, -1.0, flip=True)
            for w, c in win.items():
                if abs(c) < _TINY:
                    continue
                n, core, _ = trim_word(w)
                acc.add_tail(core, 1 + n, c, s0 + pos - (1 + n))
        # {a_a, [b_c, qp]}: finite sum over a; the Theta weight references the
        # original anchor of b, i.e. the placement pos, not the trimmed word.
        for pos in range(1, qp.range + 1):
            win = _pinned_window(qp, b_kern, pos, -1.0, flip=True)
            amax = int(np.ceil(pos - s0)) + 2
            for w, c in win.items():
                if abs(c) < _TINY:
                    continue
                n, core, _ = trim_word(w)
                j = 1 + n
                for apos in range(1, max(amax, 1) + 1):
                    w_a = theta_step((pos - apos) - s0)
                    if w_a == 0.0:
                        continue
                    win2 = _pair_window(LocalKernel({core: 1.0}), a_kern,
                                        apos - j, +1.0)
                    for word2, c2 in win2.items():
                        acc.add_pinned_at(word2, min(j, apos), 0.5 * w_a * c * c2)


def _finalize_open(acc, a_kern, b_kern, tol, require_local):
    """Standardize thresholds, check remnant cancellation, return OpenKernel."""
    residual = 0.0

    if acc.first_entries:
        merged = {}
        for core, c, _ in acc.first_entries:
            merged[core] = merged.get(core, 0.0) + c
        first_tot = canonicalize(merged)
        s_ref = 0.5 * (first_tot.range - b_kern.range) if first_tot.terms \
            else 0.5 * (1 - b_kern.range)
        for core, c, t in acc.first_entries:
            _open_theta_corr(acc, LocalKernel({core: 1.0}), b_kern, t, s_ref, c)
        residual = max(residual, first_tot.norm())

    if acc.second_entries:
        merged = {}
        for core, c, _ in acc.second_entries:
            merged[core] = merged.get(core, 0.0) + c
        second_tot = canonicalize(merged)
        s_ref = 0.5 * (a_kern.range - second_tot.range) if second_tot.terms \
            else 0.5 * (a_kern.range - 1)
        for core, c, t in acc.second_entries:
            _open_theta_corr(acc, a_kern, LocalKernel({core: 1.0}), t, s_ref, c)
        residual = max(residual, second_tot.norm())

    # pinned tails: standardize each (site, word) group to a common threshold,
    # the finite threshold shifts being genuine pinned contributions
    for (site, word), entries in acc.tails.items():
        t_ref = entries[0][1]
        total = 0.0
        for c, t in entries:
            total += c
            if abs(t - t_ref) < 1e-12 or abs(c) < _TINY:
                continue
            lo = int(np.floor(min(t, t_ref))) - 1
            hi = int(np.ceil(max(t, t_ref))) + 1
            for j in range(lo, hi + 1):
                w = theta_step(j - t) - theta_step(j - t_ref)
                if abs(w) < _TINY or site + j < 1:
                    continue
                win = _pair_window(LocalKernel({word: 1.0}), b_kern, j, +1.0)
                for word2, c2 in win.items():
                    acc.add_pinned_at(word2, min(site, site + j), 0.5 * w * c * c2)
        residual = max(residual, abs(total))

    residual = max(residual, acc.pin_residual)
    if require_local and residual > tol:
        raise LocalityError(
            "bilocal remnants of size %.3e survive the open commutator" % residual)

    return OpenKernel(left=_clean_pinned(acc.pinned),
                      bulk=canonicalize(acc.bulk)), residual


def open_commute(x, q, tol=1e-8, require_local=True, return_residual=False):
    """Commutator [x, q] on the left-open chain.

    ``q`` is an OpenKernel (or plain kernel, taken as pure bulk); ``x`` may be
    an OpenKernel or a ChainOperator of any kind.  The result must reduce to
    bulk plus left-pinned terms; if bilocal remnants survive (x does not
    commute appropriately with q) a LocalityError is raised unless
    ``require_local`` is false.
    """
    q_open = _as_open(q)
    kind, payload = _promote(x)
    acc = _OpenAccumulator()
    if kind == "open":
        _open_commute_kernels(acc, payload, q_open)
        a_kern = b_kern = LocalKernel({"I": 1.0})
        result, residual = _finalize_open(acc, a_kern, b_kern, tol, require_local)
    else:
        a_open, b_open = payload
        _open_commute_bilocal(acc, a_open, b_open, q_open)
        result, residual = _finalize_open(acc, a_open.bulk, b_open.bulk, tol,
                                          require_local)
    if return_residual:
        return result, residual
    return result


def open_kernel_matrix(op, L):
    """Sparse matrix of an OpenKernel on a finite open chain of length L."""
    import scipy.sparse as sp
    dim = 2 ** L
    total = sp.csr_matrix((dim, dim), dtype=complex)
    if op.bulk.terms:
        total = total + kernel_to_matrix(op.bulk, L, boundary="open")
    for w, c in op.left.terms.items():
        if len(w) > L:
            raise ValueError("left-pinned word %r exceeds chain" % w)
        total = total + c * _word_sparse(w, 1, L, wrap=False)
    for w, c in op.right.terms.items():
        if len(w) > L:
            raise ValueError("right-pinned word %r exceeds chain" % w)
        total = total + c * _word_sparse(w, L - len(w) + 1, L, wrap=False)
    return total


def chain_operator_open_matrix(op, L):
    """Sparse finite-chain realization of a ChainOperator on the open chain.

    Boosts are realized as the bilocal pairing with the identity, so that the
    dense matrix matches the operator the open calculus manipulates; a bilocal
    whose second slot carries a left-pinned part picks up the Theta-weighted
    anticommutator of that pin with the first slot.
    """
    import scipy.sparse as sp
    if isinstance(op, (OpenKernel, LocalKernel)):
        return open_kernel_matrix(_as_open(op), L)
    if not isinstance(op, ChainOperator):
        raise TypeError("expected a ChainOperator or kernel, got %r" % (op,))
    if op.kind == "homogeneous":
        return open_kernel_matrix(_as_open(_as_kernel(op.k1)), L)
    if op.kind == "pinned":
        k = _as_kernel(op.k1)
        dim = 2 ** L
        total = sp.csr_matrix((dim, dim), dtype=complex)
        for w, c in k.terms.items():
            total = total + c * _word_sparse(w, op.site, L, wrap=False)
        return total
    if op.kind == "boost":
        a_kern = LocalKernel({"I": 1.0})
        b_open = _as_open(op.k1)
    elif op.kind == "bilocal":
        if isinstance(op.k1, OpenKernel):
            if op.k1.left.terms or op.k1.right.terms:
                raise ValueError(
                    "pinned first slot has no unique finite realization here")
            a_kern = op.k1.bulk
        else:
            a_kern = _as_kernel(op.k1)
        b_open = _as_open(op.k2)
    else:
        raise ValueError("unknown ChainOperator kind %r" % op.kind)
    total = bilocal_matrix(a_kern, b_open.bulk, L) if b_open.bulk.terms \
        else sp.csr_matrix((2 ** L, 2 ** L), dtype=complex)
    if b_open.left.terms:
        bp = b_open.left
        s0p = 0.5 * (a_kern.range - bp.range)
        mb = sp.csr_matrix((2 ** L, 2 ** L), dtype=complex)
        for w, c in bp.terms.items():
            mb = mb + c * _word_sparse(w, 1, L, wrap=False)
        for wa, ca in a_kern.terms.items():
            for pos in range(1, L - len(wa) + 2):
                w = theta_step((1 - pos) - s0p)
                if w == 0.0:
                    continue
                ma = _word_sparse(wa, pos, L, wrap=False)
                total = total + (0.5 * w * ca) * (ma @ mb + mb @ ma)
    if b_open.right.terms:
        raise ValueError("right-pinned second slot is not supported here")
    return total


def open_kernel_sector_matrix(op, L, M):
    """Dense M-magnon sector matrix of an OpenKernel on a finite open chain."""
    extra = [(op.left, 1)] if op.left.terms else []
    right = op.right.terms
    basis = sector_basis(L, M)
    index = {m: i for i, m in enumerate(basis)}
    out = kernel_sector_matrix(op.bulk, L, M, boundary="open", extra_pinned=extra) \
        if op.bulk.terms or extra else np.zeros((len(basis), len(basis)), dtype=complex)
    for w, c in right.items():
        sites = _word_sites(w, L - len(w) + 1, L, False)
        for col, mask in enumerate(basis):
            new, amp = _apply_word(w, sites, mask, L)
            if amp != 0.0:
                out[index[new], col] += c * amp
    return out
