"""Asymptotic Bethe ansatz for the twisted chain and its deformations.

Dispersions and one-magnon charge eigenvalues come from the closed-form
derivative recursion; long-range couplings enter through the rapidity map
(gamma tables), the dressing phase, and boundary reflection phases.  The
solvers work on the logarithmic Bethe equations with explicit mode numbers
and validate against dense sector diagonalization.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .model import q2_kernel
from .pauli import LocalKernel, kernel_sector_matrix, sector_basis


class BetheError(RuntimeError):
    """Numerical failure of the Bethe machinery (pole, divergence)."""


_POLE_TOL = 1e-12


# ---------------------------------------------------------------------------
# NN dispersions

_COTH_POLYS = [np.array([0.0, 1.0])]


def _coth_table(x, n):
    """coth(x) and its first n derivatives.

    Uses d coth/dx = 1 - coth^2, so the k-th derivative is a polynomial in
    coth evaluated once; the polynomials are cached at module level.
    """
    s = np.sinh(x)
    if abs(s) < _POLE_TOL:
        raise BetheError("dispersion pole: sinh vanishes at %r" % (x,))
    c = np.cosh(x) / s
    while len(_COTH_POLYS) <= n:
        _COTH_POLYS.append(npoly.polymul(npoly.polyder(_COTH_POLYS[-1]),
                                         np.array([1.0, 0.0, -1.0])))
    return [npoly.polyval(c, _COTH_POLYS[k]) for k in range(n + 1)]


def nn_charges(p, u, r_max=4):
    """One-magnon NN charge eigenvalues {r: q_r(u)} for r = 2..r_max.

    q_2(u) = i hbar [coth hbar(u+i/2) - coth hbar(u-i/2)] and
    q_r = (1/(r-1)) dq_{r-1}/du, resolved analytically.
    """
    hb = p.hbar
    tp = _coth_table(hb * (u + 0.5j), r_max - 2)
    tm = _coth_table(hb * (u - 0.5j), r_max - 2)
    out = {}
    for r in range(2, r_max + 1):
        k = r - 2
        out[r] = 1j * hb ** (r - 1) / math.factorial(r - 1) * (tp[k] - tm[k])
    return out


def nn_momentum(p, u):
    """p(u) = -phi - i log[sinh hbar(u+i/2)/sinh hbar(u-i/2)], principal."""
    sp = np.sinh(p.hbar * (u + 0.5j))
    sm = np.sinh(p.hbar * (u - 0.5j))
    if min(abs(sp), abs(sm)) < _POLE_TOL:
        raise BetheError("momentum pole at u = %r" % (u,))
    return -p.phi - 1j * np.log(sp / sm)


def nn_dispersion(u, p, r_max=4):
    """(p(u), {r: q_r(u)}) for the NN chain."""
    return nn_momentum(p, u), nn_charges(p, u, r_max)


def magnon_energy(p, mom):
    """q2 as a function of momentum: 2 i hbar (cosh i hbar - cosh i(p+phi)) / sinh i hbar."""
    ih = 1j * p.hbar
    return 2j * p.hbar * (np.cosh(ih) - np.cosh(1j * (mom + p.phi))) \
        / np.sinh(ih)


def rapidity_from_momentum(p, mom):
    """Invert p(u) through the Möbius relation in w = e^{i(p+phi)}."""
    w = np.exp(1j * (mom + p.phi))
    e = np.exp(0.5j * p.hbar)
    num = 1.0 / e - w * e
    den = e - w / e
    if min(abs(num), abs(den)) < 1e-14:
        raise BetheError("momentum %r sits at a parametrization pole" % (mom,))
    return np.log(num / den) / (2 * p.hbar)


# ---------------------------------------------------------------------------
# rapidity map

def _ser_mul(a, b):
    out = np.zeros(len(a), complex)
    for i, ai in enumerate(a):
        if ai != 0:
            out[i:] += ai * b[:len(a) - i]
    return out


def _ser_inv(w):
    out = np.zeros(len(w), complex)
    out[0] = 1.0
    for k in range(1, len(w)):
        out[k] = -np.dot(w[1:k + 1], out[k - 1::-1])
    return out


def _ser_ipow(w, m):
    """w^{-m} for a series with w[0] = 1."""
    inv = _ser_inv(w)
    out = np.zeros(len(w), complex)
    out[0] = 1.0
    for _ in range(m):
        out = _ser_mul(out, inv)
    return out


def _ser_log(w):
    out = np.zeros(len(w), complex)
    for k in range(1, len(w)):
        acc = w[k] * k
        for j in range(1, k):
            acc -= j * out[j] * w[k - j]
        out[k] = acc / k
    return out


_GAMMA_CACHE = {}


def rapidity_map(alpha, K=8):
    """Gamma tables of the reparametrization u(x) = x + sum_n alpha_n x^{2-n}.

    Returns (gamma, gmap): gamma[s] dresses the momentum and gmap[(r, s)]
    (s > r) dresses q_r, extracted from the generating relations for
    log x(u) and x(u)^{1-r} as series in 1/u.  Both are hbar-independent.
    """
    ck = (tuple(sorted(alpha.items())), K)
    hit = _GAMMA_CACHE.get(ck)
    if hit is not None:
        return hit
    w = np.zeros(K + 1, complex)
    w[0] = 1.0
    # x(u)/u = w(1/u); each pass fixes one further order
    for _ in range(K + 1):
        acc = np.zeros(K + 1, complex)
        acc[0] = 1.0
        for n, a in alpha.items():
            if a == 0 or n - 1 > K:
                continue
            term = _ser_ipow(w, n - 2)
            acc[n - 1:] -= a * term[:K + 2 - n]
        w = acc
    lg = _ser_log(w)
    gamma = {}
    for s in range(2, K + 1):
        g = -(s - 1) * lg[s - 1]
        if g != 0:
            gamma[s] = g
    gmap = {}
    for r in range(2, K + 1):
        wi = _ser_ipow(w, r - 1)
        for s in range(r + 1, K + 1):
            if wi[s - r] != 0:
                gmap[(r, s)] = (s - 1) / (r - 1) * wi[s - r]
    _GAMMA_CACHE[ck] = (gamma, gmap)
    return gamma, gmap


def x_of_u(alpha, u, tol=1e-13, max_iter=60):
    """Numeric inverse of u(x) by Newton from x = u."""
    x = complex(u)
    for _ in range(max_iter):
        f = x + sum(a * x ** (2 - n) for n, a in alpha.items()) - u
        if abs(f) < tol:
            return x
        df = 1.0 + sum(a * (2 - n) * x ** (1 - n) for n, a in alpha.items())
        if abs(df) < 1e-14:
            break
        x = x - f / df
    raise BetheError("rapidity-map inversion stalled at u = %r" % (u,))


# ---------------------------------------------------------------------------
# couplings and dressed quantities

@dataclass
class LongRangeCouplings:
    """Coupling data of a long-range model at one value of lambda.

    alpha: {n: alpha_n} rapidity map; beta: {(r, s): beta_rs} dressing;
    eta: {r: eta_r} momentum twist; delta: {odd r: delta_r} boundary phase;
    dphi / dhbar / dxi shift the NN parameters.
    """
    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    dphi: complex = 0.0
    dhbar: complex = 0.0
    dxi_minus: complex = 0.0
    dxi_plus: complex = 0.0
    r_max: int = 6

    def model(self, p):
        return p.replace(hbar=p.hbar + self.dhbar, phi=p.phi + self.dphi)


def dressed_dispersion(u, p, c):
    """(p(u), {r: q_r(u)}) with the rapidity map applied on top of the NN
    dispersions at the shifted couplings."""
    pp = c.model(p)
    mom = nn_momentum(pp, u)
    q = nn_charges(pp, u, c.r_max)
    if c.alpha:
        gamma, gmap = rapidity_map(c.alpha, K=c.r_max)
        mom = mom + sum(g * q[s] for s, g in gamma.items() if s in q)
        q = {r: qr + sum(gmap.get((r, s), 0.0) * q[s]
                         for s in range(r + 1, c.r_max + 1))
             for r, qr in q.items()}
    return mom, q


def dressing_phase(u, v, c, p):
    """theta(u, v): antisymmetric two-magnon phase from beta and eta."""
    if not (c.beta or c.eta):
        return 0.0
    pp = c.model(p)
    qu = nn_charges(pp, u, c.r_max)
    qv = nn_charges(pp, v, c.r_max)
    th = 0.0
    for (r, s), b in c.beta.items():
        th += b * (qu[r] * qv[s] - qu[s] * qv[r])
    for r, e in c.eta.items():
        th += e * (qu[r] - qv[r])
    return th


def boundary_phase_from_bilocal(r, s, c, u, p):
    """Reflection-phase piece -4i beta_{r,s} q_r(u) q_s(u) of the even-odd
    bilocal class; the parity-odd remainder is absorbed into delta."""
    if (r + s) % 2 == 0:
        raise ValueError("pairing must couple an even and an odd charge")
    b = c.beta.get((r, s), 0.0)
    if b == 0:
        return 0.0
    q = nn_charges(c.model(p), u, max(r, s))
    return -4j * b * q[r] * q[s]


# ---------------------------------------------------------------------------
# Bethe equations, logarithmic form

def _log_s_bulk(p, c, d):
    """-i log of the undressed bulk scattering factor at separation d."""
    hb = p.hbar + c.dhbar
    num = np.sinh(hb * (d + 1j))
    den = np.sinh(hb * (d - 1j))
    if min(abs(num), abs(den)) < _POLE_TOL:
        raise BetheError("scattering pole at separation %r" % (d,))
    return -1j * np.log(num / den)


def _closed_F(us, L, p, c, modes, D=None):
    """Log-form closed equations.  ``D`` optionally supplies exact pairwise
    differences (string coordinates) to avoid cancellation in tight strings."""
    out = np.zeros(len(us), complex)
    for k, u in enumerate(us):
        mom, _ = dressed_dispersion(u, p, c)
        acc = mom * L - 2 * math.pi * modes[k]
        for j, v in enumerate(us):
            if j == k:
                continue
            acc -= _log_s_bulk(p, c, u - v if D is None else D[k][j])
            acc += 2 * dressing_phase(u, v, c, p)
        out[k] = acc
    return out


def _open_momentum(u, p, c):
    """Parity-odd momentum: the twist never enters open Bethe equations."""
    mom, _ = dressed_dispersion(u, p.replace(phi=0.0),
                                LongRangeCouplings(
                                    alpha=c.alpha, dhbar=c.dhbar,
                                    r_max=c.r_max))
    return mom


def _omega(u, p, c):
    """omega_- + omega_+: odd-charge boundary phases, minus the reflected
    dressing phase, plus the even-odd bilocal reflection factor."""
    out = 0.0
    if c.delta:
        q = nn_charges(c.model(p), u, max(c.delta))
        out += sum(d * q[r] for r, d in c.delta.items())
    out -= dressing_phase(-u, u, c, p)
    for (r, s) in c.beta:
        if (r + s) % 2 == 1:
            out += boundary_phase_from_bilocal(r, s, c, u, p)
    return out


def _log_boundary(u, p, c, bp):
    hb = p.hbar + c.dhbar
    out = 0.0
    for xi in (bp.xi_minus + c.dxi_minus, bp.xi_plus + c.dxi_plus):
        num = np.sinh(hb * (xi - u - 0.5j))
        den = np.sinh(hb * (xi + u - 0.5j))
        if min(abs(num), abs(den)) < _POLE_TOL:
            raise BetheError("boundary pole at u = %r" % (u,))
        out += -1j * np.log(num / den)
    return out


def _open_F(us, L, p, c, bp, modes, D=None):
    out = np.zeros(len(us), complex)
    for k, u in enumerate(us):
        acc = 2 * _open_momentum(u, p, c) * L \
            - _log_boundary(u, p, c, bp) - 2 * _omega(u, p, c) \
            - 2 * math.pi * modes[k]
        for j, v in enumerate(us):
            if j == k:
                continue
            d = u - v if D is None else D[k][j]
            acc -= _log_s_bulk(p, c, d) + _log_s_bulk(p, c, u + v)
            acc -= 2 * dressing_phase(u, v, c, p)
            acc += 2 * dressing_phase(-u, v, c, p)
        out[k] = acc
    return out


def _closed_poly_F(us, L, p, c):
    """Product-form closed equations with the string-pole factors cleared.

    The log form is singular when two roots approach separation i (bound
    states) and its real restriction can never leave the real axis; this form
    is entire there and complex-valued on real input, so Newton reaches
    complex pairs from real seeds.
    """
    hb = p.hbar + c.dhbar
    out = np.zeros(len(us), complex)
    for k, u in enumerate(us):
        mom, _ = dressed_dispersion(u, p, c)
        t1 = np.exp(1j * mom * L)
        t2 = 1.0
        for j, v in enumerate(us):
            if j == k:
                continue
            t1 = t1 * np.sinh(hb * (u - v - 1j)) \
                * np.exp(2j * dressing_phase(u, v, c, p))
            t2 = t2 * np.sinh(hb * (u - v + 1j))
        if abs(t2) < 1e-280:
            raise BetheError("scattering product underflow")
        # ratio form: scale-free, and analytic through string separations
        out[k] = t1 / t2 - 1.0
    return out


def _open_poly_F(us, L, p, c, bp):
    """Product-form open equations; clears string poles at u_k -+ u_j = +-i
    and the boundary-factor denominators."""
    hb = p.hbar + c.dhbar
    out = np.zeros(len(us), complex)
    for k, u in enumerate(us):
        t1 = np.exp(2j * _open_momentum(u, p, c) * L + 2j * _omega(u, p, c))
        t2 = 1.0
        for xi in (bp.xi_minus + c.dxi_minus, bp.xi_plus + c.dxi_plus):
            t1 = t1 * np.sinh(hb * (xi - u - 0.5j))
            t2 = t2 * np.sinh(hb * (xi + u - 0.5j))
        for j, v in enumerate(us):
            if j == k:
                continue
            t1 = t1 * np.sinh(hb * (u - v - 1j)) * np.sinh(hb * (u + v - 1j)) \
                * np.exp(2j * (dressing_phase(u, v, c, p)
                               - dressing_phase(-u, v, c, p)))
            t2 = t2 * np.sinh(hb * (u - v + 1j)) * np.sinh(hb * (u + v + 1j))
        if abs(t2) < 1e-280:
            raise BetheError("scattering product underflow")
        out[k] = t1 / t2 - 1.0
    return out


def _newton(fun, us0, tol, max_iter, branch=False):
    """Damped Newton with a finite-difference Jacobian.

    With ``branch=True`` the integer multiple of 2 pi each component carries
    at the seed (principal log branch) is frozen and subtracted throughout,
    which relabels the mode numbers onto the branch the seed sits on.
    """
    us = np.array(us0, complex)
    if branch:
        base = fun(us)
        off = 2 * math.pi * np.round(np.real(base) / (2 * math.pi))
        raw = fun
        fun = lambda v: raw(v) - off
    fd = 1e-7
    best, stale = np.inf, 0
    for _ in range(max_iter):
        f = fun(us)
        r0 = np.abs(f).max()
        if r0 <= tol:
            return us, r0
        if np.abs(us).max() > 40.0:
            raise BetheError("roots diverged")
        m = len(us)
        for i in range(m):
            for j in range(i + 1, m):
                if abs(us[i] - us[j]) < 1e-9:
                    raise BetheError("singular root configuration")
        if r0 < 0.75 * best:
            best, stale = r0, 0
        else:
            stale += 1
            if stale >= 6:
                raise BetheError("Newton stalled at residual %.3e" % r0)
        jac = np.zeros((m, m), complex)
        for j in range(m):
            e = np.zeros(m, complex)
            e[j] = fd
            jac[:, j] = (fun(us + e) - fun(us - e)) / (2 * fd)
        try:
            du = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise BetheError("singular Jacobian at residual %.3e" % r0)
        step = 1.0
        for _ in range(9):
            try:
                trial = us + step * du
                r1 = np.abs(fun(trial)).max()
            except BetheError:
                r1 = np.inf
            if r1 < r0:
                us = trial
                break
            step /= 2
        else:
            raise BetheError("Newton stalled at residual %.3e" % r0)
    r = np.abs(fun(us)).max()
    if r > tol:
        raise BetheError("Newton did not converge: residual %.3e" % r)
    return us, r


def _fold(u, hbar):
    """Reduce a rapidity modulo the period i pi / hbar of every Bethe
    ingredient (sh ratios, dispersions, scattering factors)."""
    per = 1j * math.pi / hbar
    return u - per * np.round(np.real(u * hbar / (1j * math.pi)))


def _check_distinct(us, hbar, tol=1e-8):
    for i in range(len(us)):
        for j in range(i + 1, len(us)):
            if abs(_fold(us[i] - us[j], hbar)) < tol:
                raise BetheError("singular root configuration")


def _grouped_seeds(modes, seed_fn, split=0.48j):
    """Seeds per mode number; repeated modes split into a string pattern."""
    total = {}
    for n in modes:
        total[n] = total.get(n, 0) + 1
    seen = {}
    out = []
    for n in modes:
        k = seen.get(n, 0)
        seen[n] = k + 1
        u = seed_fn(n)
        g = total[n]
        if g > 1:
            u = u + 2 * split * (k - (g - 1) / 2.0)
        out.append(u)
    return out


@dataclass
class BetheSolution:
    """Converged root configuration with its derived observables."""
    rapidities: list
    momenta: list                  # Re p mod 2pi per root
    charges: dict                  # r -> sum over roots of dressed q_r
    residual: float
    boundary: str
    mode_numbers: list

    @property
    def energy(self):
        return self.charges[2]


def _package(us, p, c, modes, boundary, residual):
    moms, charges = [], {}
    for u in us:
        if boundary == "closed":
            mom, q = dressed_dispersion(u, p, c)
        else:
            mom = _open_momentum(u, p, c)
            _, q = dressed_dispersion(u, p.replace(phi=0.0), c)
        moms.append(float(np.real(mom)) % (2 * math.pi))
        for r, val in q.items():
            charges[r] = charges.get(r, 0.0) + val
    return BetheSolution(rapidities=list(us), momenta=moms, charges=charges,
                         residual=float(residual), boundary=boundary,
                         mode_numbers=list(modes))


def solve_bethe_closed(L, M, p, couplings=None, mode_numbers=None, us0=None,
                       tol=1e-10, max_iter=40):
    """Newton solution of the closed-chain Bethe equations in log form.

    ``mode_numbers`` selects the branch (one integer per root; repeated
    entries seed bound-state strings).  ``us0`` warm-starts continuation.
    """
    if mode_numbers is None or len(mode_numbers) != M:
        raise ValueError("need %d mode numbers" % M)
    if 2 * M > L:
        raise ValueError("sector convention requires M <= L/2")
    c = couplings or LongRangeCouplings()
    modes = list(mode_numbers)
    if us0 is None:
        pp = c.model(p)
        us0 = _grouped_seeds(
            modes, lambda n: rapidity_from_momentum(pp, 2 * math.pi * n / L))
    hb = p.hbar + c.dhbar
    log_f = lambda v: _closed_F(v, L, p, c, modes)
    try:
        us, res = _newton(log_f, us0, tol, max_iter, branch=True)
        _check_distinct(us, hb)
    except BetheError:
        us, _ = _newton(lambda v: _closed_poly_F(v, L, p, c), us0,
                        1e-11, max_iter)
        _check_distinct(us, hb)
        # polish on the log form; near a genuine root it is smooth again
        us, res = _newton(log_f, us, tol, max_iter, branch=True)
        _check_distinct(us, hb)
    return _package(_fold(us, hb), p, c, modes, "closed", res)


def _canonical_sign(u):
    if np.real(u) < -1e-12 or (abs(np.real(u)) <= 1e-12 and np.imag(u) < 0):
        return -u
    return u


def _mod2pi(f):
    return np.abs(f - 2 * math.pi * np.round(np.real(f) / (2 * math.pi)))


def solve_bethe_open(L, M, p, bp, couplings=None, mode_numbers=None, us0=None,
                     tol=1e-10, max_iter=40):
    """Newton solution of the open-chain Bethe equations in log form.

    Root signs are canonicalized to Re u >= 0 (ties by Im u >= 0); the
    residual is recomputed modulo 2 pi after the flip.
    """
    if mode_numbers is None or len(mode_numbers) != M:
        raise ValueError("need %d mode numbers" % M)
    if 2 * M > L:
        raise ValueError("sector convention requires M <= L/2")
    c = couplings or LongRangeCouplings()
    modes = list(mode_numbers)
    if us0 is None:
        pp = c.model(p).replace(phi=0.0)
        us0 = _grouped_seeds(
            modes, lambda n: rapidity_from_momentum(pp, math.pi * n / (L + 1)))
    hb = p.hbar + c.dhbar
    log_f = lambda v: _open_F(v, L, p, c, bp, modes)
    try:
        us, _ = _newton(log_f, us0, tol, max_iter, branch=True)
        _check_distinct(us, hb)
    except BetheError:
        us, _ = _newton(lambda v: _open_poly_F(v, L, p, c, bp), us0,
                        1e-11, max_iter)
        _check_distinct(us, hb)
        us, _ = _newton(log_f, us, tol, max_iter, branch=True)
        _check_distinct(us, hb)
    us = np.array([_canonical_sign(_fold(u, hb)) for u in us])
    _check_distinct(us, hb)
    res = _mod2pi(_open_F(us, L, p, c, bp, modes)).max()
    if res > tol:
        raise BetheError("canonical form violates the equations: %.3e" % res)
    return _package(us, p, c, modes, "open", res)


def _solution_key(sol):
    q3 = sol.charges.get(3, 0.0)
    return (round(float(np.real(sol.energy)), 7),
            round(float(np.imag(sol.energy)), 7),
            round(float(np.real(q3)), 7), round(float(np.imag(q3)), 7))


def _scale_couplings(c, t):
    if t == 1.0:
        return c
    return LongRangeCouplings(
        alpha={k: t * v for k, v in c.alpha.items()},
        beta={k: t * v for k, v in c.beta.items()},
        eta={k: t * v for k, v in c.eta.items()},
        delta={k: t * v for k, v in c.delta.items()},
        dphi=t * c.dphi, dhbar=t * c.dhbar,
        dxi_minus=t * c.dxi_minus, dxi_plus=t * c.dxi_plus, r_max=c.r_max)


_XX_HBAR = math.pi / 2
_DETOURS = (0.0, 0.16 + 0.09j, -0.12 + 0.15j)


def _hbar_path(p, t, detour=0.0):
    """hbar interpolated from the free-fermion point to the target.

    At hbar = pi/2 the scattering factor is identically -1, so every sector
    state is labeled by distinct free modes; walking t to 1 tracks each state
    to the target anisotropy through generic complex values, where bound
    states form on their own.  A nonzero detour bows the path sideways to
    dodge collision points.
    """
    hb = (1 - t) * _XX_HBAR + t * complex(p.hbar) + detour * math.sin(
        math.pi * t)
    return p.replace(hbar=hb)


def _walk(step_fn, us, steps):
    """Adaptive homotopy walk of t from 0 to 1 with halving on failure."""
    t, h = 0.0, 1.0 / steps
    while t < 1.0 - 1e-12:
        h = min(h, 1.0 - t)
        try:
            trial = step_fn(t + h, us)
        except BetheError:
            h /= 2
            if h < 1e-3:
                raise
            continue
        t, us = t + h, trial
        h = min(2 * h, 1.0 / steps)
    return us


def closed_sector_sweep(L, M, p, couplings=None, tol=1e-10, steps=16):
    """All closed sector states via free-fermion continuation.

    Each state is seeded exactly at hbar = pi/2 from a distinct mode subset
    (momenta (2 pi n + pi (M-1))/L), then continued jointly in hbar and the
    couplings on the pole-free product form, and finally polished on the log
    form at the target point.
    """
    import itertools
    c = couplings or LongRangeCouplings()
    found = {}
    for subset in itertools.combinations(range(L), M):
        for detour in _DETOURS:
            try:
                sol = _continued_closed(L, M, p, c, subset, tol, steps,
                                        detour)
            except BetheError:
                continue
            found.setdefault(_solution_key(sol), sol)
            break
    return list(found.values())


def _continued_closed(L, M, p, c, subset, tol, steps, detour=0.0):
    if M == 1 and not (c.alpha or c.beta or c.eta):
        # single magnon: no scattering, the log form converges directly
        pp = c.model(p)
        us0 = [rapidity_from_momentum(pp, 2 * math.pi * subset[0] / L)]
        return solve_bethe_closed(L, M, p, couplings=c,
                                  mode_numbers=list(subset), us0=us0, tol=tol)
    xxp = _hbar_path(p, 0.0)
    us = []
    for n in subset:
        mom = (2 * math.pi * n + math.pi * (M - 1)) / L
        try:
            us.append(rapidity_from_momentum(xxp, mom))
        except BetheError:
            us.append(rapidity_from_momentum(xxp, mom + 1e-6))
    us = np.array(us, complex)

    def step(t, v):
        pt, ct = _hbar_path(p, t, detour), _scale_couplings(c, t)
        hb = pt.hbar + ct.dhbar
        out, _ = _newton(lambda w: _closed_poly_F(w, L, pt, ct), v, 1e-10, 25)
        _check_distinct(out, hb)
        return _fold(out, hb)

    us = _walk(step, us, steps)
    return solve_bethe_closed(L, M, p, couplings=c,
                              mode_numbers=list(subset), us0=us, tol=tol)


def open_sector_sweep(L, M, p, bp, couplings=None, tol=1e-10, steps=16):
    """All open sector states via free-fermion continuation.

    At hbar = pi/2 the bulk factors S(u-v) S(u+v) cancel, so the equations
    decouple into L one-particle reflection problems; subsets of those roots
    seed the continuation.
    """
    import itertools
    c = couplings or LongRangeCouplings()
    singles = _xx_open_levels(L, p, bp)
    found = {}
    for subset in itertools.combinations(range(len(singles)), M):
        for detour in _DETOURS:

            def step(t, v):
                pt, ct = _hbar_path(p, t, detour), _scale_couplings(c, t)
                hb = pt.hbar + ct.dhbar
                out, _ = _newton(lambda w: _open_poly_F(w, L, pt, ct, bp), v,
                                 1e-10, 25)
                _check_distinct(out, hb)
                return _fold(out, hb)

            try:
                us = _walk(step,
                           np.array([singles[i] for i in subset], complex),
                           steps)
                sol = solve_bethe_open(L, M, p, bp, couplings=c,
                                       mode_numbers=list(subset), us0=us,
                                       tol=tol)
            except BetheError:
                continue
            found.setdefault(_solution_key(sol), sol)
            break
    return list(found.values())


def _xx_open_levels(L, p, bp):
    """The L one-particle roots of the open chain at the free-fermion point."""
    xxp = _hbar_path(p, 0.0).replace(phi=0.0)
    c0 = LongRangeCouplings()
    roots = {}
    for n in range(1, 2 * L + 2):
        try:
            seed = rapidity_from_momentum(xxp, math.pi * n / (L + 1))
            us, _ = _newton(lambda v: _open_poly_F(v, L, xxp, c0, bp),
                            np.array([seed], complex), 1e-10, 25)
        except BetheError:
            continue
        u = _canonical_sign(us[0])
        mom = _open_momentum(u, xxp, c0)
        key = (round(float(np.real(mom)) % (2 * math.pi), 7),
               round(float(np.imag(mom)), 7))
        roots.setdefault(key, u)
        if len(roots) == L:
            break
    if len(roots) < L:
        raise BetheError("found %d of %d one-particle levels" %
                         (len(roots), L))
    return list(roots.values())


def continue_in_lambda(solve, lam, step=1e-2, min_step=1e-5):
    """Continue a Bethe solution from lambda = 0 to lam.

    ``solve(lam_value, us0)`` must return a BetheSolution; the step halves
    on solver failure and the last roots warm-start each move.
    """
    sol = solve(0.0, None)
    cur, us = 0.0, sol.rapidities
    while abs(lam - cur) > 1e-15:
        h = math.copysign(min(step, abs(lam - cur)), lam - cur)
        while True:
            try:
                trial = solve(cur + h, us)
                break
            except BetheError:
                h /= 2
                if abs(h) < min_step:
                    raise
        cur, us, sol = cur + h, trial.rapidities, trial
    return sol


# ---------------------------------------------------------------------------
# dense oracles

def closed_sector_matrix(p, L, M, extra=None, lam=0.0):
    """Sector matrix of Q2 (+ lam * extra kernel) on the closed chain."""
    mat = kernel_sector_matrix(q2_kernel(p), L, M, boundary="closed")
    if extra is not None and lam:
        mat = mat + lam * kernel_sector_matrix(extra, L, M, boundary="closed")
    return mat


def open_sector_matrix(op, L, M):
    """Sector matrix of an OpenKernel on the open chain of length L."""
    pins = [(LocalKernel({w: cf}), 1) for w, cf in op.left.terms.items()]
    pins += [(LocalKernel({w: cf}), L - len(w) + 1)
             for w, cf in op.right.terms.items()]
    return kernel_sector_matrix(op.bulk, L, M, boundary="open",
                                extra_pinned=pins)


def spectrum(mat):
    """Eigenvalues; Hermitian input uses the symmetric solver."""
    mat = np.asarray(mat)
    scale = max(1.0, np.abs(mat).max())
    if np.abs(mat - mat.conj().T).max() < 1e-12 * scale:
        return np.linalg.eigvalsh(mat).astype(complex)
    return np.sort_complex(np.linalg.eigvals(mat))


def perturbation_derivatives(h, d, gap_tol=1e-8):
    """(eigenvalues, dE/dlambda) of h under the direction d.

    Hellmann-Feynman per level; non-Hermitian h uses two-sided eigenvectors.
    Levels within gap_tol of a neighbor get None (degenerate-block mixing).
    """
    h = np.asarray(h)
    d = np.asarray(d)
    scale = max(1.0, np.abs(h).max())
    if np.abs(h - h.conj().T).max() < 1e-12 * scale:
        w, v = np.linalg.eigh(h)
        w = w.astype(complex)
        vl = vr = v
    else:
        import scipy.linalg
        w, vl, vr = scipy.linalg.eig(h, left=True, right=True)
        order = np.argsort(w)
        w, vl, vr = w[order], vl[:, order], vr[:, order]
    ders = []
    for i in range(len(w)):
        gap = min((abs(w[i] - w[j]) for j in range(len(w)) if j != i),
                  default=np.inf)
        if gap < gap_tol:
            ders.append(None)
            continue
        num = vl[:, i].conj() @ d @ vr[:, i]
        den = vl[:, i].conj() @ vr[:, i]
        ders.append(complex(num / den))
    return w, ders


def compare_spectra(bethe_energies, exact, tol=1e-8):
    """Greedy matching of Bethe energies against exact sector levels."""
    exact = list(exact)
    used = [False] * len(exact)
    pairs, devs, unmatched_bethe = [], [], []
    for be in bethe_energies:
        best, best_d = None, np.inf
        for i, ex in enumerate(exact):
            if used[i]:
                continue
            dd = abs(be - ex)
            if dd < best_d:
                best, best_d = i, dd
        if best is None or best_d > tol:
            unmatched_bethe.append(be)
            continue
        used[best] = True
        pairs.append((be, exact[best]))
        devs.append(best_d)
    unmatched_exact = [ex for i, ex in enumerate(exact) if not used[i]]
    return {
        "max_dev": max(devs) if devs else 0.0,
        "pairs": pairs,
        "unmatched_exact": unmatched_exact,
        "unmatched_bethe": unmatched_bethe,
        "ok": not unmatched_bethe and not unmatched_exact and
              (not devs or max(devs) <= tol),
    }
