import itertools
import numpy as np

from xxzdeform.model import ModelParams, BoundaryParams
from xxzdeform.bethe import (
    BetheError, nn_momentum, nn_charges, magnon_energy,
    rapidity_from_momentum, solve_bethe_closed, closed_sector_matrix,
    spectrum, compare_spectra,
)

P = ModelParams(hbar=0.37j, phi=0.21)

# dispersion identities
u = 0.7
h = 1e-6
dp = (nn_momentum(P, u + h) - nn_momentum(P, u - h)) / (2 * h)
print("dp/du + q2:", abs(dp + nn_charges(P, u, 2)[2]))
q = nn_charges(P, u, 5)
for r in (2, 3, 4):
    dq = (nn_charges(P, u + h, r)[r] - nn_charges(P, u - h, r)[r]) / (2 * h)
    print("q%d recursion:" % (r + 1), abs(dq / r - q[r + 1]))

# seed round trip
for mom in (0.3, 1.7, -2.2, 0.5 + 0.2j):
    us = rapidity_from_momentum(P, mom)
    print("p roundtrip", mom, abs(np.exp(1j * nn_momentum(P, us)) - np.exp(1j * mom)))

# q2(p) closed form
mom = nn_momentum(P, u)
print("q2(p) closed form:", abs(magnon_energy(P, mom) - q[2]))

# closed L=6 M=1
L, M = 6, 1
ed = spectrum(closed_sector_matrix(P, L, M))
print("ED(6,1):", np.sort_complex(ed))
es = []
for n in range(L):
    try:
        sol = solve_bethe_closed(L, M, P, mode_numbers=[n])
        es.append(sol.energy)
        print("n=%d  u=%s  E=%s  res=%.2e" % (n, sol.rapidities[0], sol.energy, sol.residual))
    except BetheError as e:
        print("n=%d FAILED: %s" % (n, e))
rep = compare_spectra(es, ed, tol=1e-8)
print("match(6,1):", rep["ok"], rep["max_dev"], "unmatched:", len(rep["unmatched_exact"]), len(rep["unmatched_bethe"]))

# closed L=6 M=2
M = 2
ed = spectrum(closed_sector_matrix(P, L, M))
sols = []
for n1 in range(L):
    for n2 in range(n1, L):
        try:
            sol = solve_bethe_closed(L, M, P, mode_numbers=[n1, n2])
        except (BetheError, ValueError) as e:
            print("modes (%d,%d) failed: %s" % (n1, n2, e))
            continue
        sols.append(((n1, n2), sol))
# dedupe by rounded root multiset
seen = {}
for modes, sol in sols:
    key = tuple(sorted((round(z.real, 7), round(z.imag, 7))
                       for z in np.array(sol.rapidities)))
    seen.setdefault(key, (modes, sol))
print("distinct solutions:", len(seen), "of", len(sols), "runs; ED levels:", len(ed))
es = [sol.energy for _, sol in seen.values()]
rep = compare_spectra(es, ed, tol=1e-8)
print("match(6,2):", rep["ok"], "max_dev", rep["max_dev"],
      "unmatched_ed", len(rep["unmatched_exact"]),
      "unmatched_bethe", len(rep["unmatched_bethe"]))
for ex in rep["unmatched_exact"]:
    print("  missing ED level:", ex)
