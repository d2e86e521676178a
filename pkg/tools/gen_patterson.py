"""Generate the embedded Gauss-Patterson node/weight tables.

Each level extends the previous rule by the n+1 zeros of the monic polynomial
that is orthogonal to all polynomials of degree <= n under the (sign-changing)
weight given by the previous rule's node polynomial.  Everything runs in
mpmath at high precision and is rounded to doubles at the very end.

Usage: python tools/gen_patterson.py > src/projfilter/_patterson_tables.py
"""

import sys

import mpmath as mp

mp.mp.dps = 450
MAX_LEVEL = 7


def moment(j):
    # integral of x**j over (-1, 1)
    return mp.mpf(0) if j % 2 else mp.mpf(2) / (j + 1)


def poly_from_roots(roots):
    coeffs = [mp.mpf(1)]  # ascending order
    for r in roots:
        new = [mp.mpf(0)] * (len(coeffs) + 1)
        for k, a in enumerate(coeffs):
            new[k + 1] += a
            new[k] -= r * a
        coeffs = new
    return coeffs


def extend(nodes):
    n = len(nodes)
    pi = poly_from_roots(nodes)
    # q(x) = x**(n+1) + sum_{j<=n} b_j x**j ; conditions int pi q x**k = 0, k = 0..n
    def pim(j):
        return mp.fsum(a * moment(j + s) for s, a in enumerate(pi))

    A = mp.matrix(n + 1, n + 1)
    rhs = mp.matrix(n + 1, 1)
    for k in range(n + 1):
        for j in range(n + 1):
            A[k, j] = pim(j + k)
        rhs[k] = -pim(n + 1 + k)
    b = mp.lu_solve(A, rhs)
    coeffs_desc = [mp.mpf(1)] + [b[j] for j in range(n, -1, -1)]
    new = mp.polyroots(coeffs_desc, maxsteps=2000, extraprec=2000)
    new = [mp.re(r) for r in new]
    return sorted(list(nodes) + new)


def weights_for(nodes):
    n = len(nodes)
    # interpolatory weights in the Legendre basis: sum_i w_i P_k(x_i) = int P_k
    V = mp.matrix(n, n)
    rhs = mp.matrix(n, 1)
    for k in range(n):
        for i, x in enumerate(nodes):
            V[k, i] = mp.legendre(k, x)
        rhs[k] = 2 if k == 0 else 0
    return list(mp.lu_solve(V, rhs))


def main():
    nodes = [mp.mpf(0)]
    levels = []
    for level in range(1, MAX_LEVEL + 1):
        if level > 1:
            nodes = extend(nodes)
        w = weights_for(nodes)
        levels.append(([float(x) for x in nodes], [float(v) for v in w]))
        print(f"level {level}: {len(nodes)} nodes", file=sys.stderr)

    out = sys.stdout
    out.write('"""Gauss-Patterson nodes and weights on (-1, 1), levels 1-7.\n\n')
    out.write("Generated by tools/gen_patterson.py; do not edit by hand.\n")
    out.write('"""\n\n')
    for name, idx in (("NODES", 0), ("WEIGHTS", 1)):
        out.write(f"{name} = (\n")
        for lev in levels:
            out.write("    (\n")
            for v in lev[idx]:
                out.write(f"        {v!r},\n")
            out.write("    ),\n")
        out.write(")\n")


if __name__ == "__main__":
    main()
