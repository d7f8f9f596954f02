"""Exact-rational oracle for the confidence-polynomial bounds.

Evaluates the polynomial with Fractions (no floats anywhere) and bisects
its sign changes to a bracket of width 1e-13, printing reference values for
test_risk.py.  Slow by design; rerun only when the polynomial changes:

    python3 tests/oracles/risk_exact.py
"""

from fractions import Fraction
from math import comb

CASES = (
    (20, 3, Fraction(1, 1000)),
    (20, 12, Fraction(1, 1000)),
)


def poly(n, s, beta, t: Fraction) -> Fraction:
    total = comb(n, s) * t ** (n - s)
    total -= beta / (2 * n) * sum(comb(i, s) * t ** (i - s) for i in range(s, n))
    total -= beta / (6 * n) * sum(
        comb(i, s) * t ** (i - s) for i in range(n + 1, 4 * n + 1))
    return total


def bisect(n, s, beta, lo: Fraction, hi: Fraction) -> Fraction:
    sign_lo = poly(n, s, beta, lo) > 0
    while hi - lo > Fraction(1, 10 ** 13):
        mid = (lo + hi) / 2
        if (poly(n, s, beta, mid) > 0) == sign_lo:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def main():
    for n, s, beta in CASES:
        grid = [Fraction(j, 2000) for j in range(1, 2000)]
        signs = [poly(n, s, beta, t) > 0 for t in grid]
        if not any(signs):
            print(f"n={n} s={s}: never positive")
            continue
        first = signs.index(True)
        last = len(signs) - 1 - signs[::-1].index(True)
        t_lo = bisect(n, s, beta, grid[first - 1], grid[first]) if first else None
        at_one = poly(n, s, beta, Fraction(1)) > 0
        t_hi = None if at_one else bisect(n, s, beta, grid[last], grid[last + 1])
        eps_hi = float(1 - t_lo) if t_lo is not None else 1.0
        eps_lo = 0.0 if t_hi is None else float(1 - t_hi)
        print(f"n={n} s={s} beta={float(beta)}: "
              f"eps_lo={eps_lo:.13f} eps_hi={eps_hi:.13f} positive_at_t1={at_one}")


if __name__ == "__main__":
    main()
