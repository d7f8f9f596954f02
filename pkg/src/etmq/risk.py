"""Distribution-free risk interval for a fitted tube from outlier counts.

Given n labelled samples, of which s_star fall strictly outside the tube,
the confidence polynomial

    B(t) = C(n, s) t^(n-s)
         - beta/(2n) * sum_{i=s}^{n-1} C(i, s) t^(i-s)
         - beta/(6n) * sum_{i=n+1}^{4n} C(i, s) t^(i-s)

is negative near 0 and near 1 and positive on at most one middle interval
(dividing by the leading term leaves 1 minus a positive sum of convex
powers).  Its two roots t_lo < t_hi in (0, 1) bound the probability mass
outside the tube: with confidence 1 - beta the violation probability lies in
[1 - t_hi, 1 - t_lo].

Everything is evaluated in log space after normalising by the leading term,
so the astronomically large binomial coefficients never materialise: the
sign of B(t) is the sign of -L(t) where L is a log-sum-exp of the
normalised negative terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

GRID_MIN = 1e-6
GRID_EDGE = 1e-9
BISECT_TOL = 1e-12
MIN_GRID_POINTS = 10_000


class RiskBoundsError(ValueError):
    """Invalid inputs, or no confidence interval exists for them."""


@dataclass(frozen=True)
class RiskBounds:
    sample_count: int
    outliers: int
    beta: float
    eps_lo: float
    eps_hi: float


def _log_terms(sample_count: int, outliers: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Log-coefficients and exponents of the normalised negative terms.

    Each term is exp(log_coef + exponent * log t); the normalisation divides
    by the leading binomial, so log-coefficients stay moderate.
    """
    n, s = sample_count, outliers
    lead = gammaln(n + 1) - gammaln(s + 1) - gammaln(n - s + 1)

    i1 = np.arange(s, n)
    i2 = np.arange(n + 1, 4 * n + 1)
    i_all = np.concatenate([i1, i2])
    log_binom = gammaln(i_all + 1) - gammaln(s + 1) - gammaln(i_all - s + 1)
    log_coef = log_binom - lead
    log_coef[: i1.size] += np.log(beta / (2 * n))
    log_coef[i1.size:] += np.log(beta / (6 * n))
    exponents = (i_all - n).astype(float)
    return log_coef, exponents


def _scan_grid() -> np.ndarray:
    lo, hi = GRID_MIN, 1.0 - GRID_EDGE
    a = np.exp(np.linspace(np.log(lo), np.log(0.999), 4000))
    b = np.linspace(lo, hi, 4000)
    c = 1.0 - np.exp(np.linspace(np.log(GRID_EDGE), np.log(0.5), 4000))
    grid = np.unique(np.concatenate([a, b, c]))
    return np.clip(grid, lo, hi)


def _log_negative_sum(log_t: np.ndarray, log_coef: np.ndarray,
                      exponents: np.ndarray, chunk: int = 128) -> np.ndarray:
    """L(t) = log of the normalised negative part, vectorised over log t."""
    log_t = np.atleast_1d(log_t)
    out = np.empty(log_t.size)
    for start in range(0, log_t.size, chunk):
        block = log_t[start:start + chunk, None]
        out[start:start + chunk] = logsumexp(log_coef[None, :] + exponents[None, :] * block, axis=1)
    return out


def _positive_span(grid: np.ndarray, log_coef: np.ndarray,
                   exponents: np.ndarray) -> tuple[int | None, int | None]:
    """Dense-grid indices of the first and last positive point.

    The positive region is a single interval (after normalising, the
    polynomial is 1 minus a sum of convex powers), so a strided pre-scan may
    locate it and only the two boundary slices need dense evaluation; the
    indices come out identical to scanning every point.  A full dense scan
    remains as the fallback when the pre-scan sees nothing.
    """
    def is_pos(idx):
        L = _log_negative_sum(np.log(grid[idx]), log_coef, exponents)
        return L < 0

    stride = 16
    coarse = np.arange(0, grid.size, stride)
    if coarse[-1] != grid.size - 1:
        coarse = np.append(coarse, grid.size - 1)
    pos = is_pos(coarse)
    if not pos.any():
        dense = is_pos(np.arange(grid.size))
        if not dense.any():
            return None, None
        return int(np.argmax(dense)), int(grid.size - 1 - np.argmax(dense[::-1]))

    c_first = int(np.argmax(pos))
    c_last = len(coarse) - 1 - int(np.argmax(pos[::-1]))
    lo = 0 if c_first == 0 else int(coarse[c_first - 1])
    head = np.arange(lo, int(coarse[c_first]) + 1)
    first = int(head[np.argmax(is_pos(head))])
    hi = grid.size - 1 if c_last == len(coarse) - 1 else int(coarse[c_last + 1])
    tail = np.arange(int(coarse[c_last]), hi + 1)
    tail_pos = is_pos(tail)
    last = int(tail[len(tail) - 1 - np.argmax(tail_pos[::-1])])
    return first, last


def _bisect_root(f, lo: float, hi: float, tol: float = BISECT_TOL) -> float:
    """Sign-change bisection on log t; widths shrink below tol in t as well."""
    f_lo = f(lo)
    u_lo, u_hi = np.log(lo), np.log(hi)
    while u_hi - u_lo > tol:
        mid = 0.5 * (u_lo + u_hi)
        if (f(np.exp(mid)) > 0) == (f_lo > 0):
            u_lo = mid
        else:
            u_hi = mid
    return float(np.exp(0.5 * (u_lo + u_hi)))


def epsilon_bounds(sample_count: int, outliers: int, beta: float) -> RiskBounds:
    """Two-sided violation-probability bounds at confidence 1 - beta.

    The degenerate all-outlier case returns the vacuous interval (0, 1).
    Raises if the polynomial never becomes positive, meaning no certificate
    exists at this confidence for these counts.
    """
    if sample_count < 1:
        raise RiskBoundsError(f"sample_count must be >= 1, got {sample_count}")
    if not 0 <= outliers <= sample_count:
        raise RiskBoundsError(
            f"outliers must lie in [0, {sample_count}], got {outliers}"
        )
    if not 0 < beta < 1:
        raise RiskBoundsError(f"beta must lie in (0, 1), got {beta}")
    if outliers == sample_count:
        return RiskBounds(sample_count, outliers, beta, 0.0, 1.0)

    log_coef, exponents = _log_terms(sample_count, outliers, beta)
    grid = _scan_grid()
    if grid.size < MIN_GRID_POINTS:
        raise RiskBoundsError("scan grid unexpectedly small")
    first, last = _positive_span(grid, log_coef, exponents)
    if first is None:
        raise RiskBoundsError(
            f"confidence polynomial never positive for n={sample_count}, "
            f"s*={outliers}, beta={beta}; no interval at this confidence"
        )

    def f(t: float) -> float:
        return -float(_log_negative_sum(np.log(t), log_coef, exponents)[0])

    if first == 0:
        # Positive already at the left scan edge: no usable lower root.
        eps_hi = 1.0
    else:
        eps_hi = 1.0 - _bisect_root(f, grid[first - 1], grid[first])
    if last == grid.size - 1:
        # Still positive as t -> 1 (e.g. zero outliers): no mass is provably
        # violated, so the lower bound is exactly zero.
        eps_lo = 0.0
    else:
        eps_lo = max(0.0, 1.0 - _bisect_root(f, grid[last], grid[last + 1]))
    return RiskBounds(sample_count, outliers, beta, eps_lo, eps_hi)
