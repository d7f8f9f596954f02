"""Kernel regression with a self-sizing insensitivity tube.

Fits f(x) = sum_j c_j k(x_j, x) + b by solving

    min over (c, b, kappa >= 0, xi >= 0):
        kappa + tau * c'Kc + rho * sum_i xi_i
    subject to |y_i - f(x_i)| <= kappa + xi_i

so the tube half-width kappa is chosen by the optimiser: rho prices points
left outside the tube, tau prices model roughness.  The dual is a box- and
simplex-constrained quadratic program solved here by pairwise coordinate
ascent on most-violating pairs, the classic working-set scheme:

    max  y'(ap - am) - 1/(4 tau) (ap - am)' K (ap - am)
    s.t. sum(ap) = sum(am), sum(ap + am) <= 1, 0 <= ap, am <= rho.

When the tube is open (kappa > 0) the budget constraint is tight, so phase
one pins sum(ap) = sum(am) = 1/2 and works pairs inside each sign group.
If the multiplier recovered for the budget comes out negative - the data
wants no tube at all - phase two re-solves with kappa fixed to zero, where
only the bias constraint sum(ap - am) = 0 remains and pairs move the net
weights beta_i = ap_i - am_i directly within [-rho, rho].
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

SOLVER_TOL = 1e-6
MAX_ITER = 1_000_000
_FULL_KERNEL_LIMIT = 3000
_REFRESH_EVERY = 50_000


class SvrError(ValueError):
    """Invalid fit inputs or a malformed persisted model."""


class SvrConvergenceError(RuntimeError):
    """Iteration cap hit; carries the best iterate found so far."""

    def __init__(self, message: str, fit: "SvrFit"):
        super().__init__(message)
        self.fit = fit


@dataclass
class SvrModel:
    """Support-vector expansion of the fitted regressor."""

    support_states: np.ndarray
    coefficients: np.ndarray
    bias: float
    tube: float
    bandwidth: float
    rho: float
    tau: float

    def __post_init__(self) -> None:
        if self.support_states.ndim != 2:
            raise SvrError("support_states must be 2-d")
        if self.coefficients.shape != (self.support_states.shape[0],):
            raise SvrError("one coefficient per support state required")
        if self.tube < 0:
            raise SvrError(f"tube must be >= 0, got {self.tube}")
        if self.bandwidth <= 0:
            raise SvrError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass
class SvrFit:
    model: SvrModel
    iterations: int
    kkt_gap: float
    converged: bool


def default_bandwidth(states: np.ndarray) -> float:
    """Scale-style kernel width: 1 / (dim * variance of all components)."""
    var = float(np.asarray(states, dtype=float).var())
    dim = states.shape[1]
    if var <= 0:
        return 1.0 / dim
    return 1.0 / (dim * var)


class _Kernel:
    """RBF rows against the training set, fully cached when small."""

    def __init__(self, points: np.ndarray, bandwidth: float, max_rows: int = 1024):
        self.x = np.asarray(points, dtype=float)
        self.bw = bandwidth
        self.sq = np.einsum("ij,ij->i", self.x, self.x)
        self.n = self.x.shape[0]
        self.full = None
        if self.n <= _FULL_KERNEL_LIMIT:
            d2 = self.sq[:, None] + self.sq[None, :] - 2.0 * (self.x @ self.x.T)
            self.full = np.exp(-bandwidth * np.maximum(d2, 0.0))
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self._max_rows = max_rows

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        cached = self._rows.get(i)
        if cached is not None:
            self._rows.move_to_end(i)
            return cached
        d2 = self.sq + self.sq[i] - 2.0 * (self.x @ self.x[i])
        r = np.exp(-self.bw * np.maximum(d2, 0.0))
        self._rows[i] = r
        if len(self._rows) > self._max_rows:
            self._rows.popitem(last=False)
        return r

    def apply(self, beta: np.ndarray) -> np.ndarray:
        """K @ beta, using only the nonzero entries of beta."""
        if self.full is not None:
            return self.full @ beta
        out = np.zeros(self.n)
        support = np.flatnonzero(beta)
        for start in range(0, support.size, 512):
            cols = support[start:start + 512]
            d2 = self.sq[:, None] + self.sq[cols][None, :] - 2.0 * (self.x @ self.x[cols].T)
            out += np.exp(-self.bw * np.maximum(d2, 0.0)) @ beta[cols]
        return out


def _pinned_value(g: np.ndarray, at_floor: np.ndarray, interior: np.ndarray,
                  at_cap: np.ndarray) -> float:
    """Multiplier consistent with box positions: floor rows bound it from
    below, cap rows from above, interior rows pin it exactly."""
    if interior.any():
        return float(g[interior].mean())
    lo = float(g[at_floor].max()) if at_floor.any() else -np.inf
    hi = float(g[at_cap].min()) if at_cap.any() else np.inf
    if np.isinf(lo):
        return hi
    if np.isinf(hi):
        return lo
    return 0.5 * (lo + hi)


class _DualSolver:
    def __init__(self, kernel: _Kernel, y: np.ndarray, rho: float, tau: float,
                 tol: float, max_iter: int):
        self.k = kernel
        self.y = y
        self.rho = rho
        self.tau = tau
        self.tol = tol
        self.max_iter = max_iter
        self.n = y.size
        self.iterations = 0

    def _step_pair(self, i: int, j: int, gain: float, inc_room: float,
                   dec_room: float) -> float:
        """Optimal clipped step for moving weight from slot j to slot i."""
        ki, kj = self.k.row(i), self.k.row(j)
        eta = ki[i] + kj[j] - 2.0 * ki[j]
        limit = min(inc_room, dec_room)
        if eta > 0:
            t = min(limit, 2.0 * self.tau * gain / eta)
        else:
            t = limit
        self._delta = t * (ki - kj) / (2.0 * self.tau)
        return t

    def _maybe_refresh(self, beta: np.ndarray, f: np.ndarray) -> np.ndarray:
        if self.iterations % _REFRESH_EVERY == 0:
            return self.k.apply(beta) / (2.0 * self.tau)
        return f

    def solve_budget_pinned(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """Phase one: sum(ap) = sum(am) = 1/2.

        Returns (ap, am, f, gap).  Raises if the budget cannot be filled,
        which the caller treats as a direct hand-off to phase two.
        """
        n, rho = self.n, self.rho
        if n * rho < 0.5:
            raise SvrError("budget infeasible")
        ap = np.zeros(n)
        am = np.zeros(n)
        remaining = 0.5
        for i in range(n):
            ap[i] = am[i] = min(rho, remaining)
            remaining -= ap[i]
            if remaining <= 0:
                break
        beta = ap - am
        f = self.k.apply(beta) / (2.0 * self.tau)
        g = self.y - f

        while True:
            up_p = np.where(ap < rho, g, -np.inf)
            dn_p = np.where(ap > 0, g, np.inf)
            i_p, j_p = int(up_p.argmax()), int(dn_p.argmin())
            viol_p = up_p[i_p] - dn_p[j_p]

            # The minus group ascends along -g, so its violating pair flips.
            up_m = np.where(am < rho, -g, -np.inf)
            dn_m = np.where(am > 0, -g, np.inf)
            i_m, j_m = int(up_m.argmax()), int(dn_m.argmin())
            viol_m = up_m[i_m] - dn_m[j_m]

            gap = max(viol_p, viol_m)
            if gap <= self.tol:
                return ap, am, f, float(max(gap, 0.0))
            if self.iterations >= self.max_iter:
                self._bail(ap - am, f, float(gap))
            self.iterations += 1

            if viol_p >= viol_m:
                i, j = i_p, j_p
                t = self._step_pair(i, j, viol_p, rho - ap[i], ap[j])
                ap[i] = rho if t == rho - ap[i] else ap[i] + t
                ap[j] = 0.0 if t == ap[j] else ap[j] - t
                f += self._delta
            else:
                i, j = i_m, j_m
                t = self._step_pair(i, j, viol_m, rho - am[i], am[j])
                am[i] = rho if t == rho - am[i] else am[i] + t
                am[j] = 0.0 if t == am[j] else am[j] - t
                f -= self._delta
            beta = ap - am
            f = self._maybe_refresh(beta, f)
            g = self.y - f

    def solve_zero_tube(self, beta0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
        """Phase two: kappa = 0, net weights beta in [-rho, rho], sum zero."""
        n, rho = self.n, self.rho
        beta = np.zeros(n) if beta0 is None else beta0.copy()
        f = self.k.apply(beta) / (2.0 * self.tau)
        g = self.y - f

        while True:
            up = np.where(beta < rho, g, -np.inf)
            dn = np.where(beta > -rho, g, np.inf)
            i, j = int(up.argmax()), int(dn.argmin())
            gap = up[i] - dn[j]
            if gap <= self.tol:
                return beta, f, float(max(gap, 0.0))
            if self.iterations >= self.max_iter:
                self._bail(beta, f, float(gap))
            self.iterations += 1

            t = self._step_pair(i, j, gap, rho - beta[i], beta[j] + rho)
            beta[i] = rho if t == rho - beta[i] else beta[i] + t
            beta[j] = -rho if t == beta[j] + rho else beta[j] - t
            f += self._delta
            f = self._maybe_refresh(beta, f)
            g = self.y - f

    def _bail(self, beta: np.ndarray, f: np.ndarray, gap: float):
        raise _Unconverged(beta, f, gap)


class _Unconverged(Exception):
    def __init__(self, beta: np.ndarray, f: np.ndarray, gap: float):
        self.beta = beta
        self.f = f
        self.gap = gap


def fit_svr(states: np.ndarray, targets: np.ndarray, rho: float, tau: float,
            bandwidth: float | None = None, tol: float = SOLVER_TOL,
            max_iter: int = MAX_ITER) -> SvrFit:
    """Fit the tube regressor on integer state vectors and scalar targets."""
    x = np.asarray(states, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise SvrError("need states of shape (n, d) and matching targets")
    if x.shape[0] < 2:
        raise SvrError("at least two samples required")
    if rho <= 0 or tau <= 0:
        raise SvrError(f"rho and tau must be positive, got rho={rho}, tau={tau}")
    if bandwidth is None:
        bandwidth = default_bandwidth(x)
    if bandwidth <= 0:
        raise SvrError(f"bandwidth must be positive, got {bandwidth}")

    kernel = _Kernel(x, bandwidth)
    solver = _DualSolver(kernel, y, rho, tau, tol, max_iter)
    n = y.size

    try:
        beta, f, gap, kappa, bias = _solve_both_phases(solver, kernel, y, rho, tau)
        converged = True
    except _Unconverged as stop:
        beta, f, gap = stop.beta, stop.f, stop.gap
        g = y - f
        interior = (beta > -rho) & (beta < rho)
        bias = _pinned_value(g, beta == -rho, interior, beta == rho)
        kappa = 0.0
        converged = False

    model = _extract_model(x, beta, bias, kappa, bandwidth, rho, tau)
    fit = SvrFit(model=model, iterations=solver.iterations, kkt_gap=gap, converged=converged)
    if not converged:
        raise SvrConvergenceError(
            f"no convergence within {max_iter} pair updates (gap {gap:.3e})", fit
        )
    return fit


def _solve_both_phases(solver: _DualSolver, kernel: _Kernel, y: np.ndarray,
                       rho: float, tau: float):
    n = y.size
    if n * rho >= 0.5:
        ap, am, f, gap = solver.solve_budget_pinned()
        beta = ap - am
        f = kernel.apply(beta) / (2.0 * tau)
        g = y - f
        r_up = _pinned_value(g, ap == 0, (ap > 0) & (ap < rho), ap == rho)
        # For the minus group the roles of the box ends are mirrored.
        r_dn = _pinned_value(g, am == rho, (am > 0) & (am < rho), am == 0)
        kappa = 0.5 * (r_up - r_dn)
        bias = 0.5 * (r_up + r_dn)
        if kappa >= -solver.tol:
            return beta, f, gap, max(kappa, 0.0), bias
        warm = beta
    else:
        # Even a zero-width tube cannot absorb the budget; the tube term is
        # inactive from the start.
        warm = None

    beta, f, gap = solver.solve_zero_tube(warm)
    f = kernel.apply(beta) / (2.0 * tau)
    g = y - f
    # With no tube every weight strictly inside the box pins the residual to
    # zero, so exact zeros count as interior here.
    interior = (beta > -rho) & (beta < rho)
    bias = _pinned_value(g, beta == -rho, interior, beta == rho)
    return beta, f, gap, 0.0, bias


def _extract_model(x: np.ndarray, beta: np.ndarray, bias: float, kappa: float,
                   bandwidth: float, rho: float, tau: float) -> SvrModel:
    support = np.flatnonzero(beta)
    coef = beta[support] / (2.0 * tau)
    return SvrModel(
        support_states=np.asarray(np.rint(x[support]), dtype=np.int64),
        coefficients=coef,
        bias=float(bias),
        tube=float(kappa),
        bandwidth=float(bandwidth),
        rho=float(rho),
        tau=float(tau),
    )


def predict(model: SvrModel, states: np.ndarray) -> np.ndarray:
    """Evaluate the fitted regressor on one or many state vectors."""
    q = np.atleast_2d(np.asarray(states, dtype=float))
    sv = model.support_states.astype(float)
    if q.shape[1] != sv.shape[1]:
        raise SvrError(f"query dimension {q.shape[1]} != model dimension {sv.shape[1]}")
    if sv.shape[0] == 0:
        return np.full(q.shape[0], model.bias)
    d2 = (
        np.einsum("ij,ij->i", q, q)[:, None]
        + np.einsum("ij,ij->i", sv, sv)[None, :]
        - 2.0 * (q @ sv.T)
    )
    k = np.exp(-model.bandwidth * np.maximum(d2, 0.0))
    return k @ model.coefficients + model.bias


def predict_one(model: SvrModel, state) -> float:
    return float(predict(model, np.asarray(state)[None, :])[0])


def count_outliers(model: SvrModel, states: np.ndarray, targets: np.ndarray) -> int:
    """Samples strictly outside the tube; the risk bounds consume this."""
    residuals = np.abs(np.asarray(targets, dtype=float) - predict(model, states))
    return int(np.sum(residuals > model.tube))


def primal_objective(model: SvrModel, states: np.ndarray, targets: np.ndarray) -> float:
    """kappa + tau c'Kc + rho * hinge losses, evaluated on training data."""
    sv = model.support_states.astype(float)
    c = model.coefficients
    if sv.shape[0]:
        d2 = (
            np.einsum("ij,ij->i", sv, sv)[:, None]
            + np.einsum("ij,ij->i", sv, sv)[None, :]
            - 2.0 * (sv @ sv.T)
        )
        smooth = model.tau * float(c @ (np.exp(-model.bandwidth * np.maximum(d2, 0.0)) @ c))
    else:
        smooth = 0.0
    residuals = np.abs(np.asarray(targets, dtype=float) - predict(model, states))
    hinge = np.maximum(residuals - model.tube, 0.0).sum()
    return model.tube + smooth + model.rho * float(hinge)


# -- persistence -----------------------------------------------------------

def save_svr_model(model: SvrModel, path) -> None:
    doc = {
        "kernel": "rbf",
        "bandwidth": model.bandwidth,
        "rho": model.rho,
        "tau": model.tau,
        "tube": model.tube,
        "bias": model.bias,
        "support_states": [[int(v) for v in row] for row in model.support_states],
        "coefficients": [float(f"{v:.17g}") for v in model.coefficients],
    }
    with open(str(path), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_svr_model(path) -> SvrModel:
    with open(str(path)) as fh:
        doc = json.load(fh)
    if doc.get("kernel") != "rbf":
        raise SvrError(f"unsupported kernel {doc.get('kernel')!r}")
    try:
        return SvrModel(
            support_states=np.asarray(doc["support_states"], dtype=np.int64).reshape(
                len(doc["support_states"]), -1
            ),
            coefficients=np.asarray(doc["coefficients"], dtype=float),
            bias=float(doc["bias"]),
            tube=float(doc["tube"]),
            bandwidth=float(doc["bandwidth"]),
            rho=float(doc["rho"]),
            tau=float(doc["tau"]),
        )
    except KeyError as missing:
        raise SvrError(f"model file missing field {missing}") from None
