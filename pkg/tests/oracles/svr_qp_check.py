"""Convex-programming oracle for the tube regression fits.

Solves each frozen corpus instance as an explicit QP over (c, b, kappa, xi):

    minimize    kappa + tau * c' K c + rho * sum(xi)
    subject to  |y - K c - b| <= kappa + xi,   xi >= 0,   kappa >= 0

with K the RBF Gram matrix, and prints the optimal objective values that
test_svr.py pins.  The corpus lives here so the tests and this script can
never drift apart; cvxpy is only imported when the script actually runs.
Rerun after any kernel or objective change:

    python3 tests/oracles/svr_qp_check.py
"""

import numpy as np

RNG_SEED = 74125


def rbf_gram(states: np.ndarray, bandwidth: float) -> np.ndarray:
    x = np.asarray(states, dtype=float)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    gram = np.exp(-bandwidth * np.maximum(d2, 0.0))
    return 0.5 * (gram + gram.T)


def corpus():
    """Deterministic fit instances, each at most 20 samples.

    Returns a list of dicts with keys name/states/targets/rho/tau/bandwidth.
    Bandwidths are always explicit so the oracle never has to reproduce the
    library's default-width rule.
    """
    rng = np.random.default_rng(RNG_SEED)
    instances = []

    def add(name, states, targets, rho, tau, bandwidth):
        states = np.asarray(states, dtype=np.int64)
        targets = np.asarray(targets, dtype=float)
        assert states.shape[0] <= 20, name
        instances.append({
            "name": name, "states": states, "targets": targets,
            "rho": rho, "tau": tau, "bandwidth": bandwidth,
        })

    # Everyday regime: n*rho = 1.0, tube competes with the hinge losses.
    x = rng.integers(0, 5, size=(20, 6))
    add("mixed20", x, rng.integers(0, 5, size=20), 0.05, 50.0, 0.05)

    # Expensive outliers and a stiff smoothness penalty.
    x = rng.integers(0, 5, size=(20, 6))
    add("stiff", x, rng.integers(0, 5, size=20), 0.8, 100.0, 0.02)

    # n*rho = 0.4 < 1/2: the tube term can never pay for itself.
    x = rng.integers(0, 5, size=(5, 6))
    add("under-budget", x, rng.integers(0, 5, size=5), 0.08, 10.0, 0.1)

    # Smallest legal fit.
    add("pair", [[0, 0, 0, 0, 0, 0], [4, 4, 4, 4, 4, 4]], [0.0, 4.0],
        0.3, 0.5, 0.05)

    # Repeated inputs with conflicting labels make the Gram matrix singular
    # and force slack on at least one copy of each pair.
    base = rng.integers(0, 5, size=(6, 6))
    x = np.repeat(base, 2, axis=0)
    t = rng.integers(0, 3, size=6).astype(float)
    targets = np.empty(12)
    targets[0::2] = t
    targets[1::2] = np.minimum(t + 2.0, 4.0)
    add("duplicates", x, targets, 0.4, 10.0, 0.07)

    # Constant labels: the zero function inside a zero-width tube is free.
    x = rng.integers(0, 5, size=(20, 6))
    add("constant", x, np.full(20, 2.0), 0.1, 50.0, 0.05)

    # Wide kernel, Gram matrix close to the identity.
    x = rng.integers(0, 5, size=(15, 6))
    add("coarse-kernel", x, rng.integers(0, 5, size=15), 0.2, 5.0, 1.0)

    # Cheap smoothness: the fit is pushed towards interpolation.
    x = rng.integers(0, 5, size=(18, 6))
    add("low-smooth", x, rng.integers(0, 5, size=18), 1.0, 0.2, 0.05)

    return instances


def solve_qp(states, targets, rho, tau, bandwidth):
    """Optimal primal objective (and tube width) via cvxpy."""
    import cvxpy as cp

    y = np.asarray(targets, dtype=float)
    n = y.size
    gram = rbf_gram(states, bandwidth)
    c = cp.Variable(n)
    b = cp.Variable()
    kappa = cp.Variable(nonneg=True)
    xi = cp.Variable(n, nonneg=True)
    resid = y - gram @ c - b
    objective = cp.Minimize(
        kappa + tau * cp.quad_form(c, cp.psd_wrap(gram)) + rho * cp.sum(xi))
    problem = cp.Problem(objective, [resid <= kappa + xi, -resid <= kappa + xi])
    value = problem.solve(solver=cp.CLARABEL)
    if problem.status != "optimal":
        raise RuntimeError(f"solver returned status {problem.status}")
    return float(value), float(kappa.value)


def main():
    print(f"{'name':<14} {'n':>3} {'rho':>5} {'tau':>6} {'bw':>5} "
          f"{'optimum':>18} {'kappa*':>12}")
    for inst in corpus():
        value, kappa = solve_qp(inst["states"], inst["targets"],
                                inst["rho"], inst["tau"], inst["bandwidth"])
        print(f"{inst['name']:<14} {inst['targets'].size:>3} "
              f"{inst['rho']:>5g} {inst['tau']:>6g} {inst['bandwidth']:>5g} "
              f"{value:>18.12f} {kappa:>12.6g}")


if __name__ == "__main__":
    main()
