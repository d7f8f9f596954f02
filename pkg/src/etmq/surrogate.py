"""Robustness radius of the greedy policy, and sampled training sets of it.

The radius of a state x under tolerance alpha is the largest sup-norm
distance d such that the joint action the table picks at x stays within
alpha of optimal at every state in the d-ball around x.  It is computed by
expanding exact-distance shells outward until the first shell containing a
violating state; if no shell up to the arena diameter violates, the radius
is the diameter itself.

Absorbing states carry all-zero table rows, so they can never violate the
condition and need no special handling inside the ball; asking for the
radius *of* an absorbing state is an error because no action choice matters
there.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .env import STATE_DIM, PursuitEnv
from .planner import PolicyTable, QTable, greedy_policy

SAMPLE_CSV_HEADER = ("x1", "x2", "x3", "x4", "x5", "x6", "gamma", "alpha")


class SurrogateError(ValueError):
    """Invalid radius query or sample request."""


def shell_indices(env: PursuitEnv, idx: int, d: int) -> np.ndarray:
    """Flat indices of all states at sup-norm distance exactly d from idx."""
    if d < 1:
        raise SurrogateError(f"shell distance must be >= 1, got {d}")
    w = env.width
    state = np.asarray(env.index_to_state(idx))
    ranges = [
        np.arange(max(0, c - d), min(w - 1, c + d) + 1) for c in state
    ]
    mesh = np.meshgrid(*ranges, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    on_shell = np.abs(coords - state).max(axis=1) == d
    coords = coords[on_shell]
    weights = w ** np.arange(STATE_DIM - 1, -1, -1)
    return coords @ weights


class RadiusCalculator:
    """Caches the value and policy views of a table for repeated queries."""

    def __init__(self, env: PursuitEnv, q: QTable, policy: PolicyTable | None = None):
        if q.n_states != env.n_states:
            raise SurrogateError("table does not match the environment size")
        self.env = env
        self.q = q.values
        self.v = q.values.max(axis=1)
        self.policy = (policy or greedy_policy(q)).joint_actions
        self.diameter = env.width - 1

    def radius(self, idx: int, alpha: float) -> int:
        """Largest safe deviation radius at a non-terminal state."""
        if alpha < 0:
            raise SurrogateError(f"alpha must be >= 0, got {alpha}")
        if not 0 <= idx < self.env.n_states:
            raise SurrogateError(f"state index {idx} out of range")
        if self.env.is_terminal_index(idx):
            raise SurrogateError("radius undefined at an absorbing state")
        a_star = self.policy[idx]
        floor = self.v - alpha
        for d in range(1, self.diameter + 1):
            shell = shell_indices(self.env, idx, d)
            if np.any(self.q[shell, a_star] < floor[shell]):
                return d - 1
        return self.diameter

    def label(self, indices: np.ndarray, alpha: float) -> np.ndarray:
        return np.array([self.radius(int(i), alpha) for i in indices], dtype=np.int64)


@dataclass
class SampleSet:
    """Labelled radii for a batch of states at one tolerance level.

    The ``gamma`` CSV column holds the radius label, not the discount; the
    column names are part of the file contract.
    """

    states: np.ndarray
    radii: np.ndarray
    alpha: float
    seed: int

    def __post_init__(self) -> None:
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise SurrogateError("states must have shape (n, 6)")
        if self.radii.shape != (self.states.shape[0],):
            raise SurrogateError("one radius per state required")

    def __len__(self) -> int:
        return self.states.shape[0]


def sample_radii(env: PursuitEnv, calc: RadiusCalculator, alpha: float,
                 count: int, seed: int) -> SampleSet:
    """Label ``count`` distinct non-terminal states drawn uniformly.

    Draws without replacement, so asking for more states than exist is an
    error rather than a silent truncation.  With ``count`` equal to the
    number of non-terminal states this is an exhaustive labelling in a
    shuffled order.
    """
    if count < 1:
        raise SurrogateError(f"sample count must be >= 1, got {count}")
    pool = env.nonterminal_indices()
    if count > pool.size:
        raise SurrogateError(
            f"requested {count} samples but only {pool.size} non-terminal states exist"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=count, replace=False)
    radii = calc.label(chosen, alpha)
    states = np.stack([env.index_to_state(int(i)) for i in chosen])
    return SampleSet(states=states, radii=radii, alpha=alpha, seed=seed)


def save_samples(samples: SampleSet, path) -> None:
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_CSV_HEADER)
        for row, radius in zip(samples.states, samples.radii):
            writer.writerow([*map(int, row), int(radius), repr(samples.alpha)])


def load_samples(path) -> SampleSet:
    with open(str(path), newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != SAMPLE_CSV_HEADER:
            raise SurrogateError(f"unexpected sample header {header!r}")
        states, radii, alphas = [], [], []
        for row in reader:
            if len(row) != len(SAMPLE_CSV_HEADER):
                raise SurrogateError(f"malformed sample row {row!r}")
            states.append([int(v) for v in row[:STATE_DIM]])
            radii.append(int(row[STATE_DIM]))
            alphas.append(float(row[STATE_DIM + 1]))
    if not states:
        raise SurrogateError(f"{path}: no sample rows")
    alpha = alphas[0]
    if any(a != alpha for a in alphas):
        raise SurrogateError("mixed alpha values in one sample file")
    return SampleSet(
        states=np.asarray(states, dtype=np.int64),
        radii=np.asarray(radii, dtype=np.int64),
        alpha=alpha,
        seed=-1,
    )
