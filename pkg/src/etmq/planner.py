"""Joint-action planning for the pursuit game.

Two training routes produce the same artifact, a dense table of joint-action
values: exact value iteration over the enumerated model (the fast, checkable
route for small arenas) and tabular Q-learning driven by simulated episodes
(the model-free route that also scales to the full arena).  Ties in the
greedy policy always break toward the lowest joint-action index, so the
policy derived from a table is a pure function of the table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import N_ACTIONS, JointAction, PursuitEnv

MAGIC = b"ETMQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIId")

# Above this many table entries the dense dynamics arrays are not worth
# materialising and Q-learning falls back to stepping the environment.
_ENUMERATED_QL_LIMIT = 1_500_000

# Walkers advanced per tick by the enumerated Q-learning route.
_QL_BATCH = 512


class PlannerError(ValueError):
    """Invalid planner inputs or an environment we cannot plan over."""


class ConvergenceError(RuntimeError):
    """Sweep limit hit before the residual target; carries the best iterate."""

    def __init__(self, message: str, best: np.ndarray, residual: float):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ArtifactError(ValueError):
    """Persisted table failed validation on load."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for both training routes.

    ``mode`` selects the route.  The learning-rate exponent applies per
    state-action visit count as ``1 / (1 + n) ** lr_power``; exploration
    decays linearly from ``eps_start`` to ``eps_end`` over the episode
    budget.
    """

    mode: str = "value-iteration"
    vi_tol: float = 1e-8
    max_sweeps: int = 100_000
    episodes: int = 200_000
    lr_power: float = 0.6
    eps_start: float = 1.0
    eps_end: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("value-iteration", "q-learning"):
            raise PlannerError(f"unknown training mode {self.mode!r}")
        if self.vi_tol <= 0:
            raise PlannerError("vi_tol must be positive")
        if self.max_sweeps < 1:
            raise PlannerError("max_sweeps must be >= 1")
        if self.episodes < 0:
            raise PlannerError("episodes must be >= 0")
        if not 0 < self.lr_power <= 1:
            raise PlannerError("lr_power must lie in (0, 1]")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise PlannerError("need 0 <= eps_end <= eps_start <= 1")


@dataclass
class QTable:
    """Dense joint-action values, one row per flat state index."""

    values: np.ndarray
    gamma: float
    width: int
    n_agents: int

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise PlannerError("values must be a 2-d array")
        if not 0 < self.gamma < 1:
            raise PlannerError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_joint_actions(self) -> int:
        return self.values.shape[1]


@dataclass
class PolicyTable:
    """Greedy joint action per state, derived from a QTable."""

    joint_actions: np.ndarray
    n_agents: int

    def action_tuple(self, idx: int) -> JointAction:
        a = int(self.joint_actions[idx])
        out = []
        for _ in range(self.n_agents):
            a, r = divmod(a, N_ACTIONS)
            out.append(r)
        return tuple(reversed(out))


@dataclass
class TrainResult:
    table: QTable
    visits: np.ndarray | None = None
    sweeps: int = 0
    steps: int = 0
    residual: float = field(default=float("nan"))


def v_star(q: QTable, idx: int) -> float:
    """Best achievable value at a state (row maximum)."""
    if not 0 <= idx < q.n_states:
        raise PlannerError(f"state index {idx} out of range")
    return float(q.values[idx].max())


def pi_star(q: QTable, idx: int) -> JointAction:
    """Greedy joint action at a state; ties break to the lowest index."""
    if not 0 <= idx < q.n_states:
        raise PlannerError(f"state index {idx} out of range")
    a = int(q.values[idx].argmax())
    out = []
    for _ in range(q.n_agents):
        a, r = divmod(a, N_ACTIONS)
        out.append(r)
    return tuple(reversed(out))


def greedy_policy(q: QTable) -> PolicyTable:
    return PolicyTable(q.values.argmax(axis=1), q.n_agents)


def state_values(q: QTable) -> np.ndarray:
    return q.values.max(axis=1)


def suboptimality_gap(q: QTable) -> float:
    """Largest gap between a state's best value and any of its action values."""
    v = q.values.max(axis=1, keepdims=True)
    return float(np.abs(v - q.values).max())


def _require_tabular(env) -> None:
    if not hasattr(env, "tabular_model"):
        raise PlannerError(
            "environment does not expose an enumerable transition model; "
            "only sampled training is available for it"
        )


def value_iteration(env: PursuitEnv, gamma: float, tol: float = 1e-8,
                    max_sweeps: int = 100_000) -> TrainResult:
    """Solve the enumerated game to a sup-norm Bellman residual <= tol.

    Plain two-buffer sweeps; termination uses the contraction bound, so the
    table handed back is guaranteed to meet the residual target without a
    separate verification pass.
    """
    _require_tabular(env)
    if not 0 < gamma < 1:
        raise PlannerError(f"gamma must lie in (0, 1), got {gamma}")
    if tol <= 0:
        raise PlannerError("tol must be positive")
    succ, probs, rewards = env.tabular_model()
    S, A, _ = succ.shape
    v = np.zeros(S)
    sweeps = 0
    delta = np.inf
    while gamma * delta > tol:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"no convergence in {max_sweeps} sweeps (last delta {delta:.3e})",
                best=v, residual=gamma * delta,
            )
        q = rewards + gamma * np.einsum("sak,sak->sa", probs, v[succ])
        v_new = q.max(axis=1)
        delta = float(np.abs(v_new - v).max())
        v = v_new
        sweeps += 1
    q = rewards + gamma * np.einsum("sak,sak->sa", probs, v[succ])
    table = QTable(q, gamma=gamma, width=env.width, n_agents=env.n_agents)
    return TrainResult(table, sweeps=sweeps, residual=gamma * delta)


def bellman_residual(q: QTable, env: PursuitEnv) -> float:
    """Recheck: sup-norm distance between V and one backup of itself."""
    _require_tabular(env)
    succ, probs, rewards = env.tabular_model()
    v = q.values.max(axis=1)
    backed = (rewards + q.gamma * np.einsum("sak,sak->sa", probs, v[succ])).max(axis=1)
    return float(np.abs(backed - v).max())


def q_learning(env: PursuitEnv, gamma: float, train: TrainConfig) -> TrainResult:
    """Tabular joint-action Q-learning from simulated episodes.

    Every episode starts in a uniformly random non-terminal state.  Behaviour
    is epsilon-greedy over the 25 joint actions with epsilon decaying
    linearly across episodes; the step size for a pair visited n times is
    ``1 / (1 + n) ** lr_power``.  Rows of absorbing states are never updated
    and stay at zero.
    """
    if not 0 < gamma < 1:
        raise PlannerError(f"gamma must lie in (0, 1), got {gamma}")
    rng = np.random.default_rng(train.seed)
    S, A = env.n_states, env.n_joint_actions
    if hasattr(env, "tabular_model") and S * A <= _ENUMERATED_QL_LIMIT:
        return _q_learning_enumerated(env, gamma, train, rng)
    q = np.zeros((S, A))
    visits = np.zeros((S, A), dtype=np.int64)
    step_cap = env.config.step_cap
    episodes = train.episodes
    total_steps = 0

    for ep in range(episodes):
        if episodes > 1:
            frac = ep / (episodes - 1)
        else:
            frac = 1.0
        eps = train.eps_start + frac * (train.eps_end - train.eps_start)
        s = int(rng.integers(S))
        while env.is_terminal_index(s):
            s = int(rng.integers(S))
        for _ in range(step_cap):
            if rng.random() < eps:
                a = int(rng.integers(A))
            else:
                a = int(q[s].argmax())
            a1, a2 = divmod(a, N_ACTIONS)
            nxt, r, terminal = env.step_index(s, a1, a2, rng)
            visits[s, a] += 1
            lr = 1.0 / (1.0 + visits[s, a]) ** train.lr_power
            target = r if terminal else r + gamma * q[nxt].max()
            q[s, a] += lr * (target - q[s, a])
            total_steps += 1
            if terminal:
                break
            s = nxt

    table = QTable(q, gamma=gamma, width=env.width, n_agents=env.n_agents)
    return TrainResult(table, visits=visits, steps=total_steps)


def _q_learning_enumerated(env: PursuitEnv, gamma: float, train: TrainConfig,
                           rng: np.random.Generator) -> TrainResult:
    """Same per-sample update rule as the generic loop, run as a batch of
    independent walkers against the dense model.

    All live walkers advance one transition per tick.  Bootstrap targets
    within a tick read the value cache as of the start of the tick, and
    walkers that land on the same state-action pair in one tick apply their
    updates in slot order, each with its own visit count.  Successor sampling
    reads the precomputed (succ, probs, rewards) arrays — every live row is
    uniform over its leading slots, so one uniform draw picks the prey hop.
    The two routes therefore consume randomness differently: a seed
    reproduces itself on a route but not across routes.  Epsilon for an
    episode comes from its start ordinal, matching the generic schedule up
    to the order in which parallel episodes begin.
    """
    succ, probs, rewards = env.tabular_model()
    S, A = env.n_states, env.n_joint_actions
    term = env.terminal_mask()
    nonterm = np.flatnonzero(~term)
    succ_flat = succ.reshape(S * A, succ.shape[2])
    rewards_flat = rewards.ravel()
    n_opt_flat = (probs > 0).sum(axis=2).ravel()
    step_cap = env.config.step_cap
    episodes = train.episodes
    lr_pow = train.lr_power

    q = np.zeros((S, A))
    q_flat = q.ravel()  # view of q: pair-indexed scatter writes through
    visits = np.zeros(S * A, dtype=np.int64)
    v = np.zeros(S)
    amax = np.zeros(S, dtype=np.int64)

    def eps_for(ordinals: np.ndarray) -> np.ndarray:
        if episodes > 1:
            frac = ordinals / (episodes - 1.0)
        else:
            frac = np.ones_like(ordinals)
        return train.eps_start + frac * (train.eps_end - train.eps_start)

    n_walkers = min(_QL_BATCH, episodes)
    s = nonterm[(rng.random(n_walkers) * nonterm.size).astype(np.int64)]
    eps = eps_for(np.arange(n_walkers, dtype=float))
    age = np.zeros(n_walkers, dtype=np.int64)
    active = np.ones(n_walkers, dtype=bool)
    started = n_walkers
    total_steps = 0

    while active.any():
        idx = np.flatnonzero(active)
        cur = s[idx]
        u = rng.random((3, idx.size))
        a = np.where(u[0] < eps[idx], (u[1] * A).astype(np.int64), amax[cur])
        pair = cur * A + a
        nxt = succ_flat[pair, (u[2] * n_opt_flat[pair]).astype(np.int64)]
        target = rewards_flat[pair] + np.where(term[nxt], 0.0, gamma * v[nxt])

        order = np.argsort(pair, kind="stable")
        ps = pair[order]
        dup = np.zeros(ps.size, dtype=bool)
        dup[1:] = ps[1:] == ps[:-1]
        first = order[~dup]
        pf = pair[first]
        nf = visits[pf] + 1
        visits[pf] = nf
        q_flat[pf] += (1.0 + nf) ** -lr_pow * (target[first] - q_flat[pf])
        for j in order[dup]:  # rare in-tick collisions, applied one by one
            pj = pair[j]
            nj = visits[pj] + 1
            visits[pj] = nj
            q_flat[pj] += (1.0 + nj) ** -lr_pow * (target[j] - q_flat[pj])

        rows = np.unique(cur)
        v[rows] = q[rows].max(axis=1)
        amax[rows] = q[rows].argmax(axis=1)

        total_steps += idx.size
        age[idx] += 1
        s[idx] = nxt
        done = idx[term[nxt] | (age[idx] >= step_cap)]
        if done.size:
            n_new = min(episodes - started, done.size)
            fresh, dead = done[:n_new], done[n_new:]
            if n_new:
                eps[fresh] = eps_for(np.arange(started, started + n_new, dtype=float))
                s[fresh] = nonterm[(rng.random(n_new) * nonterm.size).astype(np.int64)]
                age[fresh] = 0
                started += n_new
            active[dead] = False

    table = QTable(q, gamma=gamma, width=env.width, n_agents=env.n_agents)
    return TrainResult(table, visits=visits.reshape(S, A), steps=total_steps)


def train(env: PursuitEnv, gamma: float, config: TrainConfig) -> TrainResult:
    """Dispatch to the configured training route."""
    if config.mode == "value-iteration":
        return value_iteration(env, gamma, tol=config.vi_tol, max_sweeps=config.max_sweeps)
    return q_learning(env, gamma, config)


# -- persistence -----------------------------------------------------------

def save_qtable(q: QTable, path, meta: dict | None = None) -> None:
    """Write the binary table plus a JSON sidecar next to it.

    Layout: magic, format version, width, agent count, joint-action count,
    state count (all little-endian u32 after the 4-byte magic), the discount
    as f64, then the values row-major as f64.  The sidecar repeats the header
    fields so the artifact stays self-describing for humans.
    """
    path = str(path)
    values = np.ascontiguousarray(q.values, dtype="<f8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, q.width, q.n_agents,
                          q.n_joint_actions, q.n_states, q.gamma)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())
    sidecar = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "width": q.width,
        "n_agents": q.n_agents,
        "n_joint_actions": q.n_joint_actions,
        "n_states": q.n_states,
        "gamma": q.gamma,
    }
    if meta:
        sidecar.update(meta)
    with open(path + ".meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_qtable(path) -> QTable:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ArtifactError(f"{path}: truncated header")
    magic, version, width, n_agents, n_actions, n_states, gamma = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArtifactError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + 8 * n_states * n_actions
    if len(raw) != expected:
        raise ArtifactError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n_states, n_actions).copy()
    return QTable(values, gamma=gamma, width=width, n_agents=n_agents)
