"""Two-predator grid pursuit environment with a shared reward.

The joint state stacks both predator positions and the prey position into a
single integer vector ``(x1, y1, x2, y2, px, py)`` over a ``width x width``
arena.  Both predators earn +1 and the episode ends when they close on the
prey from adjacent cells simultaneously; landing on the same cell otherwise
costs -1.  The prey is part of the environment: after the predators resolve
their moves it hops to a uniformly random in-bounds king-neighbour cell (it
never stays put).

States are enumerated lexicographically, so the flat index of a state is its
base-``width`` expansion.  All dynamics helpers work on flat indices
internally; the tuple API converts at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

State = tuple[int, ...]
JointAction = tuple[int, ...]

# Per-predator moves, in fixed id order: up, down, left, right, wait.
ACTION_NAMES = ("up", "down", "left", "right", "wait")
ACTION_DELTAS = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTION_DELTAS)

KING_STEPS = tuple(
    (dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)
)

STATE_DIM = 6


class EnvError(ValueError):
    """Raised for invalid environment configuration or invalid step inputs."""


@dataclass(frozen=True)
class EnvConfig:
    """Arena geometry and episode bookkeeping.

    ``width`` is the arena side length; the coordinate grid is
    ``{0..width-1}^2``.  ``step_cap`` bounds episode length during rollouts.
    ``seed`` seeds harness-level randomness derived from this config (the
    environment itself is passed an explicit generator on every call).
    """

    width: int = 10
    n_predators: int = 2
    step_cap: int = 200
    tag_precedence: bool = True
    prey_policy: str = "uniform-adjacent"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 3:
            raise EnvError(f"width must be >= 3, got {self.width}")
        if self.n_predators != 2:
            raise EnvError("only the two-predator game is supported")
        if self.step_cap < 1:
            raise EnvError(f"step_cap must be >= 1, got {self.step_cap}")
        if self.tag_precedence is not True:
            raise EnvError("tag always outranks collision; tag_precedence must stay true")
        if self.prey_policy != "uniform-adjacent":
            raise EnvError(f"unknown prey policy {self.prey_policy!r}")


@dataclass(frozen=True)
class BlockMap:
    """Which slice of the joint state each agent owns and publishes.

    ``shared`` maps agent id -> (start, stop) for the components that agent
    measures and may broadcast.  ``local`` lists component ranges every agent
    senses directly (the prey position here), which therefore never need to
    be communicated.
    """

    shared: tuple[tuple[int, int], ...]
    local: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        spans = sorted(self.shared + self.local)
        covered = []
        for start, stop in spans:
            if start >= stop:
                raise EnvError(f"empty block ({start}, {stop})")
            covered.extend(range(start, stop))
        if len(covered) != len(set(covered)):
            raise EnvError("state blocks overlap")

    @property
    def n_agents(self) -> int:
        return len(self.shared)


@dataclass(frozen=True)
class TransitionOutcome:
    next_state: State
    reward: int
    terminal: bool


def sup_distance(a: State, b: State) -> int:
    """Sup-norm distance between two joint states."""
    if len(a) != len(b):
        raise EnvError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return max(abs(u - v) for u, v in zip(a, b))


def block_distance(a: State, b: State, agent: int, blocks: BlockMap) -> int:
    """Sup-norm distance restricted to one agent's published block."""
    if len(a) != len(b):
        raise EnvError(f"dimension mismatch: {len(a)} vs {len(b)}")
    if not 0 <= agent < len(blocks.shared):
        raise EnvError(f"unknown agent id {agent}")
    start, stop = blocks.shared[agent]
    return max(abs(a[i] - b[i]) for i in range(start, stop))


class PursuitEnv:
    """Tabular two-predator pursuit game on a square grid.

    Exposes both a tuple-level API (``step``, ``transition_distribution``)
    and flat-index tables used by the planner and the rollout engine.  All
    randomness comes in through explicit ``numpy.random.Generator`` handles.
    """

    def __init__(self, config: EnvConfig):
        self.config = config
        w = config.width
        self.width = w
        self.n_cells = w * w
        self.n_states = w ** STATE_DIM
        self.n_agents = config.n_predators
        self.n_joint_actions = N_ACTIONS ** self.n_agents
        self.blocks = BlockMap(shared=((0, 2), (2, 4)), local=((4, 6),))
        self._build_tables()

    # -- geometry tables -------------------------------------------------

    def _build_tables(self) -> None:
        w = self.width
        cells = np.arange(self.n_cells)
        cx, cy = cells // w, cells % w
        self.cell_x = cx
        self.cell_y = cy

        # Deterministic predator motion: move[cell, action] -> cell, with
        # wall clipping.
        move = np.empty((self.n_cells, N_ACTIONS), dtype=np.int64)
        for a, (dx, dy) in enumerate(ACTION_DELTAS):
            nx = np.clip(cx + dx, 0, w - 1)
            ny = np.clip(cy + dy, 0, w - 1)
            move[:, a] = nx * w + ny
        self.pred_move = move

        # Prey options: in-bounds king neighbours, padded to 8 per cell.
        counts = np.zeros(self.n_cells, dtype=np.int64)
        options = np.zeros((self.n_cells, len(KING_STEPS)), dtype=np.int64)
        for c in range(self.n_cells):
            x, y = c // w, c % w
            k = 0
            for dx, dy in KING_STEPS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < w:
                    options[c, k] = nx * w + ny
                    k += 1
            counts[c] = k
        self.prey_options = options
        self.prey_counts = counts

        # Cardinal adjacency between cells (Manhattan distance one).
        manh = np.abs(cx[:, None] - cx[None, :]) + np.abs(cy[:, None] - cy[None, :])
        self.adjacent4 = manh == 1

    # -- state encoding --------------------------------------------------

    def state_to_index(self, state: State) -> int:
        if len(state) != STATE_DIM:
            raise EnvError(f"state must have {STATE_DIM} components")
        w = self.width
        idx = 0
        for v in state:
            if not 0 <= v < w:
                raise EnvError(f"coordinate {v} outside [0, {w})")
            idx = idx * w + v
        return idx

    def index_to_state(self, idx: int) -> State:
        if not 0 <= idx < self.n_states:
            raise EnvError(f"state index {idx} out of range")
        w = self.width
        out = []
        for _ in range(STATE_DIM):
            idx, r = divmod(int(idx), w)
            out.append(r)
        return tuple(reversed(out))

    def cells_of_index(self, idx: int) -> tuple[int, int, int]:
        """Split a flat state index into (pred1, pred2, prey) cell ids."""
        rest, prey = divmod(idx, self.n_cells)
        p1, p2 = divmod(rest, self.n_cells)
        return p1, p2, prey

    def index_of_cells(self, p1: int, p2: int, prey: int) -> int:
        return (p1 * self.n_cells + p2) * self.n_cells + prey

    def enumerate_states(self) -> np.ndarray:
        """All states in lexicographic order, shape (n_states, 6)."""
        w = self.width
        grids = np.meshgrid(*([np.arange(w)] * STATE_DIM), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    # -- termination ------------------------------------------------------

    def is_terminal_index(self, idx: int) -> bool:
        p1, p2, prey = self.cells_of_index(idx)
        return p1 == p2 == prey

    def is_terminal(self, state: State) -> bool:
        return self.is_terminal_index(self.state_to_index(state))

    def terminal_mask(self) -> np.ndarray:
        """Boolean mask over flat state indices, True where absorbing."""
        mask = np.zeros(self.n_states, dtype=bool)
        cells = np.arange(self.n_cells)
        mask[self.index_of_cells(cells, cells, cells)] = True
        return mask

    def nonterminal_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal_mask())

    # -- joint actions ----------------------------------------------------

    def joint_action_index(self, action: JointAction) -> int:
        if len(action) != self.n_agents:
            raise EnvError(f"need {self.n_agents} per-agent actions")
        idx = 0
        for a in action:
            if not 0 <= a < N_ACTIONS:
                raise EnvError(f"unknown action id {a}")
            idx = idx * N_ACTIONS + a
        return idx

    def joint_action_tuple(self, idx: int) -> JointAction:
        if not 0 <= idx < self.n_joint_actions:
            raise EnvError(f"joint action index {idx} out of range")
        out = []
        for _ in range(self.n_agents):
            idx, r = divmod(idx, N_ACTIONS)
            out.append(r)
        return tuple(reversed(out))

    # -- dynamics ----------------------------------------------------------

    def _resolve_predators(self, idx: int, a1: int, a2: int) -> tuple[int, int, int, int, bool]:
        """Apply both predator moves; returns (p1', p2', prey, reward, tag)."""
        p1, p2, prey = self.cells_of_index(idx)
        n1 = self.pred_move[p1, a1]
        n2 = self.pred_move[p2, a2]
        tag = (
            n1 == prey
            and n2 == prey
            and self.adjacent4[p1, prey]
            and self.adjacent4[p2, prey]
        )
        if tag:
            return n1, n2, prey, 1, True
        reward = -1 if n1 == n2 else 0
        return n1, n2, prey, reward, False

    def step_index(self, idx: int, a1: int, a2: int, rng: np.random.Generator) -> tuple[int, int, bool]:
        """One transition on flat indices: returns (next_idx, reward, terminal)."""
        if self.is_terminal_index(idx):
            raise EnvError("cannot step from a terminal state")
        n1, n2, prey, reward, tag = self._resolve_predators(idx, a1, a2)
        if tag:
            return int(self.index_of_cells(prey, prey, prey)), reward, True
        k = self.prey_counts[prey]
        prey2 = self.prey_options[prey, rng.integers(k)]
        nxt = int(self.index_of_cells(n1, n2, prey2))
        return nxt, reward, self.is_terminal_index(nxt)

    def step(self, state: State, action: JointAction, rng: np.random.Generator) -> TransitionOutcome:
        """Sample one transition.  The prey move is the only random part."""
        if len(action) != self.n_agents:
            raise EnvError(f"need {self.n_agents} per-agent actions")
        for a in action:
            if not 0 <= a < N_ACTIONS:
                raise EnvError(f"unknown action id {a}")
        idx = self.state_to_index(state)
        nxt, reward, terminal = self.step_index(idx, action[0], action[1], rng)
        return TransitionOutcome(self.index_to_state(nxt), reward, terminal)

    def transition_distribution(self, state: State, action: JointAction) -> list[tuple[State, float, int]]:
        """Full successor distribution as (state, probability, reward) rows.

        A capture puts the whole mass on the absorbing joined state; the prey
        never moves once caught.  Otherwise one row per in-bounds prey hop.
        """
        idx = self.state_to_index(state)
        if self.is_terminal_index(idx):
            raise EnvError("no transitions from a terminal state")
        a_idx = self.joint_action_index(action)
        a1, a2 = divmod(a_idx, N_ACTIONS)
        n1, n2, prey, reward, tag = self._resolve_predators(idx, a1, a2)
        if tag:
            nxt = self.index_of_cells(prey, prey, prey)
            return [(self.index_to_state(nxt), 1.0, reward)]
        k = int(self.prey_counts[prey])
        p = 1.0 / k
        rows = []
        for j in range(k):
            nxt = self.index_of_cells(n1, n2, self.prey_options[prey, j])
            rows.append((self.index_to_state(nxt), p, reward))
        return rows

    # -- dense model for the planner ---------------------------------------

    def tabular_model(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense dynamics arrays for sweep-based planning.

        Returns ``(succ, probs, rewards)`` with shapes (S, A, 8), (S, A, 8)
        and (S, A).  Padding slots carry probability zero.  Rows for
        absorbing states self-loop with zero reward.  The reward of a
        transition depends only on (state, joint action) because it is
        settled before the prey hops.
        """
        S, A, K = self.n_states, self.n_joint_actions, len(KING_STEPS)
        w2 = self.n_cells
        idx = np.arange(S)
        rest, prey = np.divmod(idx, w2)
        p1, p2 = np.divmod(rest, w2)

        succ = np.zeros((S, A, K), dtype=np.int64)
        probs = np.zeros((S, A, K))
        rewards = np.zeros((S, A))

        prey_counts = self.prey_counts[prey]
        terminal = (p1 == p2) & (p2 == prey)
        live = ~terminal

        for a in range(A):
            a1, a2 = divmod(a, N_ACTIONS)
            n1 = self.pred_move[p1, a1]
            n2 = self.pred_move[p2, a2]
            tag = (n1 == prey) & (n2 == prey) & self.adjacent4[p1, prey] & self.adjacent4[p2, prey]
            tag &= live
            collide = (n1 == n2) & ~tag & live
            rewards[tag, a] = 1.0
            rewards[collide, a] = -1.0
            base = (n1 * w2 + n2) * w2
            for j in range(K):
                hop_ok = live & (j < prey_counts)
                succ[hop_ok, a, j] = base[hop_ok] + self.prey_options[prey[hop_ok], j]
                probs[hop_ok, a, j] = 1.0 / prey_counts[hop_ok]
            # Capture: all mass on the absorbing joined state.
            joined = (prey * w2 + prey) * w2 + prey
            succ[tag, a, 0] = joined[tag]
            probs[tag, a, :] = 0.0
            probs[tag, a, 0] = 1.0
            # Absorbing rows: self-loop, zero reward.
            succ[terminal, a, 0] = idx[terminal]
            probs[terminal, a, 0] = 1.0
        return succ, probs, rewards
