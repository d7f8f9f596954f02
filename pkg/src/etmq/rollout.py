"""Self-triggered execution of a trained joint policy.

Agents act on a shared estimate of the joint state instead of the true one.
Each agent watches its own block: after every transition it publishes the
block exactly when its drift from the shared estimate exceeds a threshold
evaluated at the previous estimate.  The prey position is sensed locally by
everyone and therefore refreshed without any messages.  Four thresholds are
supported: minus infinity (publish every step), plus infinity (never
publish), the exact robustness radius of the policy at the estimate, and a
fitted radius model lowered by its tube width.

Message accounting: the estimate is seeded with the true start state, so the
first publish opportunity follows the first transition.  One opportunity per
agent per transition means the publish-every-step policy sends exactly two
messages per step in the two-predator game.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .env import N_ACTIONS, PursuitEnv, State
from .planner import PolicyTable
from .surrogate import RadiusCalculator
from .svr import SvrModel, predict_one

EPISODE_CSV_HEADER = (
    "game_id", "alpha", "trigger_kind", "return", "length", "messages", "msg_rate"
)


class RolloutError(ValueError):
    """Invalid rollout inputs."""


# -- trigger thresholds ------------------------------------------------------

class FullCommTrigger:
    """Every agent publishes after every step."""

    kind = "full-comm"

    def threshold(self, idx: int) -> float:
        return -np.inf


class NeverTrigger:
    """No agent ever publishes; policies run on the stale start state."""

    kind = "never"

    def threshold(self, idx: int) -> float:
        return np.inf


class ExactTrigger:
    """Threshold is the exact robustness radius at the shared estimate."""

    kind = "exact"

    def __init__(self, calc: RadiusCalculator, alpha: float):
        if alpha < 0:
            raise RolloutError(f"alpha must be >= 0, got {alpha}")
        self.calc = calc
        self.alpha = alpha
        self._cache: dict[int, float] = {}

    def threshold(self, idx: int) -> float:
        hit = self._cache.get(idx)
        if hit is None:
            # A drifted estimate can assemble into the absorbing shape even
            # mid-game; force a resync there instead of leaving the radius
            # undefined.
            if self.calc.env.is_terminal_index(idx):
                hit = 0.0
            else:
                hit = float(self.calc.radius(idx, self.alpha))
            self._cache[idx] = hit
        return hit


class LearnedTrigger:
    """Fitted radius lowered by the tube width: a conservative threshold."""

    kind = "svr"

    def __init__(self, model: SvrModel, env: PursuitEnv):
        self.model = model
        self.env = env
        self._cache: dict[int, float] = {}

    def threshold(self, idx: int) -> float:
        hit = self._cache.get(idx)
        if hit is None:
            state = self.env.index_to_state(idx)
            hit = predict_one(self.model, state) - self.model.tube
            self._cache[idx] = hit
        return hit

    def threshold_floor(self, idx: int) -> int:
        """Integer floor of the threshold; drifts are integers, so comparing
        against the floor is equivalent and easier to log."""
        import math

        return math.floor(self.threshold(idx))


# -- episode records ----------------------------------------------------------

@dataclass
class TraceStep:
    t: int
    true_state: State
    estimates: tuple[State, ...]
    drifts: tuple[int, ...]
    threshold: float
    published: tuple[bool, ...]


@dataclass
class EpisodeRecord:
    game_id: int
    alpha: float
    trigger_kind: str
    discounted_return: float
    length: int
    messages: int
    per_agent_messages: tuple[int, ...]
    trace: list[TraceStep] | None = None

    @property
    def msg_rate(self) -> float:
        return self.messages / self.length if self.length else 0.0


@dataclass
class BatchSummary:
    alpha: float
    trigger_kind: str
    n_games: int
    mean_return: float
    std_return: float
    mean_length: float
    std_length: float
    mean_msgs: float
    std_msgs: float
    msg_rate: float


@dataclass
class BatchResult:
    records: list[EpisodeRecord]
    summary: BatchSummary


def run_episode(env: PursuitEnv, policy: PolicyTable, trigger, x0: int,
                rng: np.random.Generator, gamma: float, game_id: int = 0,
                alpha: float = 0.0, record_trace: bool = False) -> EpisodeRecord:
    """Play one game from flat start index x0 under a trigger policy.

    When tracing, every agent's copy of the estimate is maintained
    independently from the published messages plus its own prey sensing, so
    the recorded trace can be audited for copy agreement after the fact.
    """
    if env.is_terminal_index(x0):
        raise RolloutError("start state is absorbing")
    w2 = env.n_cells
    cx = env.cell_x.tolist()
    cy = env.cell_y.tolist()
    policy_arr = policy.joint_actions
    n_agents = env.n_agents
    cap = env.config.step_cap

    rest, prey = divmod(x0, w2)
    p1, p2 = divmod(rest, w2)
    hp1, hp2, hprey = p1, p2, prey
    msgs = [0] * n_agents
    ret = 0.0
    discount = 1.0
    trace: list[TraceStep] | None = [] if record_trace else None
    copies: list[list[int]] | None = None
    if record_trace:
        copies = [[p1, p2, prey] for _ in range(n_agents)]

    t = 0
    terminal = False
    while True:
        if t > 0:
            hat_idx = (hp1 * w2 + hp2) * w2 + hprey
            thr = trigger.threshold(hat_idx)
            d1 = max(abs(cx[p1] - cx[hp1]), abs(cy[p1] - cy[hp1]))
            d2 = max(abs(cx[p2] - cx[hp2]), abs(cy[p2] - cy[hp2]))
            pub1, pub2 = d1 > thr, d2 > thr
            if pub1:
                hp1 = p1
                msgs[0] += 1
            if pub2:
                hp2 = p2
                msgs[1] += 1
            hprey = prey
            if record_trace:
                for copy in copies:
                    if pub1:
                        copy[0] = p1
                    if pub2:
                        copy[1] = p2
                    copy[2] = prey  # sensed locally, never transmitted
                trace.append(TraceStep(
                    t=t,
                    true_state=_cells_to_state(env, p1, p2, prey),
                    estimates=tuple(
                        _cells_to_state(env, *copy) for copy in copies
                    ),
                    drifts=(d1, d2),
                    threshold=float(thr),
                    published=(pub1, pub2),
                ))
        if terminal or t >= cap:
            break
        hat_idx = (hp1 * w2 + hp2) * w2 + hprey
        a = int(policy_arr[hat_idx])
        a1, a2 = divmod(a, N_ACTIONS)
        nxt, r, terminal = env.step_index((p1 * w2 + p2) * w2 + prey, a1, a2, rng)
        ret += discount * r
        discount *= gamma
        rest, prey = divmod(nxt, w2)
        p1, p2 = divmod(rest, w2)
        t += 1

    return EpisodeRecord(
        game_id=game_id,
        alpha=alpha,
        trigger_kind=trigger.kind,
        discounted_return=ret,
        length=t,
        messages=sum(msgs),
        per_agent_messages=tuple(msgs),
        trace=trace,
    )


def _cells_to_state(env: PursuitEnv, p1: int, p2: int, prey: int) -> State:
    cx, cy = env.cell_x, env.cell_y
    return (int(cx[p1]), int(cy[p1]), int(cx[p2]), int(cy[p2]),
            int(cx[prey]), int(cy[prey]))


def game_rng(master_seed: int, game_id: int) -> np.random.Generator:
    """Per-game stream: derived, never shared, so games are order-free."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, game_id)))


def run_batch(env: PursuitEnv, policy: PolicyTable, trigger, n_games: int,
              master_seed: int, gamma: float, x0: int | None = None,
              alpha: float = 0.0, record_traces: bool = False) -> BatchResult:
    """Independent games with per-game derived seeds and a reduced summary.

    Starts are drawn uniformly over non-terminal states from each game's own
    stream unless a fixed start index is supplied.
    """
    if n_games < 1:
        raise RolloutError(f"n_games must be >= 1, got {n_games}")
    records = []
    for g in range(n_games):
        rng = game_rng(master_seed, g)
        if x0 is None:
            start = int(rng.integers(env.n_states))
            while env.is_terminal_index(start):
                start = int(rng.integers(env.n_states))
        else:
            start = x0
        records.append(run_episode(
            env, policy, trigger, start, rng, gamma,
            game_id=g, alpha=alpha, record_trace=record_traces,
        ))
    return BatchResult(records=records, summary=summarize(records, alpha, trigger.kind))


def summarize(records: list[EpisodeRecord], alpha: float, trigger_kind: str) -> BatchSummary:
    returns = np.array([r.discounted_return for r in records])
    lengths = np.array([r.length for r in records])
    messages = np.array([r.messages for r in records])
    ddof = 1 if len(records) > 1 else 0
    total_len = lengths.sum()
    return BatchSummary(
        alpha=alpha,
        trigger_kind=trigger_kind,
        n_games=len(records),
        mean_return=float(returns.mean()),
        std_return=float(returns.std(ddof=ddof)),
        mean_length=float(lengths.mean()),
        std_length=float(lengths.std(ddof=ddof)),
        mean_msgs=float(messages.mean()),
        std_msgs=float(messages.std(ddof=ddof)),
        msg_rate=float(messages.sum() / total_len) if total_len else 0.0,
    )


def audit_trace(env: PursuitEnv, record: EpisodeRecord) -> list[str]:
    """Consistency audit of a traced episode.

    Checks, per step: all agents assembled the same estimate; every
    non-publishing agent stayed within the threshold; every publishing
    agent's block in the estimate matches its true block.
    """
    if record.trace is None:
        raise RolloutError("episode was not run with record_trace")
    problems = []
    blocks = env.blocks
    for step in record.trace:
        first = step.estimates[0]
        for i, est in enumerate(step.estimates[1:], start=1):
            if est != first:
                problems.append(
                    f"t={step.t}: agent {i} estimate {est} != agent 0 estimate {first}"
                )
        for agent, (start, stop) in enumerate(blocks.shared):
            if step.published[agent]:
                if step.estimates[agent][start:stop] != step.true_state[start:stop]:
                    problems.append(
                        f"t={step.t}: agent {agent} published but estimate block is stale"
                    )
            elif step.drifts[agent] > step.threshold:
                problems.append(
                    f"t={step.t}: agent {agent} silent with drift "
                    f"{step.drifts[agent]} above threshold {step.threshold}"
                )
    return problems


# -- performance floors --------------------------------------------------------

def geometric_tail(gamma: float) -> float:
    """Sum of gamma^t for t >= 1."""
    _check_gamma(gamma)
    return gamma / (1.0 - gamma)


def geometric_total(gamma: float) -> float:
    """Sum of gamma^t for t >= 0."""
    _check_gamma(gamma)
    return 1.0 / (1.0 - gamma)


def _check_gamma(gamma: float) -> None:
    if not 0 < gamma < 1:
        raise RolloutError(f"gamma must lie in (0, 1), got {gamma}")


def exact_trigger_floor(v0: float, alpha: float, gamma: float) -> float:
    """Guaranteed mean return from a start worth v0 under the exact trigger.

    Uses the tail-sum horizon constant; ``geometric_total`` gives the more
    conservative full-sum variant for side-by-side reporting.
    """
    if alpha < 0:
        raise RolloutError(f"alpha must be >= 0, got {alpha}")
    return v0 - alpha * geometric_tail(gamma)


def learned_trigger_delta(alpha: float, eps_hi: float, iota: float, gamma: float,
                          horizon=geometric_tail) -> float:
    """Worst-case mean-return loss when triggering on the fitted radius.

    eps_hi is the certified probability that the fitted threshold is not
    conservative at a random state; iota bounds how bad one action can be.
    """
    if alpha < 0:
        raise RolloutError(f"alpha must be >= 0, got {alpha}")
    if alpha > iota:
        raise RolloutError(
            f"alpha {alpha} exceeds the action-value gap bound {iota}; "
            "the loss model does not apply"
        )
    if not 0 <= eps_hi <= 1:
        raise RolloutError(f"eps_hi must lie in [0, 1], got {eps_hi}")
    return (alpha + eps_hi * (iota - alpha)) * horizon(gamma)


@dataclass(frozen=True)
class BoundReport:
    alpha: float
    gamma: float
    iota: float
    eps_hi: float
    v0: float
    return_floor: float
    return_floor_total: float
    delta: float
    delta_total: float


def bound_report(alpha: float, gamma: float, iota: float, eps_hi: float, v0: float) -> BoundReport:
    return BoundReport(
        alpha=alpha,
        gamma=gamma,
        iota=iota,
        eps_hi=eps_hi,
        v0=v0,
        return_floor=exact_trigger_floor(v0, alpha, gamma),
        return_floor_total=v0 - alpha * geometric_total(gamma),
        delta=learned_trigger_delta(alpha, eps_hi, iota, gamma),
        delta_total=learned_trigger_delta(alpha, eps_hi, iota, gamma, horizon=geometric_total),
    )


# -- persistence -----------------------------------------------------------------

def save_episodes(records: list[EpisodeRecord], path) -> None:
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_CSV_HEADER)
        for r in records:
            writer.writerow([
                r.game_id, repr(r.alpha), r.trigger_kind,
                repr(r.discounted_return), r.length, r.messages,
                repr(r.msg_rate),
            ])


def load_episodes(path) -> list[dict]:
    with open(str(path), newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != EPISODE_CSV_HEADER:
            raise RolloutError(f"unexpected episode header {header!r}")
        rows = []
        for row in reader:
            rows.append({
                "game_id": int(row[0]),
                "alpha": float(row[1]),
                "trigger_kind": row[2],
                "return": float(row[3]),
                "length": int(row[4]),
                "messages": int(row[5]),
                "msg_rate": float(row[6]),
            })
    return rows
