"""Monte-Carlo policy evaluation used to freeze planner reference values.

Plays a large number of games from fixed starts following the greedy policy
of the value-iteration table and reports the empirical mean discounted
return with its standard error.  The frozen numbers in test_planner.py come
from this script; rerun it (takes ~10 s) if the dynamics ever change:

    python3 tests/oracles/mc_value_check.py
"""

import numpy as np

from etmq.env import EnvConfig, PursuitEnv
from etmq.planner import greedy_policy, value_iteration

GAMMA = 0.97
STARTS = (
    (0, 0, 2, 2, 1, 1),
    (0, 0, 0, 1, 2, 2),
    (2, 0, 0, 2, 1, 0),
)
N_GAMES = 200_000
SEED = 20240817


def mc_value(env, policy, start_idx, n_games, seed):
    rng = np.random.default_rng(seed)
    cap = env.config.step_cap
    returns = np.empty(n_games)
    for g in range(n_games):
        s = start_idx
        ret = 0.0
        disc = 1.0
        for _ in range(cap):
            a = int(policy.joint_actions[s])
            s, r, terminal = env.step_index(s, a // 5, a % 5, rng)
            ret += disc * r
            disc *= GAMMA
            if terminal:
                break
        returns[g] = ret
    return returns.mean(), returns.std(ddof=1) / n_games ** 0.5


def main():
    env = PursuitEnv(EnvConfig(width=3))
    table = value_iteration(env, GAMMA).table
    policy = greedy_policy(table)
    for start in STARTS:
        idx = env.state_to_index(start)
        mean, se = mc_value(env, policy, idx, N_GAMES, SEED)
        vi = float(table.values[idx].max())
        print(f"start={start} mc_mean={mean:.6f} mc_se={se:.6f} vi={vi:.6f} "
              f"diff_sigmas={(vi - mean) / se:+.2f}")


if __name__ == "__main__":
    main()
