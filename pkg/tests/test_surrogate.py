"""Robustness-radius labelling: shells, exactness, and the sample CSV."""

import numpy as np
import pytest

from etmq.env import EnvConfig, PursuitEnv, sup_distance
from etmq.planner import suboptimality_gap, value_iteration
from etmq.surrogate import (
    RadiusCalculator,
    SampleSet,
    SurrogateError,
    load_samples,
    sample_radii,
    save_samples,
    shell_indices,
)

GAMMA = 0.97


@pytest.fixture(scope="module")
def w3():
    env = PursuitEnv(EnvConfig(width=3))
    table = value_iteration(env, GAMMA).table
    return env, table, RadiusCalculator(env, table)


def brute_force_radius(env, table, idx, alpha):
    """Independent oracle: test every state in the ball, no shell tricks.

    Walks the radius upward, checking the full ball each time by scanning
    all states and filtering on sup-distance.
    """
    q = table.values
    v = q.max(axis=1)
    a_star = int(q[idx].argmax())
    centre = env.index_to_state(idx)
    everything = [env.index_to_state(j) for j in range(env.n_states)]
    diameter = env.width - 1
    for d in range(1, diameter + 1):
        ball = [env.state_to_index(s) for s in everything
                if sup_distance(centre, s) <= d]
        if any(q[j, a_star] < v[j] - alpha for j in ball):
            return d - 1
    return diameter


# -- shells -------------------------------------------------------------------

def test_shell_counts_centre_and_corner(w3):
    env, _, _ = w3
    centre = env.state_to_index((1, 1, 1, 1, 1, 1))
    corner = env.state_to_index((0, 0, 0, 0, 0, 0))
    assert shell_indices(env, centre, 1).size == 3 ** 6 - 1  # 728
    assert shell_indices(env, corner, 1).size == 2 ** 6 - 1  # 63


def test_shells_partition_the_ball(w3):
    env, _, _ = w3
    idx = env.state_to_index((0, 1, 2, 0, 1, 2))
    centre = env.index_to_state(idx)
    seen = {idx}
    for d in (1, 2):
        shell = shell_indices(env, idx, d)
        for j in shell:
            assert sup_distance(centre, env.index_to_state(int(j))) == d
        assert not seen.intersection(shell.tolist())
        seen.update(shell.tolist())
    assert len(seen) == env.n_states  # radius 2 covers the whole W=3 arena


def test_shell_rejects_bad_distance(w3):
    env, _, _ = w3
    with pytest.raises(SurrogateError):
        shell_indices(env, 0, 0)


# -- radius values ------------------------------------------------------------------

def test_radius_matches_brute_force_spot_checks(w3):
    env, table, calc = w3
    rng = np.random.default_rng(5)
    states = rng.choice(env.nonterminal_indices(), size=40, replace=False)
    for alpha in (0.0, 0.3):
        for idx in states:
            assert calc.radius(int(idx), alpha) == brute_force_radius(
                env, table, int(idx), alpha)


def test_radius_saturates_above_worst_gap(w3):
    env, table, calc = w3
    iota = suboptimality_gap(table)
    rng = np.random.default_rng(6)
    for idx in rng.choice(env.nonterminal_indices(), size=10, replace=False):
        assert calc.radius(int(idx), iota + 1e-9) == env.width - 1


def test_radius_monotone_in_alpha(w3):
    env, _, calc = w3
    rng = np.random.default_rng(7)
    alphas = (0.0, 0.05, 0.1, 0.3, 0.7, 1.5)
    for idx in rng.choice(env.nonterminal_indices(), size=25, replace=False):
        radii = [calc.radius(int(idx), a) for a in alphas]
        assert radii == sorted(radii)


def test_radius_rejects_bad_inputs(w3):
    env, _, calc = w3
    terminal = env.state_to_index((1, 1, 1, 1, 1, 1))
    with pytest.raises(SurrogateError):
        calc.radius(terminal, 0.1)
    with pytest.raises(SurrogateError):
        calc.radius(0, -0.1)
    with pytest.raises(SurrogateError):
        calc.radius(env.n_states, 0.1)


def test_label_agrees_with_scalar_radius(w3):
    env, _, calc = w3
    idx = env.nonterminal_indices()[:30]
    labels = calc.label(idx, 0.3)
    assert labels.shape == (30,)
    for j, lab in zip(idx, labels):
        assert calc.radius(int(j), 0.3) == lab


# -- sampling and persistence ----------------------------------------------------------

def test_sample_radii_unique_and_seeded(w3):
    env, _, calc = w3
    a = sample_radii(env, calc, 0.3, 50, seed=11)
    b = sample_radii(env, calc, 0.3, 50, seed=11)
    c = sample_radii(env, calc, 0.3, 50, seed=12)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.radii, b.radii)
    assert not np.array_equal(a.states, c.states)
    # no duplicates, no terminal states
    flat = [env.state_to_index(tuple(s)) for s in a.states]
    assert len(set(flat)) == 50
    assert not any(env.is_terminal_index(i) for i in flat)


def test_sample_radii_count_limits(w3):
    env, _, calc = w3
    pool = env.nonterminal_indices().size
    with pytest.raises(SurrogateError):
        sample_radii(env, calc, 0.3, pool + 1, seed=0)
    with pytest.raises(SurrogateError):
        sample_radii(env, calc, 0.3, 0, seed=0)


def test_sample_csv_round_trip(tmp_path, w3):
    env, _, calc = w3
    samples = sample_radii(env, calc, 0.3, 64, seed=2)
    path = tmp_path / "samples.csv"
    save_samples(samples, path)
    header = path.read_text().splitlines()[0]
    assert header == "x1,x2,x3,x4,x5,x6,gamma,alpha"
    back = load_samples(path)
    assert np.array_equal(back.states, samples.states)
    assert np.array_equal(back.radii, samples.radii)
    assert back.alpha == samples.alpha


def test_sample_csv_rejects_garbage(tmp_path):
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(SurrogateError):
        load_samples(bad_header)

    empty = tmp_path / "e.csv"
    empty.write_text("x1,x2,x3,x4,x5,x6,gamma,alpha\n")
    with pytest.raises(SurrogateError):
        load_samples(empty)

    mixed = tmp_path / "m.csv"
    mixed.write_text(
        "x1,x2,x3,x4,x5,x6,gamma,alpha\n"
        "0,0,1,1,2,2,1,0.3\n"
        "0,0,1,1,2,2,1,0.4\n"
    )
    with pytest.raises(SurrogateError):
        load_samples(mixed)


def test_sampleset_validates_shapes():
    with pytest.raises(SurrogateError):
        SampleSet(states=np.zeros((3, 6), dtype=np.int64),
                  radii=np.zeros(2, dtype=np.int64), alpha=0.1, seed=0)
