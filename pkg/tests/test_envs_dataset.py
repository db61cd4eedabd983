import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdit.dataset import (
    DatasetError,
    OfflineDataset,
    compute_returns_to_go,
    dataset_from_text,
    dataset_load,
    dataset_save,
    dataset_to_text,
    generate_offline_dataset,
    normalize_mix,
)
from pdit.envs import VOCAB, EnvError, GridImage, InstructionGrid, PointMass, expert_policy, make_env


# -------------------------------------------------------------- returns-to-go
def test_rtg_discounted_example():
    np.testing.assert_allclose(compute_returns_to_go([1, 0, 2], 0.5), [1.5, 1.0, 2.0])


def test_rtg_gamma_zero_is_reward():
    np.testing.assert_array_equal(compute_returns_to_go([3, -1, 2], 0.0), [3, -1, 2])


def test_rtg_counts_down():
    np.testing.assert_array_equal(compute_returns_to_go(np.ones(5), 1.0), [5, 4, 3, 2, 1])


def test_rtg_errors():
    with pytest.raises(DatasetError):
        compute_returns_to_go([], 0.9)
    with pytest.raises(DatasetError):
        compute_returns_to_go([1.0], 1.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0, 1))
def test_rtg_matches_direct_sum(rewards, gamma):
    got = compute_returns_to_go(rewards, gamma)
    r = np.asarray(rewards)
    direct = [sum(gamma ** (k - t) * r[k] for k in range(t, len(r))) for t in range(len(r))]
    np.testing.assert_allclose(got, direct, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------- grid envs
def test_grid_render_shape_and_values():
    env = GridImage()
    obs = env.reset(3).pixels
    assert obs.shape == (12, 12, 1)
    r, c = env.agent
    assert np.all(obs[2 * r:2 * r + 2, 2 * c:2 * c + 2] == env.agent_value)
    gr, gc = env.goal
    assert np.all(obs[2 * gr:2 * gr + 2, 2 * gc:2 * gc + 2] == env.goal_value)
    assert (obs != env.background).sum() == 8


def test_grid_same_seed_same_episode():
    a, b = GridImage(), GridImage()
    oa, ob = a.reset(11), b.reset(11)
    np.testing.assert_array_equal(oa.pixels, ob.pixels)
    for act in [0, 3, 3, 1]:
        if a.done:
            break
        ra, rb = a.step(act), b.step(act)
        np.testing.assert_array_equal(ra[0].pixels, rb[0].pixels)
        assert ra[1:] == rb[1:]


def test_goal_adjacent_move_pays():
    env = GridImage()
    env.reset(0)
    env.agent, env.goal = (2, 2), (2, 3)
    _, reward, done = env.step(3)
    assert reward == 1.0 and done


def test_horizon_ends_without_reward():
    env = GridImage(horizon=5)
    env.reset(0)
    env.agent, env.goal = (0, 0), (5, 5)
    total = 0.0
    while not env.done:
        _, r, _ = env.step(0)  # bump into the top wall
        total += r
    assert env.t == 5 and total == 0.0


def test_step_after_done_raises():
    env = GridImage()
    env.reset(0)
    env.agent, env.goal = (0, 0), (0, 1)
    env.step(3)
    with pytest.raises(EnvError):
        env.step(3)


def test_invalid_action():
    env = GridImage()
    env.reset(0)
    with pytest.raises(EnvError):
        env.step(4)


@pytest.mark.parametrize("seed", range(30))
def test_expert_path_length_is_manhattan(seed):
    env = GridImage()
    env.reset(seed)
    (r, c), (gr, gc) = env.agent, env.goal
    steps, rng = 0, np.random.default_rng(seed)
    while not env.done:
        _, reward, _ = env.step(expert_policy(env, rng))
        steps += 1
    assert steps == abs(r - gr) + abs(c - gc)
    assert reward == 1.0


def test_expert_without_rng_moves_vertically_first():
    env = GridImage()
    env.reset(0)
    env.agent, env.goal = (3, 3), (1, 5)
    assert env.optimal_actions() == [0, 3]
    assert env.expert_action() == 0


def test_eps_one_is_uniform_random():
    env = GridImage()
    env.reset(0)
    rng = np.random.default_rng(0)
    counts = np.bincount([expert_policy(env, rng, eps=1.0) for _ in range(4000)], minlength=4)
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)


def test_instruction_grid_names_goal():
    env = InstructionGrid()
    obs = env.reset(5)
    assert obs.image.pixels.shape == (12, 12, 3)
    words = [VOCAB[i] for i in obs.words]
    assert words[:2] == ["go", "to"] and words[2] == env.goal_color
    assert env.goal == env.objects[env.goal_color]
    assert len(env.objects) == 2


def test_instruction_grid_expert_reaches_named_object():
    for seed in range(20):
        env = InstructionGrid()
        env.reset(seed)
        rng = np.random.default_rng(seed)
        total = 0.0
        while not env.done:
            _, r, _ = env.step(expert_policy(env, rng))
            total += r
        assert total == 1.0 and env.agent == env.objects[env.goal_color]


# ---------------------------------------------------------------- point mass
def test_point_mass_observation_and_reward():
    env = PointMass()
    obs = env.reset(1)
    assert obs.values.shape == (4,)
    _, r, _ = env.step(np.zeros(2))
    assert r == pytest.approx(-env.distance())


@pytest.mark.parametrize("seed", range(20))
def test_point_mass_expert_monotone(seed):
    env = PointMass()
    env.reset(seed)
    dists = [env.distance()]
    while not env.done:
        env.step(env.expert_action())
        dists.append(env.distance())
    assert np.all(np.diff(dists) <= 1e-12)
    assert dists[-1] < env.goal_radius


def test_point_mass_clips_actions():
    a, b = PointMass(), PointMass()
    a.reset(2)
    b.reset(2)
    a.step(np.array([5.0, -5.0]))
    b.step(np.array([1.0, -1.0]))
    np.testing.assert_array_equal(a.pos, b.pos)


def test_point_mass_discrete_mode():
    env = PointMass(discrete=True)
    env.reset(0)
    assert env.action_type == "discrete"
    assert isinstance(env.expert_action(), int)


def test_make_env_by_name_and_config():
    assert isinstance(make_env("grid-image"), GridImage)
    env = make_env({"name": "grid-image", "goal_value": 0.5})
    assert env.goal_value == 0.5
    assert make_env(env.config()).config() == env.config()
    with pytest.raises(EnvError, match="unknown env"):
        make_env("atari")


# ------------------------------------------------------------------ datasets
def test_all_expert_grid_dataset():
    ds = generate_offline_dataset("grid-image", 40, seed=7)
    assert len(ds) == 40
    assert np.all(ds.returns() == 1.0)
    for t in ds.trajectories:
        t.validate()


def test_generation_is_deterministic():
    a = generate_offline_dataset("instruction-grid", 10, {0.0: 0.5, 0.3: 0.5}, seed=3)
    b = generate_offline_dataset("instruction-grid", 10, {0.0: 0.5, 0.3: 0.5}, seed=3)
    assert dataset_to_text(a) == dataset_to_text(b)
    c = generate_offline_dataset("instruction-grid", 10, {0.0: 0.5, 0.3: 0.5}, seed=4)
    assert dataset_to_text(a) != dataset_to_text(c)


def test_quality_mix_fraction():
    ds = generate_offline_dataset({"name": "grid-image", "horizon": 8}, 1000, {0.0: 0.5, 1.0: 0.5}, seed=1)
    frac = np.mean([t.eps == 0.0 for t in ds.trajectories])
    assert 0.45 <= frac <= 0.55


def test_mix_validation():
    with pytest.raises(DatasetError):
        normalize_mix({0.0: -1.0, 1.0: 2.0})
    with pytest.raises(DatasetError):
        normalize_mix({})
    with pytest.raises(DatasetError):
        normalize_mix({1.5: 1.0})
    with pytest.raises(DatasetError):
        generate_offline_dataset("grid-image", 0)


def test_metadata_recorded():
    ds = generate_offline_dataset({"name": "point-mass", "horizon": 30}, 3, seed=9, gamma=0.99)
    assert ds.metadata["seed"] == 9
    assert ds.metadata["env_config"]["horizon"] == 30
    assert ds.env_config["name"] == "point-mass"
    assert ds.trajectories[0].gamma == 0.99


@pytest.mark.parametrize("env", ["grid-image", "point-mass", "instruction-grid"])
def test_save_load_save_is_byte_identical(tmp_path, env):
    ds = generate_offline_dataset(env, 5, {0.0: 0.5, 0.5: 0.5}, seed=2, gamma=0.9)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    dataset_save(ds, p1)
    loaded = dataset_load(p1)
    dataset_save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(loaded.trajectories[0].observations, ds.trajectories[0].observations)
    assert loaded.trajectories[0].actions.dtype == ds.trajectories[0].actions.dtype


def test_truncated_file_is_rejected(tmp_path):
    ds = generate_offline_dataset("grid-image", 4, seed=0)
    text = dataset_to_text(ds)
    cut = text[: len(text) // 2]
    with pytest.raises(DatasetError, match="line"):
        dataset_from_text(cut)
    whole_lines = "\n".join(text.split("\n")[:3]) + "\n"
    with pytest.raises(DatasetError, match="truncated"):
        dataset_from_text(whole_lines)


def test_malformed_line_reports_line_number():
    ds = generate_offline_dataset("grid-image", 3, seed=0)
    lines = dataset_to_text(ds).split("\n")
    lines[2] = "{not json"
    with pytest.raises(DatasetError, match="line 3"):
        dataset_from_text("\n".join(lines))


def test_rtg_violation_is_rejected():
    ds = generate_offline_dataset("grid-image", 3, seed=0)
    lines = dataset_to_text(ds).split("\n")
    rec = json.loads(lines[1])
    rec["rtg"][0] += 0.5
    lines[1] = json.dumps(rec)
    with pytest.raises(DatasetError, match="line 2.*returns-to-go"):
        dataset_from_text("\n".join(lines))


def test_bad_header():
    with pytest.raises(DatasetError, match="line 1"):
        dataset_from_text('{"format": "other"}\n')
    with pytest.raises(DatasetError):
        dataset_from_text("")


def test_failed_save_leaves_previous_file(tmp_path, monkeypatch):
    path = tmp_path / "d.jsonl"
    dataset_save(generate_offline_dataset("grid-image", 2, seed=0), path)
    before = path.read_bytes()

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr("pdit.dataset.os.replace", boom)
    with pytest.raises(OSError):
        dataset_save(generate_offline_dataset("grid-image", 3, seed=1), path)
    assert path.read_bytes() == before


def test_empty_dataset_validate():
    with pytest.raises(DatasetError):
        OfflineDataset([]).validate()
