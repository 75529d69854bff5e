import numpy as np
import pytest

from flowguide import RobotState, SamplerConfig, query_sdf
from flowguide.bench.posthoc import PosthocConfig, PosthocOptimizer
from flowguide.sim import (SCENE_FAMILIES, Box, ExecutionConfig, Observation, ReachingPrior, Sphere,
                           dynamic_scene_update, generate_dataset, generate_pseudo_demo, load_scene,
                           make_robot, make_scene, read_jsonl, append_jsonl, run_episode, save_scene)


@pytest.mark.parametrize("family", sorted(SCENE_FAMILIES))
def test_scene_families_are_valid(family):
    robot = make_robot()
    for seed in range(5):
        scene = make_scene(family, seed)
        scene.validate(robot)
        assert scene.clearance(scene.target_position[None]).min() > 0


def test_unknown_family():
    with pytest.raises(ValueError):
        make_scene("kitchen")


def test_obstacle_distances():
    box = Box([0, 0, 0], [1, 1, 1])
    assert box.distance(np.array([[2.0, 0, 0]]))[0] == pytest.approx(1.0)
    assert box.contains(np.array([[0.5, 0.5, 0.5]]))[0]
    ball = Sphere([0, 0, 0], 0.5)
    assert ball.distance(np.array([[0, 2.0, 0]]))[0] == pytest.approx(1.5)


def test_scene_round_trip(tmp_path):
    scene = make_scene("demo", 3)
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.to_dict() == scene.to_dict()
    cl = make_scene("cluttered-multi-choice", 1)
    save_scene(cl, tmp_path / "c.json")
    assert load_scene(tmp_path / "c.json").to_dict() == cl.to_dict()


def test_relevance_filter_removes_reached_object():
    scene = make_scene("multi-choice", 0)
    cloud = scene.point_cloud()
    sdf = scene.build_sdf()
    target = scene.target_position
    others = [p for lab, p in scene.targets if lab != scene.correct_target]
    assert query_sdf(sdf, target[None])[0] > 0.01
    assert all(query_sdf(sdf, p[None])[0] < 0.03 for p in others)
    assert set(cloud.labels) >= {lab for lab, _ in scene.targets}


def test_prior_conditioning():
    scene = make_scene("cluttered", 0)
    prior = ReachingPrior()
    obs = Observation(scene.scene_id, scene.start_position, scene.start_rotation, scene.start_position,
                      scene.targets, scene.routes)
    pol = prior.condition(obs)
    assert pol.means_.shape == (3, 15 * 7)
    assert np.allclose(pol.weights_, 1 / 3)
    # the straight route's mean steps toward the target at the configured speed
    robot = make_robot()
    traj = robot.rollout(scene.start_state(), pol.means_[0].reshape(15, 7))
    step = traj.ee_positions[0] - scene.start_position
    assert np.linalg.norm(step) == pytest.approx(0.012, rel=1e-6)
    obs.previous_direction = traj.ee_positions[2] - scene.start_position
    assert np.argmax(prior.condition(obs).weights_) == 0


def test_execution_config_validation():
    with pytest.raises(ValueError):
        ExecutionConfig(horizon=5, executed_steps=6)
    with pytest.raises(ValueError):
        ExecutionConfig(max_chunks=0)


def test_episode_is_deterministic_and_seeded():
    scene = make_scene("cluttered", 2)
    cfg = SamplerConfig(num_steps=8, init_candidates=2)
    a = run_episode(scene, ReachingPrior(), sampler_cfg=cfg, seed=5)
    b = run_episode(scene, ReachingPrior(), sampler_cfg=cfg, seed=5)
    assert a.deterministic_dict() == b.deterministic_dict()
    assert len(a.chunk_seconds) == a.chunks
    c = run_episode(scene, ReachingPrior(), sampler_cfg=cfg, seed=6)
    assert a.trajectory != c.trajectory


def test_episode_collision_accounting():
    scene = make_scene("corridor")
    res = run_episode(scene, ReachingPrior(sigma=0.01), sampler_cfg=SamplerConfig(num_steps=8),
                      field_specs={}, seed=0)
    path = np.asarray(res.trajectory)
    # an unguided straight reach crosses the pillar
    assert scene.in_collision(path).any() or res.collision_count > 0
    assert not res.safe and res.min_clearance == 0.0


def test_dynamic_obstacle_insertion():
    scene = make_scene("corridor")
    wall = Box([0.2, 0.0, 0.3], [0.01, 0.01, 0.01])
    scene.dynamic = [(1, wall)]
    assert dynamic_scene_update(scene, 0) is scene
    later = dynamic_scene_update(scene, 1)
    assert len(later.obstacles) == len(scene.obstacles) + 1 and later.dynamic == []


def test_dataset_paths_reproduce():
    robot = make_robot()
    data, paths = generate_dataset("cluttered", 4, seed=1, return_paths=True)
    assert all(c.shape == (15, 7) for _, c in data)
    i = 0
    for state, _, path in paths:
        for c in range(len(path) // 15):
            traj = robot.rollout(state, data[i][1])
            assert np.allclose(traj.ee_positions, path[c * 15:(c + 1) * 15], atol=1e-9)
            state = robot.state_at(traj, 14)
            i += 1
    again = generate_dataset("cluttered", 4, seed=1)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(data, again))


def test_pseudo_demo():
    demo = generate_pseudo_demo(None, [[0, 0, 0], [1, 0, 0]], 11)
    assert np.allclose(demo[:, 0], np.linspace(0, 1, 11))
    with pytest.raises(ValueError):
        generate_pseudo_demo(None, [[0, 0, 0]], 1)


def _directional(opt, state, chunk, ref, sdf, rng):
    u = rng.normal(size=chunk.shape)
    u[8:] = 0
    h = 1e-6
    fd = (opt._cost_and_grad(state, chunk + h * u, ref, sdf, 8)[0]
          - opt._cost_and_grad(state, chunk - h * u, ref, sdf, 8)[0]) / (2 * h)
    return float(np.sum(opt._cost_and_grad(state, chunk, ref, sdf, 8)[1] * u)), fd


def test_posthoc_gradient_and_clearance():
    scene = make_scene("corridor")
    robot = make_robot()
    sdf = scene.build_sdf()
    rng = np.random.default_rng(0)
    # probes run alongside the pillar in free space, within the barrier margin
    state = RobotState(position=[0.26, 0.18, scene.start_position[2]], rotation=scene.start_rotation)
    chunk = np.zeros((15, 7))
    chunk[:8, 0] = 1.0
    chunk[:, 1] = -0.3
    ref = robot.rollout(state, chunk).ee_positions + 0.01
    smooth = PosthocOptimizer(robot, PosthocConfig(w_coll=0.0, max_step=0.001))
    analytic, fd = _directional(smooth, state, chunk, ref, sdf, rng)
    assert analytic == pytest.approx(fd, rel=1e-6)
    barrier = PosthocOptimizer(robot, PosthocConfig(w_align=0, w_goal=0, w_bound=0, w_coll=1e4,
                                                    barrier_d=0.1))
    analytic, fd = _directional(barrier, state, chunk, ref, sdf, rng)
    # the barrier uses the grid gradient, which matches the interpolant up to discretisation
    assert analytic == pytest.approx(fd, rel=5e-2)

    opt = PosthocOptimizer(robot, PosthocConfig(barrier_d=0.1, w_coll=1e4))
    before = scene.clearance(robot.rollout(state, chunk).positions[:8]).min()
    fixed, info = opt.optimize(state, chunk, sdf, 8)
    after = scene.clearance(robot.rollout(state, fixed).positions[:8]).min()
    assert after > before and not info["diverged"]
    assert np.array_equal(fixed[8:], chunk[8:])


def test_jsonl_round_trip(tmp_path):
    append_jsonl(tmp_path / "r.jsonl", {"a": 1})
    append_jsonl(tmp_path / "r.jsonl", {"b": [1.5]})
    assert read_jsonl(tmp_path / "r.jsonl") == [{"a": 1}, {"b": [1.5]}]
