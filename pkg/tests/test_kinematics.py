import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowguide import FreeGripper, PlanarArm, PointRobot, RobotState
from flowguide.kinematics import (exp_so3, left_jacobian_so3, load_robot, log_so3, quat_to_matrix,
                                  rollout_relative, save_robot, skew)

chunk_entries = st.floats(-20, 20, allow_nan=False)


def test_zero_chunk_is_constant(gripper_state):
    traj = FreeGripper().rollout(gripper_state, np.zeros((4, 7)))
    assert np.allclose(traj.positions[:, 0], gripper_state.position)
    assert np.allclose(traj.rotations, gripper_state.rotation)


def test_position_recurrence_by_hand():
    chunk = np.zeros((3, 7))
    chunk[:, 0] = 1.0
    traj = FreeGripper().rollout(RobotState.gripper([0.0, 0.0, 0.0]), chunk)
    assert np.allclose(traj.ee_positions[:, 0], [0.011, 0.022, 0.033], atol=1e-15)


def test_quarter_turn_about_z():
    robot = FreeGripper(probe_points=[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)])
    chunk = np.zeros((1, 7))
    chunk[0, 5] = np.pi / (2 * 0.15)
    traj = robot.rollout(RobotState.gripper([0.0, 0.0, 0.0]), chunk)
    assert np.allclose(traj.positions[0, 1], [0.0, 1.0, 0.0], atol=1e-12)


def test_rollout_validation(gripper_state):
    with pytest.raises(ValueError):
        FreeGripper().rollout(gripper_state, np.full((2, 7), np.nan))
    with pytest.raises(ValueError):
        FreeGripper(gamma_x=[0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        RobotState(position=[0, 0, 0], rotation=np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        RobotState(position=[0, 0, 0], rotation=[1.0, 0.0, 0.0, 0.1])


def test_exp_log_round_trip_and_series():
    rng = np.random.default_rng(0)
    for w in list(rng.normal(size=(20, 3))) + [np.array([1e-9, -2e-9, 0.0]), np.zeros(3)]:
        R = exp_so3(w)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        if np.linalg.norm(w) < np.pi:
            assert np.allclose(log_so3(R), w, atol=1e-9)
    # series branch agrees with the closed form near its threshold
    w = np.array([1e-3, 0.0, 0.0])
    assert np.allclose(exp_so3(w), np.eye(3) + skew(w) * np.sin(1e-3) / 1e-3
                       + skew(w) @ skew(w) * (1 - np.cos(1e-3)) / 1e-6, atol=1e-15)


def test_left_jacobian_differentiates_exp():
    rng = np.random.default_rng(1)
    w, u = rng.normal(size=3), rng.normal(size=3)
    h = 1e-7
    dR = (exp_so3(w + h * u) - exp_so3(w - h * u)) / (2 * h)
    # d/dt exp(w + t u) = skew(J_l(w) u) exp(w)
    assert np.allclose(dR, skew(left_jacobian_so3(w) @ u) @ exp_so3(w), atol=1e-7)


def test_quaternion_state():
    q = np.array([np.cos(0.3), 0.0, 0.0, np.sin(0.3)])
    assert np.allclose(quat_to_matrix(q), exp_so3([0.0, 0.0, 0.6]))
    assert np.allclose(RobotState(position=[0, 0, 0], rotation=q).rotation, exp_so3([0.0, 0.0, 0.6]))


def _adjoint_gap(robot, state, chunk, rng):
    u = rng.normal(size=chunk.shape)
    traj = robot.rollout(state, chunk)
    Gp = rng.normal(size=traj.positions.shape)
    GR = rng.normal(size=traj.rotations.shape)
    h = 1e-20
    t = robot.rollout(state, chunk + 1j * h * u)
    jvp = np.sum(t.positions.imag / h * Gp) + np.sum(t.rotations.imag / h * GR)
    return abs(jvp - np.sum(robot.vjp(state, chunk, Gp, GR) * u)) / max(abs(jvp), 1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (5, 7), elements=chunk_entries))
def test_gripper_adjoint(chunk):
    rng = np.random.default_rng(2)
    state = RobotState.gripper([0.1, 0.2, 0.3], [0.3, -0.2, 0.1])
    assert _adjoint_gap(FreeGripper(), state, chunk, rng) < 1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 3), elements=st.floats(-3, 3)))
def test_planar_arm_adjoint(chunk):
    rng = np.random.default_rng(3)
    arm = PlanarArm([0.4, 0.3, 0.2], gamma_q=0.5)
    state = RobotState(joints=[0.1, -0.2, 0.3])
    u = rng.normal(size=chunk.shape)
    G = rng.normal(size=arm.rollout(state, chunk).positions.shape)
    h = 1e-20
    jvp = np.sum(arm.rollout(state, chunk + 1j * h * u).positions.imag / h * G)
    assert abs(jvp - np.sum(arm.vjp(state, chunk, G) * u)) < 1e-9 * max(abs(jvp), 1.0)


def test_gripper_vjp_matches_differences(gripper_state):
    rng = np.random.default_rng(4)
    robot = FreeGripper()
    chunk = rng.normal(size=(6, 7))
    G = rng.normal(size=robot.rollout(gripper_state, chunk).positions.shape)
    fd = np.zeros_like(chunk)
    for idx in np.ndindex(chunk.shape):
        cp, cm = chunk.copy(), chunk.copy()
        cp[idx] += 1e-6
        cm[idx] -= 1e-6
        fd[idx] = (np.sum(robot.rollout(gripper_state, cp).positions * G)
                   - np.sum(robot.rollout(gripper_state, cm).positions * G)) / 2e-6
    g = robot.vjp(gripper_state, chunk, G)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_single_step_position_gradient(gripper_state):
    robot = FreeGripper()
    G = np.zeros((1, 3, 3))
    G[0, 0] = [1.0, -2.0, 3.0]
    g = robot.vjp(gripper_state, np.zeros((1, 7)), G)
    assert np.allclose(g[0, :3], robot.gamma_x * G[0, 0])
    assert np.all(robot.vjp(gripper_state, np.ones((3, 7)), np.zeros((3, 3, 3))) == 0)


def test_vjp_shape_mismatch(gripper_state):
    with pytest.raises(ValueError):
        FreeGripper().vjp(gripper_state, np.zeros((3, 7)), np.zeros((2, 3, 3)))


def test_batched_matches_single(gripper_state):
    rng = np.random.default_rng(5)
    robot = FreeGripper()
    chunks = rng.normal(size=(4, 5, 7))
    batched = robot.rollout(gripper_state, chunks)
    G = rng.normal(size=batched.positions.shape)
    vb = robot.vjp(gripper_state, chunks, G)
    for i in range(4):
        single = robot.rollout(gripper_state, chunks[i])
        assert np.allclose(single.positions, batched.positions[i], atol=1e-14)
        assert np.allclose(robot.vjp(gripper_state, chunks[i], G[i]), vb[i], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (8, 7), elements=st.floats(-1e4, 1e4)), st.integers(1, 8))
def test_rotations_orthonormal_and_local(chunk, k):
    state = RobotState.gripper([0.0, 0.0, 0.0])
    full = FreeGripper().rollout(state, chunk)
    R = full.rotations
    assert np.allclose(R @ np.swapaxes(R, -1, -2), np.eye(3), atol=1e-8)
    head = FreeGripper().rollout(state, chunk[:k])
    assert np.array_equal(head.positions, full.positions[:k])


def test_planar_forward_kinematics():
    arm = PlanarArm([1.0, 1.0])
    assert np.allclose(arm.forward_kinematics([0.0, 0.0])[-1], [2.0, 0.0, 0.0])
    assert np.allclose(arm.forward_kinematics([np.pi / 2, 0.0])[-1], [0.0, 2.0, 0.0], atol=1e-15)


def test_planar_against_transform_chain():
    rng = np.random.default_rng(6)
    lengths = [0.5, 0.3, 0.2, 0.4]
    arm = PlanarArm(lengths, base=(0.1, -0.2, 0.3), base_angle=0.4)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 4)
        T = np.eye(3)
        T[:2, 2] = [0.1, -0.2]
        c, s = np.cos(0.4), np.sin(0.4)
        T = T @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        for qi, li in zip(q, lengths):
            c, s = np.cos(qi), np.sin(qi)
            T = T @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.array([[1, 0, li], [0, 1, 0], [0, 0, 1]])
        assert np.allclose(arm.forward_kinematics(q)[-1], [T[0, 2], T[1, 2], 0.3], atol=1e-12)


def test_point_robot_and_module_functions(gripper_state):
    chunk = np.arange(6.0).reshape(2, 3)
    traj = PointRobot().rollout(None, chunk)
    assert np.array_equal(traj.positions[:, 0], chunk)
    a = rollout_relative(FreeGripper(), gripper_state, np.ones((2, 7)))
    b = FreeGripper().rollout(gripper_state, np.ones((2, 7)))
    assert np.array_equal(a.positions, b.positions)


def test_chunk_from_poses_round_trip(gripper_state):
    robot = FreeGripper()
    path = gripper_state.position + np.cumsum(np.full((5, 3), 0.01), axis=0)
    chunk = robot.chunk_from_poses(gripper_state, path)
    assert np.allclose(robot.rollout(gripper_state, chunk).ee_positions, path, atol=1e-9)


def test_robot_file_round_trip(tmp_path):
    for robot in (FreeGripper(), PlanarArm([0.3, 0.2], base=(0, 0, 0.1))):
        save_robot(robot, tmp_path / "r.json")
        back = load_robot(tmp_path / "r.json")
        assert back.to_dict() == robot.to_dict()
    assert json.loads((tmp_path / "r.json").read_text())["variant"] == "planar-arm"
