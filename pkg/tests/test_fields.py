import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowguide import (CartesianTrajectory, CollisionField, FreeGripper, GmmPolicy, GuidanceChain,
                       HumanTrajectoryField, LatentDecoder, PointCloud, PointRobot, SemanticField,
                       build_occupancy, compute_sdf, monotonic_align)
from flowguide.fields import field_from_config, read_demo_csv, write_demo_csv
from flowguide.kinematics import exp_so3

coords = st.floats(-1, 1, allow_nan=False)


def _traj(points, rotations=None):
    pos = np.asarray(points, dtype=float).reshape(-1, 1, 3)
    rot = np.broadcast_to(np.eye(3), (len(pos), 3, 3)) if rotations is None else rotations
    return CartesianTrajectory(pos, np.asarray(rot, dtype=float))


def _wall_sdf():
    # occupied plane of voxels at x in [0, 0.05); free space for x > 0.05
    voxel = 0.05
    yz = (np.stack(np.meshgrid(np.arange(20), np.arange(20)), -1).reshape(-1, 2) + 0.5) * voxel
    pts = np.column_stack([np.full(len(yz), 0.025), yz])
    return compute_sdf(build_occupancy(PointCloud(pts), voxel, (np.zeros(3), np.ones(3))), 0.15)


def _fd(f, x, h=1e-6):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2 * h)
    return out


def test_collision_magnitude_and_direction():
    sdf = _wall_sdf()
    field = CollisionField(sdf=sdf, barrier_d=0.15)
    # node centre two voxels from the wall sits at sdf 0.1
    x = np.array([0.125, 0.525, 0.525])
    e, gx, _ = field.gradient(_traj([x]))
    assert e == pytest.approx(-np.log(0.1))
    # descending the energy pushes away from the wall, magnitude 1 / sdf
    assert np.allclose(-gx[0, 0], [10.0, 0.0, 0.0], atol=1e-9)


def test_collision_zero_beyond_margin_and_without_obstacles():
    sdf = _wall_sdf()
    far = _traj([[0.6, 0.5, 0.5], [0.9, 0.1, 0.2]])
    e, gx, _ = CollisionField(sdf=sdf, barrier_d=0.15).gradient(far)
    assert e == 0 and np.all(gx == 0)
    e, gx, _ = CollisionField(sdf=None).gradient(far)
    assert e == 0 and np.all(gx == 0)


def test_collision_floor_keeps_energy_finite():
    sdf = _wall_sdf()
    e, gx, _ = CollisionField(sdf=sdf, floor_eps=1e-4).gradient(_traj([[0.025, 0.525, 0.525]]))
    assert np.isfinite(e) and e == pytest.approx(-np.log(1e-4))
    assert np.all(np.isfinite(gx))


def test_collision_batched_matches_single():
    sdf = _wall_sdf()
    field = CollisionField(sdf=sdf)
    pts = np.random.default_rng(0).uniform(0.06, 0.3, (4, 5, 1, 3))
    batched = CartesianTrajectory(pts, np.broadcast_to(np.eye(3), (4, 5, 3, 3)))
    e, gx, _ = field.gradient(batched)
    for i in range(4):
        ei, gi, _ = field.gradient(CartesianTrajectory(pts[i], batched.rotations[i]))
        assert e[i] == pytest.approx(ei, rel=1e-12)
        assert np.allclose(gx[i], gi, atol=1e-12)


def test_semantic_closed_form():
    target = np.array([0.3, -0.1, 0.5])
    field = SemanticField(target=target, sigma=0.2)
    x = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, 0.3]])
    e, gx, _ = field.gradient(_traj(x))
    assert e == pytest.approx(np.sum((x[-1] - target) ** 2) / (2 * 0.04))
    assert np.allclose(gx[-1, 0], (x[-1] - target) / 0.04)
    assert np.all(gx[0] == 0)
    all_steps = SemanticField(target=target, sigma=0.2, steps="all").energy(_traj(x))
    assert all_steps == pytest.approx(np.sum((x - target) ** 2) / 0.08)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (3, 3), elements=coords), arrays(float, 3, elements=coords),
       st.sampled_from(["squared", "plain"]))
def test_semantic_orientation_gradient(x, w, norm):
    target = np.array([1.5, 1.5, 1.5])
    rot = np.stack([exp_so3(w * (k + 1)) for k in range(3)])
    field = SemanticField(target=target, sigma=0.3, steps="all", orientation=True,
                          orientation_scale=1.0, orientation_norm=norm)
    _, gx, gR = field.gradient(_traj(x, rot))
    fd_x = _fd(lambda y: float(field.energy(_traj(y, rot))), x)
    fd_R = _fd(lambda R: float(field.energy(_traj(x, R))), rot)
    assert np.allclose(gx[:, 0], fd_x, atol=1e-5)
    assert np.allclose(gR, fd_R, atol=1e-5)


def test_orientation_zero_when_aligned():
    target = np.array([0.0, 0.0, 1.0])
    field = SemanticField(target=target, orientation=True, orientation_scale=1.0)
    e_aligned = field.energy(_traj([[0.0, 0.0, 0.0]]))
    e_flipped = field.energy(_traj([[0.0, 0.0, 0.0]], [exp_so3([np.pi, 0.0, 0.0])]))
    assert e_aligned == pytest.approx(np.sum(target**2) / (2 * 0.01))
    assert e_flipped - e_aligned == pytest.approx(2.0)
    with pytest.raises(ValueError):
        SemanticField(orientation=True, approach_axis=(0.0, 0.0, 2.0)).energy(_traj([[0.1, 0, 0]]))


def test_monotonic_align_examples():
    ref = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
    assert monotonic_align([[0.1, 0, 0], [0.9, 0, 0], [2.1, 0, 0], [5, 0, 0]], ref) == [(0, 0), (1, 1), (2, 2)]
    # a later step close to an earlier reference point cannot move backwards
    assert monotonic_align([[1, 0, 0], [0, 0, 0]], ref) == [(0, 1), (1, 1)]
    # ties go to the smallest index
    assert monotonic_align([[0.5, 0, 0]], ref) == [(0, 0)]
    assert monotonic_align([[3, 0, 0], [0, 0, 0]], [[1, 0, 0]]) == [(0, 0)]
    with pytest.raises(ValueError):
        monotonic_align(np.zeros((0, 3)), ref)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 3), elements=coords), arrays(float, (4, 3), elements=coords))
def test_alignment_properties(x, ref):
    pairs = monotonic_align(x, ref)
    steps = [t for t, _ in pairs]
    ks = [k for _, k in pairs]
    assert steps == list(range(len(steps)))
    assert ks == sorted(ks)
    assert len(pairs) == len(x) or ks[-1] == len(ref) - 1
    for t, k in pairs:
        prev = ks[t - 1] if t else 0
        d = np.sum((ref[prev:] - x[t]) ** 2, axis=1)
        assert k == prev + int(np.argmin(d))


def test_human_field_unmatched_steps_get_no_gradient():
    ref = [[0, 0, 0], [0.1, 0, 0]]
    x = np.array([[0.01, 0, 0], [0.12, 0, 0], [0.5, 0.5, 0.5]])
    e, gx, _ = HumanTrajectoryField(reference=ref, sigma=0.1).gradient(_traj(x))
    assert e == pytest.approx((0.01**2 + 0.02**2) / 0.02)
    assert np.allclose(gx[0, 0], [1.0, 0, 0]) and np.allclose(gx[1, 0], [2.0, 0, 0])
    assert np.all(gx[2] == 0)
    with pytest.raises(ValueError):
        HumanTrajectoryField(reference=[[np.nan, 0, 0]]).energy(_traj(x))


def test_chain_weight_resolution():
    chain = GuidanceChain([SemanticField(weight=2.0), HumanTrajectoryField()], PointRobot())
    assert chain.resolve_weights() == [2.0, 1.0]
    assert chain.resolve_weights({"human": 0.0}) == [2.0, 0.0]
    with pytest.raises(ValueError):
        chain.resolve_weights({"nope": 1.0})
    with pytest.raises(ValueError):
        chain.resolve_weights({"human": -1.0})
    with pytest.raises(ValueError):
        GuidanceChain([SemanticField(), SemanticField()], PointRobot())


def test_chain_gradient_matches_differences(gripper_state):
    rng = np.random.default_rng(1)
    target = gripper_state.position + np.array([0.02, -0.01, 0.03])
    fields = [SemanticField(target=target, sigma=0.05, steps="all", orientation=True),
              HumanTrajectoryField(reference=target + rng.normal(0, 0.01, (5, 3)), sigma=0.05)]
    chain = GuidanceChain(fields, FreeGripper(), gripper_state)
    a, v, tau = rng.normal(size=(4, 7)), rng.normal(size=(4, 7)), 0.4
    g = chain.composite_gradient(a, tau, v, weights=[1.0, 0.5], jacobian="identity")
    fd = _fd(lambda y: float(chain.total_energy(y + (1 - tau) * v, [1.0, 0.5])), a)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)
    scaled = chain.composite_gradient(a, tau, v, weights=[1.0, 0.5])
    assert np.allclose(scaled, (1 - tau) * g)
    assert np.all(chain.composite_gradient(a, tau, v, weights=[0.0, 0.0]) == 0)


def test_exact_jacobian_uses_policy(gripper_state):
    rng = np.random.default_rng(2)
    pol = GmmPolicy.from_components([0.5, 0.5], rng.normal(size=(2, 6)), [0.5, 0.8], (2, 3))
    chain = GuidanceChain([SemanticField(target=[0.3, 0.1, 0.2], sigma=0.5)], PointRobot())
    a, tau = rng.normal(size=(2, 3)), 0.3
    v = pol.velocity(a, tau)
    g = chain.composite_gradient(a, tau, v, policy=pol, jacobian="exact")
    fd = _fd(lambda y: float(chain.energy_at(y, tau, pol)), a)
    assert np.allclose(g, fd, atol=1e-5)


def test_decoder_in_chain():
    rng = np.random.default_rng(3)
    dec = LatentDecoder("affine", rng.normal(size=(4, 3)), rng.normal(size=3))
    chain = GuidanceChain([SemanticField(target=[0.5, 0.5, 0.5], sigma=0.3, steps="all")],
                          PointRobot(), decoder=dec)
    a = rng.normal(size=(4, 4))
    g = chain.composite_gradient(a, 1.0, np.zeros_like(a))
    fd = _fd(lambda y: float(chain.total_energy(y)), a)
    assert np.allclose(g, fd, atol=1e-5)


def test_field_from_config_and_demo_file(tmp_path):
    pts = np.random.default_rng(4).normal(size=(5, 3))
    write_demo_csv(tmp_path / "demo.csv", pts[::-1], times=np.arange(5)[::-1])
    assert np.array_equal(read_demo_csv(tmp_path / "demo.csv"), pts)
    human = field_from_config("human", {"demo_file": str(tmp_path / "demo.csv"), "sigma": 0.1})
    assert np.array_equal(human.reference, pts) and human.field_id == "human"
    sem = field_from_config("semantic", {"target": [1, 2, 3]})
    assert sem.field_id == "semantic"
    assert field_from_config("collision", {"barrier_d": 0.1}).barrier_d == 0.1
    with pytest.raises(ValueError):
        field_from_config("magnetic", {})
    (tmp_path / "empty.csv").write_text("t,x,y,z\n")
    with pytest.raises(ValueError):
        read_demo_csv(tmp_path / "empty.csv")
