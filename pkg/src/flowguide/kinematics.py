"""Differentiable robot models mapping action chunks to probe-point trajectories.

Three variants share one interface (``rollout``, ``vjp``, ``probe_positions``):

* :class:`FreeGripper` -- relative Cartesian actions ``(dx, dr, gripper)``
  integrated with the Euler recurrence ``x_i = x_{i-1} + gamma_x * dx_i``,
  ``R_i = Exp(gamma_r * dr_i) R_{i-1}``.
* :class:`PlanarArm` -- relative joint actions on a serial planar chain.
* :class:`PointRobot` -- identity kinematics; each chunk row is a position.

Rollouts avoid operations that break complex-step differentiation, so
``rollout(state, chunk + 1e-30j * u).imag / 1e-30`` is an exact JVP.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _fastpath

# Below this squared angle the rotation coefficients switch to Taylor series.
_SMALL_TH2 = 1e-6

DEFAULT_POSITION_SCALE = (0.011, 0.011, 0.02)
DEFAULT_ROTATION_SCALE = (0.15, 0.15, 0.15)


def skew(w):
    w = np.asarray(w)
    z = np.zeros_like(w[..., 0])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
        np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
        np.stack([-w[..., 1], w[..., 0], z], axis=-1),
    ], axis=-2)


def _rotation_coeffs(w):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 for t = |w|, complex-safe."""
    th2 = np.sum(w * w, axis=-1)
    small = np.abs(th2) < _SMALL_TH2
    safe = np.where(small, 1.0, th2)
    th = np.sqrt(safe)
    a = np.where(small, 1 - th2 / 6 + th2 ** 2 / 120 - th2 ** 3 / 5040, np.sin(th) / th)
    b = np.where(small, 0.5 - th2 / 24 + th2 ** 2 / 720 - th2 ** 3 / 40320, (1 - np.cos(th)) / safe)
    c = np.where(small, 1 / 6 - th2 / 120 + th2 ** 2 / 5040 - th2 ** 3 / 362880,
                 (th - np.sin(th)) / (safe * th))
    return a, b, c


def exp_so3(w):
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    w = np.asarray(w)
    a, b, _ = _rotation_coeffs(w)
    K = skew(w)
    I = np.eye(3)
    return I + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian_so3(w):
    """J with Exp(w + dw) ~= Exp(J dw) Exp(w)."""
    w = np.asarray(w)
    _, b, c = _rotation_coeffs(w)
    K = skew(w)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def log_so3(R):
    """Axis-angle vector of a rotation matrix (single matrix)."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * v


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) to a rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class RobotState:
    """Free-gripper pose (``position``, ``rotation``) or planar-arm ``joints``."""

    position: Optional[np.ndarray] = None
    rotation: Optional[np.ndarray] = None
    joints: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=float)
            if rot.shape == (4,):
                if abs(np.linalg.norm(rot) - 1.0) > 1e-8:
                    raise ValueError("quaternion must be unit-norm")
                rot = quat_to_matrix(rot)
            elif rot.shape == (3,):
                rot = exp_so3(rot)
            if rot.shape != (3, 3) or np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-8:
                raise ValueError("rotation must be orthonormal")
            self.rotation = rot
        if self.joints is not None:
            self.joints = np.asarray(self.joints, dtype=float).reshape(-1)

    @classmethod
    def gripper(cls, position, rotation=None):
        return cls(position=position, rotation=np.eye(3) if rotation is None else rotation)


@dataclass
class CartesianTrajectory:
    """Probe positions (..., H, P, 3) and end-effector rotations (..., H, 3, 3)."""

    positions: np.ndarray
    rotations: np.ndarray
    ee_index: int = 0

    @property
    def horizon(self):
        return self.positions.shape[-3]

    @property
    def n_probes(self):
        return self.positions.shape[-2]

    @property
    def ee_positions(self):
        return self.positions[..., self.ee_index, :]


def _revcumsum(x, axis):
    return np.flip(np.cumsum(np.flip(x, axis=axis), axis=axis), axis=axis)


class FreeGripper:
    """Floating gripper driven by relative Cartesian actions.

    Chunk rows are ``(dx[3], dr[3], gripper, ...)``; extra columns are carried
    but do not move the robot. Probe points are in the gripper frame; the
    default is the tip plus two finger points, tip being the end effector.
    """

    variant = "free-gripper"

    def __init__(self, gamma_x=DEFAULT_POSITION_SCALE, gamma_r=DEFAULT_ROTATION_SCALE, probe_points=None,
                 ee_index=0, approach_axis=(0.0, 0.0, 1.0)):
        self.gamma_x = np.asarray(gamma_x, dtype=float).reshape(3)
        self.gamma_r = np.asarray(gamma_r, dtype=float).reshape(3)
        if np.any(self.gamma_x <= 0) or np.any(self.gamma_r <= 0):
            raise ValueError("gamma entries must be positive")
        if probe_points is None:
            probe_points = [(0.0, 0.0, 0.0), (0.0, 0.04, -0.03), (0.0, -0.04, -0.03)]
        self.probe_points = np.asarray(probe_points, dtype=float).reshape(-1, 3)
        self.ee_index = int(ee_index)
        if not 0 <= self.ee_index < len(self.probe_points):
            raise ValueError("ee_index must name one of the probe points")
        self.approach_axis = np.asarray(approach_axis, dtype=float)

    def to_dict(self):
        return {"variant": self.variant, "gamma_x": self.gamma_x.tolist(),
                "gamma_r": self.gamma_r.tolist(), "probe_points": self.probe_points.tolist(),
                "ee_index": self.ee_index, "approach_axis": self.approach_axis.tolist()}

    def _increments(self, chunk):
        if chunk.shape[-1] < 6:
            raise ValueError("free-gripper chunks need at least 6 columns (dx, dr)")
        dx = chunk[..., :3] * self.gamma_x
        E = exp_so3(chunk[..., 3:6] * self.gamma_r)
        return dx, E

    def _rotations(self, state, E):
        R = np.empty(E.shape, dtype=E.dtype)
        prev = state.rotation
        for i in range(E.shape[-3]):
            prev = E[..., i, :, :] @ prev
            R[..., i, :, :] = prev
        return R

    def rollout(self, state, chunk):
        chunk = np.asarray(chunk)
        if not np.all(np.isfinite(chunk)):
            raise ValueError("chunk contains non-finite entries")
        if chunk.ndim == 2 and chunk.dtype == np.float64 and chunk.shape[-1] >= 6:
            pos, R = _fastpath.gripper_rollout(state.position, state.rotation, chunk, self.gamma_x,
                                               self.gamma_r, self.probe_points)
            return CartesianTrajectory(pos, R, self.ee_index)
        dx, E = self._increments(chunk)
        pos = state.position + np.cumsum(dx, axis=-2)
        R = self._rotations(state, E)
        probes = pos[..., None, :] + np.swapaxes(R @ self.probe_points.T, -1, -2)
        return CartesianTrajectory(probes, R, self.ee_index)

    def vjp(self, state, chunk, cot_positions, cot_rotations=None):
        """Gradient on the chunk given cotangents on positions and rotations.

        Cotangents may carry extra leading axes that broadcast against the chunk.
        """
        chunk = np.asarray(chunk, dtype=float)
        G = np.asarray(cot_positions, dtype=float)
        H = chunk.shape[-2]
        if G.shape[-3:] != (H, len(self.probe_points), 3):
            raise ValueError(f"position cotangent shape {G.shape} does not match trajectory")
        if chunk.ndim == 2 and chunk.shape[-1] >= 6:
            lead = G.shape[:-3]
            Gf = np.ascontiguousarray(G.reshape((-1,) + G.shape[-3:]))
            if cot_rotations is None:
                GRf = np.zeros((len(Gf), H, 3, 3))
            else:
                GRf = np.ascontiguousarray(np.broadcast_to(
                    np.asarray(cot_rotations, dtype=float), lead + (H, 3, 3)).reshape(-1, H, 3, 3))
            out = _fastpath.gripper_vjp(state.rotation, chunk, self.gamma_x, self.gamma_r,
                                        self.probe_points, Gf, GRf)
            return out.reshape(lead + chunk.shape)
        w_rot = chunk[..., 3:6] * self.gamma_r
        E = exp_so3(w_rot)
        R = self._rotations(state, E)
        g_pos = G.sum(axis=-2)
        grad_dx = _revcumsum(g_pos, axis=-2) * self.gamma_x
        GR = np.swapaxes(G, -1, -2) @ self.probe_points
        if cot_rotations is not None:
            GR = GR + np.asarray(cot_rotations, dtype=float)
        lead = np.broadcast_shapes(GR.shape[:-3], E.shape[:-3])
        w = np.empty(lead + (H, 3))
        gbar = None
        for i in range(H - 1, -1, -1):
            gi = GR[..., i, :, :]
            if gbar is None:
                gbar = np.broadcast_to(gi, lead + (3, 3))
            else:
                gbar = gi + np.swapaxes(E[..., i + 1, :, :], -1, -2) @ gbar
            prev = R[..., i - 1, :, :] if i > 0 else state.rotation
            M = gbar @ np.swapaxes(prev, -1, -2) @ np.swapaxes(E[..., i, :, :], -1, -2)
            w[..., i, 0] = M[..., 2, 1] - M[..., 1, 2]
            w[..., i, 1] = M[..., 0, 2] - M[..., 2, 0]
            w[..., i, 2] = M[..., 1, 0] - M[..., 0, 1]
        Jl = left_jacobian_so3(w_rot)
        grad_dr = np.einsum("...ji,...j->...i", Jl, w) * self.gamma_r
        out = np.zeros(np.broadcast_shapes(lead + (H, 3), grad_dx.shape)[:-1] + (chunk.shape[-1],))
        out[..., :3] = grad_dx
        out[..., 3:6] = grad_dr
        return out

    def probe_positions(self, state):
        return state.position + self.probe_points @ state.rotation.T

    def state_at(self, traj, step):
        """Robot state after ``step`` (0-based) of an unbatched rollout."""
        pos = traj.ee_positions[step] - traj.rotations[step] @ self.probe_points[self.ee_index]
        return RobotState(position=pos, rotation=traj.rotations[step])

    def chunk_from_poses(self, state, positions, rotations=None, action_dim=7):
        """Invert the rollout recurrence: poses (H, 3) [+ (H, 3, 3)] to a chunk."""
        positions = np.asarray(positions, dtype=float)
        H = positions.shape[0]
        chunk = np.zeros((H, action_dim))
        prev = state.position
        for i in range(H):
            chunk[i, :3] = (positions[i] - prev) / self.gamma_x
            prev = positions[i]
        if rotations is not None:
            prev_r = state.rotation
            for i in range(H):
                chunk[i, 3:6] = log_so3(rotations[i] @ prev_r.T) / self.gamma_r
                prev_r = rotations[i]
        return chunk


def _rot_z(phi):
    c, s = np.cos(phi), np.sin(phi)
    z = np.zeros_like(phi)
    o = np.ones_like(phi)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


class PlanarArm:
    """Serial planar arm in the plane ``z = base[2]``.

    Chunk rows are joint-angle increments integrated as
    ``q_i = q_{i-1} + gamma_q * dq_i``. Probe points are each link's midpoint
    followed by the tip, which is the end effector.
    """

    variant = "planar-arm"

    def __init__(self, link_lengths, base=(0.0, 0.0, 0.0), base_angle=0.0, gamma_q=1.0):
        self.link_lengths = np.asarray(link_lengths, dtype=float).reshape(-1)
        if len(self.link_lengths) == 0 or np.any(self.link_lengths <= 0):
            raise ValueError("link lengths must be positive")
        self.base = np.asarray(base, dtype=float).reshape(3)
        self.base_angle = float(base_angle)
        self.gamma_q = float(gamma_q)
        if self.gamma_q <= 0:
            raise ValueError("gamma_q must be positive")
        self.ee_index = len(self.link_lengths)

    @property
    def n_links(self):
        return len(self.link_lengths)

    def to_dict(self):
        return {"variant": self.variant, "link_lengths": self.link_lengths.tolist(),
                "base": self.base.tolist(), "base_angle": self.base_angle, "gamma_q": self.gamma_q}

    def _coeffs(self):
        # position of probe p = base + sum_j C[p, j] * (cos phi_j, sin phi_j)
        n = self.n_links
        C = np.zeros((n + 1, n))
        for i in range(n):
            C[i, :i] = self.link_lengths[:i]
            C[i, i] = self.link_lengths[i] / 2.0
        C[n, :] = self.link_lengths
        return C

    def forward_kinematics(self, angles):
        """Probe positions (..., n_links + 1, 3) for joint angles (..., n_links)."""
        angles = np.asarray(angles)
        if angles.shape[-1] != self.n_links:
            raise ValueError(f"expected {self.n_links} joint angles, got {angles.shape[-1]}")
        phi = self.base_angle + np.cumsum(angles, axis=-1)
        C = self._coeffs()
        x = np.cos(phi) @ C.T
        y = np.sin(phi) @ C.T
        z = np.zeros_like(x)
        return self.base + np.stack([x, y, z], axis=-1)

    def rollout(self, state, chunk):
        chunk = np.asarray(chunk)
        if not np.all(np.isfinite(chunk)):
            raise ValueError("chunk contains non-finite entries")
        if chunk.shape[-1] != self.n_links:
            raise ValueError(f"planar-arm chunks need {self.n_links} columns")
        q = state.joints + self.gamma_q * np.cumsum(chunk, axis=-2)
        pos = self.forward_kinematics(q)
        rot = _rot_z(self.base_angle + np.sum(q, axis=-1))
        return CartesianTrajectory(pos, rot, self.ee_index)

    def vjp(self, state, chunk, cot_positions, cot_rotations=None):
        chunk = np.asarray(chunk, dtype=float)
        G = np.asarray(cot_positions, dtype=float)
        q = state.joints + self.gamma_q * np.cumsum(chunk, axis=-2)
        phi = self.base_angle + np.cumsum(q, axis=-1)
        C = self._coeffs()
        # d/dphi_j of C[p, j] (cos, sin) = C[p, j] (-sin, cos)
        gx = G[..., 0] @ C
        gy = G[..., 1] @ C
        g_phi = -np.sin(phi) * gx + np.cos(phi) * gy
        if cot_rotations is not None:
            Gr = np.asarray(cot_rotations, dtype=float)
            tip = phi[..., -1]
            c, s = np.cos(tip), np.sin(tip)
            dR = (Gr[..., 0, 0] * -s + Gr[..., 0, 1] * -c + Gr[..., 1, 0] * c + Gr[..., 1, 1] * -s)
            g_phi = g_phi.copy()
            g_phi[..., -1] += dR
        g_q = _revcumsum(g_phi, axis=-1)
        return self.gamma_q * _revcumsum(g_q, axis=-2)

    def probe_positions(self, state):
        return self.forward_kinematics(state.joints)


class PointRobot:
    """Identity kinematics: row ``i`` of the chunk is the end-effector position.

    Rows shorter than 3 are zero-padded; rows longer than 3 use the first three
    entries. The robot state is ignored.
    """

    variant = "point"
    ee_index = 0

    def to_dict(self):
        return {"variant": self.variant}

    def rollout(self, state, chunk):
        chunk = np.asarray(chunk)
        d = min(chunk.shape[-1], 3)
        pos = np.zeros(chunk.shape[:-1] + (3,), dtype=chunk.dtype)
        pos[..., :d] = chunk[..., :d]
        rot = np.broadcast_to(np.eye(3), chunk.shape[:-1] + (3, 3))
        return CartesianTrajectory(pos[..., None, :], rot, 0)

    def vjp(self, state, chunk, cot_positions, cot_rotations=None):
        chunk = np.asarray(chunk, dtype=float)
        G = np.asarray(cot_positions, dtype=float).sum(axis=-2)
        d = min(chunk.shape[-1], 3)
        out = np.zeros(G.shape[:-1] + (chunk.shape[-1],))
        out[..., :d] = G[..., :d]
        return out

    def probe_positions(self, state):
        if state is None or state.position is None:
            return np.zeros((1, 3))
        return state.position[None, :]


def rollout_relative(model, state, chunk, gamma_x=None, gamma_r=None):
    """Free-gripper rollout, optionally overriding the model's gamma vectors."""
    if gamma_x is not None or gamma_r is not None:
        model = FreeGripper(model.gamma_x if gamma_x is None else gamma_x,
                            model.gamma_r if gamma_r is None else gamma_r,
                            model.probe_points, model.ee_index, model.approach_axis)
    return model.rollout(state, chunk)


def forward_kinematics(model, angles):
    return model.forward_kinematics(angles)


def vjp(model, state, chunk, cot_positions, cot_rotations=None):
    return model.vjp(state, chunk, cot_positions, cot_rotations)


def robot_from_dict(doc):
    variant = doc.get("variant")
    if variant == "free-gripper":
        return FreeGripper(doc.get("gamma_x", DEFAULT_POSITION_SCALE), doc.get("gamma_r", DEFAULT_ROTATION_SCALE),
                           doc.get("probe_points"), doc.get("ee_index", 0),
                           doc.get("approach_axis", (0.0, 0.0, 1.0)))
    if variant == "planar-arm":
        return PlanarArm(doc["link_lengths"], doc.get("base", (0.0, 0.0, 0.0)),
                         doc.get("base_angle", 0.0), doc.get("gamma_q", 1.0))
    if variant == "point":
        return PointRobot()
    raise ValueError(f"unknown robot variant {variant!r}")


def load_robot(path):
    with open(path) as fh:
        return robot_from_dict(json.load(fh))


def save_robot(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
