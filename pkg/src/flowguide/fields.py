"""Cartesian energy fields and the chain that pulls their gradients back to
noisy action chunks.

Every field maps a :class:`~flowguide.kinematics.CartesianTrajectory` with
arbitrary leading batch axes to one energy per batch element, and returns
gradients with respect to probe positions (..., H, P, 3) and, when it uses
them, end-effector rotations (..., H, 3, 3). Additive constants of the
negative log-likelihoods are dropped.
"""

import csv
import time

import numpy as np
from sklearn.base import BaseEstimator

from . import _fastpath
from ._validation import GuidanceError, check_positive, check_tau, check_vector3
from .flow import tweedie_clean_estimate
from .sdf import query_sdf_with_gradient

DEFAULT_BARRIER_D = 0.15
DEFAULT_FLOOR_EPS = 1e-4
DEFAULT_COLLISION_WEIGHT = 0.02
DEFAULT_SEMANTIC_WEIGHT = 5.0
DEFAULT_ORIENTATION_SCALE = 0.02
DEFAULT_HUMAN_WEIGHT = 1.0


class EnergyField(BaseEstimator):
    """Base class. Subclasses implement ``_evaluate(traj) -> (E, gx, gR)``."""

    uses_rotations = False
    stage = "field_eval"

    def energy(self, traj):
        return self._evaluate(traj, with_grad=False)[0]

    def gradient(self, traj):
        """``(energy, grad_positions, grad_rotations or None)``."""
        return self._evaluate(traj, with_grad=True)

    def _evaluate(self, traj, with_grad):
        raise NotImplementedError


class CollisionField(EnergyField):
    """Repulsive barrier ``-log(max(sdf, floor_eps))`` on probes with ``sdf <= barrier_d``.

    Acts on every probe point. ``sdf=None`` or an empty grid means no
    obstacles and zero energy.
    """

    stage = "sdf_query"

    def __init__(self, sdf=None, barrier_d=DEFAULT_BARRIER_D, floor_eps=DEFAULT_FLOOR_EPS,
                 weight=DEFAULT_COLLISION_WEIGHT, field_id="collision"):
        self.sdf = sdf
        self.barrier_d = barrier_d
        self.floor_eps = floor_eps
        self.weight = weight
        self.field_id = field_id

    def _evaluate(self, traj, with_grad):
        pos = traj.positions
        lead = pos.shape[:-3]
        if self.sdf is None or self.sdf.empty:
            return np.zeros(lead), (np.zeros(pos.shape) if with_grad else None), None
        dist, grad = query_sdf_with_gradient(self.sdf, pos)
        if with_grad and pos.ndim == 3 and pos.dtype == np.float64:
            energy, gx = _fastpath.log_barrier(dist.reshape(-1), grad.reshape(-1, 3),
                                               float(self.barrier_d), float(self.floor_eps))
            return np.float64(energy), gx.reshape(pos.shape), None
        inside = dist <= self.barrier_d
        floored = np.maximum(dist, self.floor_eps)
        per_point = np.where(inside, -np.log(floored), 0.0)
        energy = per_point.sum(axis=(-1, -2))
        if not with_grad:
            return energy, None, None
        gx = np.where(inside[..., None], -grad / floored[..., None], 0.0)
        return energy, gx, None


class SemanticField(EnergyField):
    """Gaussian attraction of the end effector to ``target``.

    ``steps`` is ``"final"`` (default), ``"all"`` or a list of step indices.
    With ``orientation=True`` the approach direction ``R @ approach_axis`` is
    also pulled toward the unit vector from the end effector to the target,
    scaled by ``orientation_scale``. ``orientation_norm="squared"`` uses
    ``|r - r*|^2 / (2 sigma_r^2)``; ``"plain"`` uses the unsquared norm.
    """

    def __init__(self, target=(0.0, 0.0, 0.0), sigma=0.1, weight=DEFAULT_SEMANTIC_WEIGHT,
                 steps="final", orientation=False, approach_axis=(0.0, 0.0, 1.0), sigma_r=1.0,
                 orientation_scale=DEFAULT_ORIENTATION_SCALE, orientation_norm="squared",
                 field_id="semantic"):
        self.target = target
        self.sigma = sigma
        self.weight = weight
        self.steps = steps
        self.orientation = orientation
        self.approach_axis = approach_axis
        self.sigma_r = sigma_r
        self.orientation_scale = orientation_scale
        self.orientation_norm = orientation_norm
        self.field_id = field_id

    @property
    def uses_rotations(self):
        return bool(self.orientation)

    def _step_mask(self, H):
        mask = np.zeros(H, dtype=bool)
        if self.steps == "final":
            mask[-1] = True
        elif self.steps == "all":
            mask[:] = True
        else:
            mask[np.asarray(self.steps, dtype=int)] = True
        return mask

    def _evaluate(self, traj, with_grad):
        target = check_vector3(self.target, "target")
        sigma = check_positive(self.sigma, "sigma")
        pos = traj.positions
        ee = traj.ee_index
        if self.steps == "final" and not self.orientation:
            diff = pos[..., -1, ee, :] - target
            energy = (diff * diff).sum(axis=-1) / (2 * sigma**2)
            gx = None
            if with_grad:
                gx = np.zeros(pos.shape)
                gx[..., -1, ee, :] = diff / sigma**2
            return energy, gx, None
        mask = self._step_mask(pos.shape[-3])
        x = pos[..., ee, :]
        diff = x - target
        sel = mask[:, None]
        energy = (np.where(sel, diff, 0.0) ** 2).sum(axis=(-1, -2)) / (2 * sigma**2)
        gx = gR = None
        if with_grad:
            gx = np.zeros(pos.shape)
            gx[..., ee, :] = np.where(sel, diff, 0.0) / sigma**2
        if self.orientation:
            e_o, gx_o, gR = self._orientation(traj, x, target, mask, with_grad)
            energy = energy + e_o
            if with_grad:
                gx[..., ee, :] += gx_o
        return energy, gx, gR

    def _orientation(self, traj, x, target, mask, with_grad):
        g = check_vector3(self.approach_axis, "approach_axis")
        if abs(np.linalg.norm(g) - 1.0) > 1e-9:
            raise ValueError("approach_axis must be a unit vector")
        sr2 = check_positive(self.sigma_r, "sigma_r") ** 2
        scale = float(self.orientation_scale)
        R = traj.rotations
        r = R @ g
        u = target - x
        n = np.linalg.norm(u, axis=-1, keepdims=True)
        valid = (n[..., 0] > 1e-9) & mask
        rstar = np.divide(u, n, out=np.zeros_like(u), where=n > 1e-9)
        e = r - rstar
        if self.orientation_norm == "squared":
            per = (e**2).sum(axis=-1) / (2 * sr2)
            dL_dr = e / sr2
        elif self.orientation_norm == "plain":
            en = np.linalg.norm(e, axis=-1, keepdims=True)
            per = en[..., 0] / (2 * sr2)
            dL_dr = np.divide(e, 2 * sr2 * en, out=np.zeros_like(e), where=en > 0)
        else:
            raise ValueError("orientation_norm must be 'squared' or 'plain'")
        energy = scale * np.where(valid, per, 0.0).sum(axis=-1)
        if not with_grad:
            return energy, None, None
        dL_dr = np.where(valid[..., None], scale * dL_dr, 0.0)
        # r* depends on x through the normalised offset: d r*/dx = -(I - r* r*^T) / n
        proj = dL_dr - rstar * np.sum(rstar * dL_dr, axis=-1, keepdims=True)
        gx = np.divide(proj, n, out=np.zeros_like(proj), where=n > 1e-9)
        gR = dL_dr[..., :, None] * g[None, :]
        return energy, gx, gR


def monotonic_align(positions, reference):
    """Greedy monotone nearest-neighbour matching of a trajectory to a reference.

    Returns a list of ``(step, reference_index)`` pairs. Reference indices
    never decrease, ties go to the smallest index and matching stops once the
    last reference point has been used.
    """
    X = np.asarray(positions, dtype=float).reshape(-1, 3)
    Href = np.asarray(reference, dtype=float).reshape(-1, 3)
    if len(X) < 1 or len(Href) < 1:
        raise ValueError("both trajectories need at least one point")
    steps, ks = _align_batch(X[None], Href)
    return [(int(t), int(k)) for t, k in zip(np.nonzero(steps[0])[0], ks[0][steps[0]])]


def _align_batch(X, Href):
    """Vectorised alignment over a batch of trajectories (B, H, 3).

    Returns ``matched`` (B, H) bool and ``k`` (B, H) reference indices.
    """
    B, H = X.shape[:2]
    N = len(Href)
    d2 = ((X[:, :, None, :] - Href[None, None, :, :]) ** 2).sum(axis=-1)
    idx = np.arange(N)
    k_curr = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    matched = np.zeros((B, H), dtype=bool)
    ks = np.zeros((B, H), dtype=np.int64)
    for t in range(H):
        if not active.any():
            break
        masked = np.where(idx[None, :] >= k_curr[:, None], d2[:, t, :], np.inf)
        k_star = np.argmin(masked, axis=1)
        matched[:, t] = active
        ks[:, t] = np.where(active, k_star, 0)
        k_curr = np.where(active, k_star, k_curr)
        active = active & (k_curr != N - 1)
    return matched, ks


class HumanTrajectoryField(EnergyField):
    """Attraction of end-effector waypoints to their aligned demonstration points.

    Correspondences are recomputed on every call and held fixed for the
    gradient; unmatched steps receive zero gradient.
    """

    def __init__(self, reference=((0.0, 0.0, 0.0),), sigma=0.05, weight=DEFAULT_HUMAN_WEIGHT,
                 field_id="human"):
        self.reference = reference
        self.sigma = sigma
        self.weight = weight
        self.field_id = field_id

    def _evaluate(self, traj, with_grad):
        ref = np.asarray(self.reference, dtype=float).reshape(-1, 3)
        if len(ref) < 1 or not np.all(np.isfinite(ref)):
            raise ValueError("reference must hold at least one finite point")
        sigma = check_positive(self.sigma, "sigma")
        pos = traj.positions
        lead = pos.shape[:-3]
        H = pos.shape[-3]
        x = pos[..., traj.ee_index, :].reshape((-1, H, 3))
        matched, ks = _align_batch(x, ref)
        diff = np.where(matched[..., None], x - ref[ks], 0.0)
        energy = (diff**2).sum(axis=(-1, -2)).reshape(lead) / (2 * sigma**2)
        if not with_grad:
            return energy, None, None
        gx = np.zeros(pos.shape)
        gx[..., traj.ee_index, :] = (diff / sigma**2).reshape(lead + (H, 3))
        return energy, gx, None


def collision_energy(field, traj):
    return field.energy(traj)


def collision_gradient(field, traj):
    return field.gradient(traj)[1]


def semantic_energy(field, traj):
    return field.energy(traj)


def human_energy(field, traj):
    return field.energy(traj)


def read_demo_csv(path):
    """Demonstration file with header ``t,x,y,z``; returns (N, 3) positions sorted by t."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(float(r["t"]), float(r["x"]), float(r["y"]), float(r["z"])) for r in reader]
    if not rows:
        raise ValueError(f"demo file {path} is empty")
    arr = np.asarray(sorted(rows))
    return arr[:, 1:]


def write_demo_csv(path, positions, times=None):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    times = np.arange(len(positions), dtype=float) if times is None else np.asarray(times, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z"])
        for t, p in zip(times, positions):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in p])


class _Clock:
    __slots__ = ("timer", "stage", "t0")

    def __init__(self, timer, stage):
        self.timer, self.stage = timer, stage

    def __enter__(self):
        if self.timer is not None:
            self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        if self.timer is not None:
            self.timer.add(self.stage, time.perf_counter() - self.t0)
        return False


class GuidanceChain:
    """Noisy chunk -> clean estimate -> decode -> rollout -> fields, and back.

    ``robot`` is a kinematics model, ``state`` the robot state the chunk
    starts from and ``decoder`` an optional latent decoder. The chain holds
    no mutable state, so one instance can serve concurrent episodes.
    """

    def __init__(self, fields, robot, state=None, decoder=None):
        self.fields = list(fields)
        ids = [f.field_id for f in self.fields]
        if len(set(ids)) != len(ids):
            raise ValueError(f"field ids must be unique, got {ids}")
        self.robot = robot
        self.state = state
        self.decoder = decoder

    def with_state(self, state):
        return GuidanceChain(self.fields, self.robot, state, self.decoder)

    def with_fields(self, fields):
        return GuidanceChain(fields, self.robot, self.state, self.decoder)

    def resolve_weights(self, overrides=None):
        overrides = overrides or {}
        unknown = set(overrides) - {f.field_id for f in self.fields}
        if unknown:
            raise ValueError(f"guidance weights given for unknown fields {sorted(unknown)}")
        out = []
        for f in self.fields:
            lam = float(overrides.get(f.field_id, f.weight))
            if not np.isfinite(lam) or lam < 0:
                raise ValueError(f"weight for field {f.field_id!r} must be >= 0")
            out.append(lam)
        return out

    def _decode(self, a):
        return a if self.decoder is None else self.decoder.decode(a)

    def trajectory(self, a_clean):
        return self.robot.rollout(self.state, self._decode(np.asarray(a_clean, dtype=float)))

    def field_energies(self, a_clean, fields=None):
        """Per-field energies (list of arrays over the batch axes) of a clean chunk."""
        traj = self.trajectory(a_clean)
        idx = range(len(self.fields)) if fields is None else fields
        return [self.fields[i].energy(traj) for i in idx]

    def total_energy(self, a_clean, weights=None):
        """Weighted energy sum of a clean chunk, one value per batch element."""
        weights = self.resolve_weights() if weights is None else weights
        traj = self.trajectory(a_clean)
        total = np.zeros(np.shape(a_clean)[:-2])
        for f, lam in zip(self.fields, weights):
            if lam > 0:
                total = total + lam * f.energy(traj)
        return total

    def field_gradients(self, a_tau, tau, v, policy=None, obs=None, fields=None,
                        jacobian="scaled", timer=None):
        """Per-field energies and gradients with respect to ``a_tau``.

        ``jacobian`` selects how the clean-estimate map is differentiated:
        ``"scaled"`` uses ``(1 - tau) I``, ``"identity"`` uses ``I`` and
        ``"exact"`` asks ``policy.posterior_mean_vjp`` for the analytic
        Jacobian. Gradients are unweighted.
        """
        tau = check_tau(tau)
        a_tau = np.asarray(a_tau, dtype=float)
        idx = list(range(len(self.fields))) if fields is None else list(fields)
        if not idx:
            return [], []
        with _Clock(timer, "tweedie"):
            a_clean = tweedie_clean_estimate(a_tau, tau, v)
        try:
            with _Clock(timer, "rollout"):
                decoded = self._decode(a_clean)
                traj = self.robot.rollout(self.state, decoded)
        except Exception as exc:
            raise GuidanceError(f"rollout failed: {exc}", stage="rollout") from exc
        energies, gpos, grot = [], [], []
        for i in idx:
            f = self.fields[i]
            try:
                with _Clock(timer, f.stage):
                    e, gx, gR = f.gradient(traj)
            except GuidanceError:
                raise
            except Exception as exc:
                raise GuidanceError(f"field {f.field_id!r} failed: {exc}", field_id=f.field_id,
                                    stage="field") from exc
            energies.append(e)
            gpos.append(gx)
            grot.append(gR)
        cot_pos = np.stack(gpos)
        cot_rot = None
        if any(g is not None for g in grot):
            cot_rot = np.stack([np.zeros(traj.rotations.shape) if g is None else g for g in grot])
        with _Clock(timer, "vjp"):
            g = self.robot.vjp(self.state, decoded, cot_pos, cot_rot)
            if self.decoder is not None:
                g = self.decoder.pullback(g)
            g = self._tweedie_pullback(a_tau, tau, g, policy, obs, jacobian)
        if g.shape[1:] != a_tau.shape:
            g = np.broadcast_to(g, (len(idx),) + a_tau.shape)
        return energies, list(g)

    def _tweedie_pullback(self, a_tau, tau, g, policy, obs, jacobian):
        if tau == 1.0 or jacobian == "identity":
            return g
        if jacobian == "scaled":
            return (1.0 - tau) * g
        if jacobian == "exact":
            if policy is None or not hasattr(policy, "posterior_mean_vjp"):
                raise GuidanceError("exact clean-estimate Jacobian needs a policy with "
                                    "posterior_mean_vjp", stage="tweedie")
            return policy.posterior_mean_vjp(a_tau, tau, g, obs)
        raise ValueError(f"unknown jacobian mode {jacobian!r}")

    def composite_gradient(self, a_tau, tau, v, policy=None, obs=None, weights=None,
                           jacobian="scaled"):
        """Weighted sum of field gradients with respect to ``a_tau``."""
        weights = self.resolve_weights() if weights is None else list(weights)
        active = [i for i, lam in enumerate(weights) if lam > 0]
        out = np.zeros(np.shape(a_tau))
        if not active:
            return out
        _, grads = self.field_gradients(a_tau, tau, v, policy=policy, obs=obs, fields=active,
                                        jacobian=jacobian)
        for j, i in enumerate(active):
            out = out + weights[i] * grads[j]
        return out

    def energy_at(self, a_tau, tau, policy, obs=None, weights=None):
        """Weighted energy of the clean estimate formed from ``a_tau``."""
        v = policy.velocity(a_tau, tau, obs)
        return self.total_energy(tweedie_clean_estimate(a_tau, tau, v), weights)


def composite_gradient(chain, a_tau, tau, v, policy=None, obs=None, weights=None, jacobian="scaled"):
    return chain.composite_gradient(a_tau, tau, v, policy, obs, weights, jacobian)


def field_from_config(kind, params, sdf=None):
    """Build a field from a config section; ``kind`` is collision, semantic or human."""
    params = dict(params)
    if kind == "collision":
        params.setdefault("field_id", "collision")
        return CollisionField(sdf=sdf, **params)
    if kind == "semantic":
        params.setdefault("field_id", "semantic")
        return SemanticField(**params)
    if kind == "human":
        params.setdefault("field_id", "human")
        if "demo_file" in params:
            params["reference"] = read_demo_csv(params.pop("demo_file"))
        return HumanTrajectoryField(**params)
    raise ValueError(f"unknown field type {kind!r}")
