"""Desk-scale reaching scenes, chunked execution and synthetic data.

The robot is a free gripper travelling at a fixed height between tall
axis-aligned boxes, so the tasks are effectively planar. Evaluation uses the
analytic obstacle geometry; guidance only ever sees the voxel distance field
built from a sampled point cloud of the same obstacles.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import GuidanceError, check_vector3
from .fields import CollisionField, GuidanceChain, HumanTrajectoryField, SemanticField, read_demo_csv
from .flow import SamplerConfig, sample_guided
from .kinematics import DEFAULT_ROTATION_SCALE, DEFAULT_POSITION_SCALE, FreeGripper, RobotState, exp_so3, log_so3
from .policies import GmmPolicy
from .sdf import PointCloud, build_occupancy, compute_sdf, filter_task_relevant, label_scorer

logger = logging.getLogger(__name__)

# gripper approach axis along +x: rotate the local z axis onto world x
APPROACH_X = exp_so3(np.array([0.0, np.pi / 2, 0.0]))
TABLE_HEIGHT = 0.3
DESK_THICKNESS = 0.02
OBJECT_HALF = 0.02


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = check_vector3(self.center, "center")
        self.half_extents = check_vector3(self.half_extents, "half_extents")
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")

    def distance(self, p):
        """Exterior Euclidean distance; 0 inside."""
        q = np.abs(np.asarray(p, dtype=float) - self.center) - self.half_extents
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1)

    def contains(self, p):
        return np.all(np.abs(np.asarray(p, dtype=float) - self.center) <= self.half_extents, axis=-1)

    def sample_points(self, spacing):
        axes = [np.arange(c - h, c + h + 1e-12, spacing) for c, h in zip(self.center, self.half_extents)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return g

    def to_dict(self):
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half_extents.tolist()}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = check_vector3(self.center, "center")
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def distance(self, p):
        return np.maximum(np.linalg.norm(np.asarray(p, dtype=float) - self.center, axis=-1) - self.radius, 0.0)

    def contains(self, p):
        return np.linalg.norm(np.asarray(p, dtype=float) - self.center, axis=-1) <= self.radius

    def sample_points(self, spacing):
        r = self.radius
        ax = np.arange(-r, r + 1e-12, spacing)
        g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        g = g[np.linalg.norm(g, axis=1) <= r]
        return g + self.center

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": float(self.radius)}


def obstacle_from_dict(doc):
    kind = doc.get("type", "box")
    if kind == "box":
        return Box(doc["center"], doc["half_extents"])
    if kind == "sphere":
        return Sphere(doc["center"], doc["radius"])
    raise ValueError(f"unknown obstacle type {kind!r}")


@dataclass
class Scene:
    """A reaching task.

    ``routes`` lists lateral offsets (m) of the via points used by the
    scripted demonstrations, one route per entry; 0 is the straight line.
    ``dynamic`` holds ``(chunk_index, obstacle)`` insertions.
    """

    scene_id: str
    obstacles: list
    targets: list
    correct_target: str
    start_position: np.ndarray
    start_rotation: np.ndarray = field(default_factory=lambda: APPROACH_X.copy())
    distractors: list = field(default_factory=list)
    routes: tuple = (0.0,)
    bounds: tuple = ((-0.2, -0.5, 0.0), (0.9, 0.5, 0.6))
    voxel_size: float = 0.02
    dynamic: list = field(default_factory=list)
    demo: Optional[np.ndarray] = None
    demo_file: Optional[str] = None
    demo_end_radius: float = 0.06

    def __post_init__(self):
        self.start_position = check_vector3(self.start_position, "start_position")
        self.targets = [(str(lab), check_vector3(pos, "target")) for lab, pos in self.targets]
        self.distractors = [(str(lab), check_vector3(pos, "distractor")) for lab, pos in self.distractors]
        if self.correct_target not in [lab for lab, _ in self.targets]:
            raise ValueError(f"correct target {self.correct_target!r} is not among the targets")
        self.start_rotation = RobotState(rotation=self.start_rotation).rotation
        if self.demo is None and self.demo_file is not None:
            self.demo = read_demo_csv(self.demo_file)
        if self.demo is not None:
            self.demo = np.asarray(self.demo, dtype=float).reshape(-1, 3)

    def validate(self, robot):
        probes = robot.probe_positions(self.start_state())
        if self.clearance(probes).min() <= 0:
            raise ValueError(f"scene {self.scene_id}: start state collides with an obstacle")

    @property
    def target_position(self):
        return dict(self.targets)[self.correct_target]

    def start_state(self):
        return RobotState(position=self.start_position, rotation=self.start_rotation)

    def clearance(self, points, obstacles=None):
        obstacles = self.obstacles if obstacles is None else obstacles
        points = np.asarray(points, dtype=float)
        if not obstacles:
            return np.full(points.shape[:-1], np.inf)
        return np.min([o.distance(points) for o in obstacles], axis=0)

    def in_collision(self, points):
        points = np.asarray(points, dtype=float)
        if not self.obstacles:
            return np.zeros(points.shape[:-1], dtype=bool)
        return np.any([o.contains(points) for o in self.obstacles], axis=0)

    def point_cloud(self, spacing=None):
        """Sampled scene: obstacles, the desk slab at the bottom of the bounds and the objects.

        Objects (targets and distractors) are small cubes labelled with their
        names so a relevance filter can remove the one being reached for.
        """
        spacing = self.voxel_size / 2 if spacing is None else spacing
        parts = [PointCloud(o.sample_points(spacing), labels=None) for o in self.obstacles]
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        desk = Box([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2] + DESK_THICKNESS / 2],
                   [(hi[0] - lo[0]) / 2, (hi[1] - lo[1]) / 2, DESK_THICKNESS / 2])
        parts.append(PointCloud(desk.sample_points(spacing)))
        parts = [PointCloud(c.points, labels=np.full(len(c), "obstacle", dtype=object)) for c in parts]
        for lab, pos in self.targets + self.distractors:
            pts = Box(pos, [OBJECT_HALF] * 3).sample_points(spacing)
            parts.append(PointCloud(pts, labels=np.full(len(pts), lab, dtype=object)))
        return PointCloud.concatenate(parts)

    def build_sdf(self, barrier_d=0.15, filter_relevant=True):
        cloud = self.point_cloud()
        if filter_relevant:
            cloud = filter_task_relevant(cloud, label_scorer(self.correct_target), 95.0)
        occ = build_occupancy(cloud, self.voxel_size, self.bounds)
        return compute_sdf(occ, barrier_d)

    def to_dict(self):
        doc = {
            "id": self.scene_id,
            "obstacles": [o.to_dict() for o in self.obstacles],
            "targets": [{"label": lab, "position": pos.tolist()} for lab, pos in self.targets],
            "distractors": [{"label": lab, "position": pos.tolist()} for lab, pos in self.distractors],
            "correct_target": self.correct_target,
            "start": {"position": self.start_position.tolist(),
                      "rotation": log_so3(self.start_rotation).tolist()},
            "routes": list(self.routes),
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "voxel_size": self.voxel_size,
            "dynamic": [{"chunk": k, "obstacle": o.to_dict()} for k, o in self.dynamic],
            "demo_end_radius": self.demo_end_radius,
        }
        if self.demo_file is not None:
            doc["demo_file"] = self.demo_file
        elif self.demo is not None:
            doc["demo"] = self.demo.tolist()
        return doc


def scene_from_dict(doc):
    start = doc.get("start", {})
    rot = start.get("rotation")
    return Scene(
        scene_id=doc["id"],
        obstacles=[obstacle_from_dict(o) for o in doc.get("obstacles", [])],
        targets=[(t["label"], t["position"]) for t in doc["targets"]],
        distractors=[(t["label"], t["position"]) for t in doc.get("distractors", [])],
        correct_target=doc["correct_target"],
        start_position=start.get("position", (0.0, 0.0, TABLE_HEIGHT)),
        start_rotation=APPROACH_X.copy() if rot is None else rot,
        routes=tuple(doc.get("routes", (0.0,))),
        bounds=tuple(tuple(b) for b in doc.get("bounds", ((-0.2, -0.5, 0.0), (0.9, 0.5, 0.6)))),
        voxel_size=doc.get("voxel_size", 0.02),
        dynamic=[(int(d["chunk"]), obstacle_from_dict(d["obstacle"])) for d in doc.get("dynamic", [])],
        demo=doc.get("demo"),
        demo_file=doc.get("demo_file"),
        demo_end_radius=doc.get("demo_end_radius", 0.06),
    )


def load_scene(path):
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene, path):
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2)


def dynamic_scene_update(scene, chunk_index):
    """Scene with every scheduled obstacle due at ``chunk_index`` inserted."""
    due = [o for k, o in scene.dynamic if k == chunk_index]
    if not due:
        return scene
    return replace(scene, obstacles=list(scene.obstacles) + due,
                   dynamic=[(k, o) for k, o in scene.dynamic if k != chunk_index])


# ---------------------------------------------------------------------------
# Scripted reaching prior


@dataclass
class Observation:
    scene_id: str
    position: np.ndarray
    rotation: np.ndarray
    start: np.ndarray
    targets: list
    routes: tuple
    previous_direction: Optional[np.ndarray] = None


def _via_point(start, target, offset):
    d = target - start
    perp = np.array([-d[1], d[0], 0.0])
    n = np.linalg.norm(perp)
    perp = perp / n if n > 0 else np.array([0.0, 1.0, 0.0])
    return start + 0.5 * d + offset * perp


def route_waypoints(start, target, offset):
    if offset == 0:
        return [target]
    return [_via_point(start, target, offset), target]


def scripted_path(position, waypoints, step, n_steps, reach_tol=0.03):
    """Constant-speed walk through ``waypoints`` from ``position``; (n_steps, 3).

    Waypoints already passed (within ``reach_tol`` or beyond the plane
    through them facing the next waypoint) are skipped. The walk stops on
    the final waypoint.
    """
    wps = [np.asarray(w, dtype=float) for w in waypoints]
    p = np.asarray(position, dtype=float).copy()
    j = 0
    while j < len(wps) - 1:
        nxt = wps[j + 1] - wps[j]
        if np.linalg.norm(p - wps[j]) < reach_tol or np.dot(p - wps[j], nxt) > 0:
            j += 1
        else:
            break
    out = np.empty((n_steps, 3))
    for i in range(n_steps):
        remaining = step
        while remaining > 1e-12:
            d = wps[j] - p
            dist = np.linalg.norm(d)
            if dist <= remaining:
                p = wps[j].copy()
                remaining -= dist
                if j == len(wps) - 1:
                    break
                j += 1
            else:
                p = p + d * (remaining / dist)
                remaining = 0.0
        out[i] = p
    return out


class ReachingPrior(BaseEstimator):
    """Obstacle-unaware multimodal reaching policy.

    ``condition(obs)`` returns a :class:`GmmPolicy` over the next chunk with
    one component per (target, route): the mean follows the scripted route
    at ``step_size`` metres per step and rotates back to the nominal
    orientation on the first step; every entry carries isotropic noise
    ``sigma``. Components whose first step agrees with the previously
    executed direction are up-weighted by ``exp(persistence * cos)``.
    """

    def __init__(self, horizon=15, action_dim=7, step_size=0.012, sigma=0.3, persistence=3.0,
                 gamma_x=DEFAULT_POSITION_SCALE, gamma_r=DEFAULT_ROTATION_SCALE, nominal_rotation=None):
        self.horizon = horizon
        self.action_dim = action_dim
        self.step_size = step_size
        self.sigma = sigma
        self.persistence = persistence
        self.gamma_x = gamma_x
        self.gamma_r = gamma_r
        self.nominal_rotation = nominal_rotation

    @property
    def chunk_shape(self):
        return (int(self.horizon), int(self.action_dim))

    def component_means(self, obs):
        gx = np.asarray(self.gamma_x, dtype=float)
        gr = np.asarray(self.gamma_r, dtype=float)
        nominal = APPROACH_X if self.nominal_rotation is None else np.asarray(self.nominal_rotation)
        rot_fix = log_so3(nominal @ np.asarray(obs.rotation).T) / gr
        means, dirs = [], []
        for _, target in obs.targets:
            for offset in obs.routes:
                wps = route_waypoints(obs.start, target, offset)
                path = scripted_path(obs.position, wps, self.step_size, int(self.horizon))
                chunk = np.zeros(self.chunk_shape)
                chunk[:, :3] = np.diff(np.vstack([obs.position, path]), axis=0) / gx
                chunk[0, 3:6] = rot_fix
                means.append(chunk)
                dirs.append(path[min(2, len(path) - 1)] - obs.position)
        return np.asarray(means), np.asarray(dirs)

    def condition(self, obs):
        means, dirs = self.component_means(obs)
        logw = np.zeros(len(means))
        prev = obs.previous_direction
        if prev is not None and np.linalg.norm(prev) > 1e-9:
            n = np.linalg.norm(dirs, axis=1)
            cos = np.divide(dirs @ prev, n * np.linalg.norm(prev), out=np.zeros(len(dirs)), where=n > 1e-9)
            logw = self.persistence * cos
        w = np.exp(logw - logw.max())
        w /= w.sum()
        sig = np.full(len(means), float(self.sigma))
        return GmmPolicy.from_components(w, means.reshape(len(means), -1), sig, self.chunk_shape)


# ---------------------------------------------------------------------------
# Episode execution


@dataclass
class ExecutionConfig:
    horizon: int = 15
    executed_steps: int = 8
    max_chunks: int = 10
    success_radius: float = 0.05
    collision_substeps: int = 4

    def __post_init__(self):
        if not 1 <= int(self.executed_steps) <= int(self.horizon):
            raise ValueError("executed_steps must satisfy 1 <= h <= H")
        if int(self.max_chunks) < 1:
            raise ValueError("max_chunks must be >= 1")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")


@dataclass
class EpisodeResult:
    success: bool
    safe: bool
    collision_count: int
    min_clearance: float
    final_distance: float
    chunks: int
    reached: Optional[str]
    trajectory: list
    chunk_seconds: list
    inference_seconds: list = field(default_factory=list)
    demo_deviation: Optional[float] = None
    failure_reason: Optional[str] = None

    def deterministic_dict(self):
        """Everything except wall-clock timings."""
        d = asdict(self)
        d.pop("chunk_seconds")
        d.pop("inference_seconds")
        return d

    def to_json(self):
        return asdict(self)


DEFAULT_FIELDS = {
    "collision": {"weight": 0.02, "barrier_d": 0.15, "floor_eps": 1e-4},
    "semantic": {"weight": 5.0, "sigma": 0.1},
}


def make_robot():
    return FreeGripper()


def build_fields(scene, field_specs, sdf=None):
    """Instantiate guidance fields for ``scene`` from ``{kind: params}``."""
    fields = []
    for kind, params in field_specs.items():
        params = dict(params)
        if kind == "collision":
            fields.append(CollisionField(sdf=sdf, field_id="collision", **params))
        elif kind == "semantic":
            params.setdefault("target", scene.target_position)
            fields.append(SemanticField(field_id="semantic", **params))
        elif kind == "human":
            if scene.demo is None:
                raise ValueError(f"scene {scene.scene_id} has no demonstration")
            fields.append(HumanTrajectoryField(reference=scene.demo, field_id="human", **params))
        else:
            raise ValueError(f"unknown field type {kind!r}")
    return fields


def _swept_points(prev, cur, substeps):
    """Probe points interpolated along the step, excluding ``prev``."""
    fr = np.arange(1, substeps + 1) / substeps
    return prev[None] + fr[:, None, None] * (cur - prev)[None]


def _deviation_to_demo(points, demo):
    d = np.linalg.norm(points[:, None, :] - demo[None, :, :], axis=-1)
    return float(d.min(axis=1).mean())


def run_episode(scene, policy, exec_cfg=None, sampler_cfg=None, seed=0, robot=None,
                field_specs=None, init_guidance=True, denoise_guidance=True, timer=None,
                chunk_hook=None):
    """Run one episode with chunked replanning.

    Each chunk is sampled with seed ``(seed, chunk_index)``; only the first
    ``executed_steps`` poses are executed and checked against the analytic
    obstacles. ``chunk_hook(chunk, state, scene, sdf)`` may rewrite a chunk
    before execution (used by the post-hoc baseline). Sampler failures end
    the episode as a failure with ``failure_reason`` set.
    """
    exec_cfg = exec_cfg or ExecutionConfig()
    sampler_cfg = sampler_cfg or SamplerConfig()
    robot = robot or make_robot()
    field_specs = DEFAULT_FIELDS if field_specs is None else field_specs
    scene.validate(robot)
    state = scene.start_state()
    executed = [robot.probe_positions(state)]
    ee = robot.ee_index
    need_sdf = "collision" in field_specs or chunk_hook is not None
    sdf = None
    if need_sdf:
        with _clock(timer, "grid_rebuild"):
            sdf = scene.build_sdf(field_specs.get("collision", {}).get("barrier_d", 0.15))
    collisions = 0
    min_clear = float(scene.clearance(executed[0]).min())
    reached = _reached(scene, executed[0][ee], exec_cfg.success_radius)
    chunk_seconds, inference_seconds = [], []
    prev_dir = None
    reason = None
    chunks = 0
    while reached is None and chunks < exec_cfg.max_chunks:
        t0 = time.perf_counter()
        updated = dynamic_scene_update(scene, chunks)
        if updated is not scene:
            scene = updated
            if need_sdf:
                with _clock(timer, "grid_rebuild"):
                    sdf = scene.build_sdf(field_specs.get("collision", {}).get("barrier_d", 0.15))
        obs = Observation(scene.scene_id, state.position, state.rotation, scene.start_position,
                          scene.targets, scene.routes, prev_dir)
        t_inf = time.perf_counter()
        pol = policy.condition(obs) if hasattr(policy, "condition") else policy
        fields = build_fields(scene, field_specs, sdf)
        chain = GuidanceChain(fields, robot, state)
        cfg = replace(sampler_cfg, seed=[int(seed), chunks])
        try:
            chunk, _ = sample_guided(pol, obs, chain, cfg, init_guidance=init_guidance,
                                     denoise_guidance=denoise_guidance, timer=timer)
            if chunk_hook is not None:
                chunk = chunk_hook(chunk, state, scene, sdf)
        except (GuidanceError, FloatingPointError, ValueError) as exc:
            reason = f"sampler failure at chunk {chunks}: {exc}"
            logger.warning(reason)
            break
        inference_seconds.append(time.perf_counter() - t_inf)
        traj = robot.rollout(state, chunk)
        chunks += 1
        h = int(exec_cfg.executed_steps)
        last = None
        for i in range(h):
            cur = traj.positions[i]
            swept = _swept_points(executed[-1], cur, int(exec_cfg.collision_substeps))
            if scene.in_collision(swept).any():
                collisions += 1
            min_clear = min(min_clear, float(scene.clearance(swept).min()))
            executed.append(cur)
            last = i
            reached = _reached(scene, cur[ee], exec_cfg.success_radius)
            if reached is not None:
                break
        prev_dir = executed[-1][ee] - executed[-1 - (last + 1)][ee]
        state = robot.state_at(traj, last)
        chunk_seconds.append(time.perf_counter() - t0)
    ee_path = np.asarray([p[ee] for p in executed])
    final_distance = float(np.linalg.norm(ee_path[-1] - scene.target_position))
    deviation = _deviation_to_demo(ee_path, scene.demo) if scene.demo is not None else None
    success = reached == scene.correct_target and reason is None
    return EpisodeResult(
        success=bool(success), safe=collisions == 0, collision_count=int(collisions),
        min_clearance=max(0.0, min_clear), final_distance=final_distance, chunks=chunks,
        reached=reached, trajectory=ee_path.tolist(), chunk_seconds=chunk_seconds,
        inference_seconds=inference_seconds,
        demo_deviation=deviation, failure_reason=reason)


def _reached(scene, p, radius):
    best, best_d = None, np.inf
    for lab, pos in scene.targets:
        d = np.linalg.norm(p - pos)
        if d <= radius and d < best_d:
            best, best_d = lab, d
    return best


class _clock:
    def __init__(self, timer, stage):
        self.timer, self.stage = timer, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        if self.timer is not None:
            self.timer.add(self.stage, time.perf_counter() - self.t0)
        return False


# ---------------------------------------------------------------------------
# Scene families


def corridor_scene(seed=0):
    """Straight reach past a pillar that clips the direct line, target near a back wall."""
    return Scene(
        scene_id=f"corridor-{seed}",
        obstacles=[Box([0.30, 0.075, 0.3], [0.04, 0.04, 0.3]),
                   Box([0.72, 0.0, 0.3], [0.02, 0.3, 0.3])],
        targets=[("goal", [0.60, 0.0, TABLE_HEIGHT])],
        correct_target="goal",
        start_position=[0.0, 0.0, TABLE_HEIGHT],
    )


def cluttered_scene(seed=0, n_obstacles=4):
    """Random pillars between the start and a randomly placed target."""
    rng = np.random.default_rng([seed, 1])
    target = np.array([rng.uniform(0.55, 0.65), rng.uniform(-0.1, 0.1), TABLE_HEIGHT])
    obstacles = _random_pillars(rng, n_obstacles, [np.zeros(3) + [0, 0, TABLE_HEIGHT]], [target])
    return Scene(scene_id=f"cluttered-{seed}", obstacles=obstacles, targets=[("goal", target)],
                 correct_target="goal", start_position=[0.0, 0.0, TABLE_HEIGHT],
                 routes=(0.0, 0.12, -0.12))


def _random_pillars(rng, n, starts, targets, x_range=(0.18, 0.45), y_range=(-0.2, 0.2)):
    obstacles = []
    tries = 0
    while len(obstacles) < n and tries < 1000:
        tries += 1
        c = np.array([rng.uniform(*x_range), rng.uniform(*y_range), 0.3])
        half = np.array([rng.uniform(0.03, 0.05), rng.uniform(0.03, 0.05), 0.3])
        box = Box(c, half)
        keep_clear = np.vstack(list(starts) + list(targets))
        if box.distance(keep_clear).min() < 0.1:
            continue
        if any(np.all(np.abs(o.center - c)[:2] < (o.half_extents + half)[:2] + 0.1) for o in obstacles):
            continue
        obstacles.append(box)
    return obstacles


def multi_choice_scene(seed=0, n_targets=3, cluttered=False, n_obstacles=3):
    """Several candidate objects at random positions; one is correct."""
    rng = np.random.default_rng([seed, 2])
    ys = np.sort(rng.uniform(-0.3, 0.3, size=n_targets))
    while np.min(np.diff(ys)) < 0.15 if n_targets > 1 else False:
        ys = np.sort(rng.uniform(-0.3, 0.3, size=n_targets))
    targets = [(f"obj{i}", [rng.uniform(0.5, 0.62), y, TABLE_HEIGHT]) for i, y in enumerate(ys)]
    correct = targets[int(rng.integers(n_targets))][0]
    start = np.array([0.0, 0.0, TABLE_HEIGHT])
    obstacles = []
    if cluttered:
        obstacles = _random_pillars(rng, n_obstacles, [start], [np.asarray(t[1]) for t in targets])
    kind = "cluttered-multi" if cluttered else "multi"
    return Scene(scene_id=f"{kind}-{seed}", obstacles=obstacles, targets=targets,
                 correct_target=correct, start_position=start)


def demo_scene(seed=0):
    """Reach whose demonstration arcs around the left while the prior also goes straight or right."""
    start = np.array([0.0, 0.0, TABLE_HEIGHT])
    target = np.array([0.55, 0.0, TABLE_HEIGHT])
    via = _via_point(start, target, 0.15)
    demo = generate_pseudo_demo(None, [start, via, target], n_points=40, noise_sigma=0.003, seed=seed)
    return Scene(scene_id=f"demo-{seed}", obstacles=[], targets=[("goal", target)],
                 correct_target="goal", start_position=start, routes=(0.15, 0.0, -0.15), demo=demo)


SCENE_FAMILIES = {
    "corridor": corridor_scene,
    "cluttered": cluttered_scene,
    "multi-choice": multi_choice_scene,
    "cluttered-multi-choice": lambda seed=0: multi_choice_scene(seed, cluttered=True),
    "demo": demo_scene,
}


def make_scene(family, seed=0):
    if family not in SCENE_FAMILIES:
        raise ValueError(f"unknown scene family {family!r}; choose from {sorted(SCENE_FAMILIES)}")
    return SCENE_FAMILIES[family](seed)


# ---------------------------------------------------------------------------
# Synthetic data


def generate_pseudo_demo(scene, waypoints, n_points, noise_sigma=0.0, seed=0):
    """Arc-length resampled waypoint path with optional Gaussian jitter, (n_points, 3)."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    wps = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    seg = np.linalg.norm(np.diff(wps, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    q = np.linspace(0.0, s[-1], int(n_points))
    path = np.stack([np.interp(q, s, wps[:, k]) for k in range(3)], axis=1)
    if noise_sigma > 0:
        path = path + np.random.default_rng(seed).normal(0.0, noise_sigma, path.shape)
    return path


def generate_dataset(family, n_episodes, seed=0, horizon=15, action_dim=7, step_size=0.012,
                     robot=None, return_paths=False):
    """Scripted demonstrations chopped into relative action chunks.

    Each episode picks one of the scene's routes uniformly at random, walks it
    at constant speed and is split into consecutive chunks. Returns a list of
    ``(obs_id, chunk)``; the obs id is ``"<scene_id>/<route>"``. Episodes
    whose path never reaches the target are skipped and counted in the log.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    robot = robot or make_robot()
    rng = np.random.default_rng(seed)
    data, paths = [], []
    skipped = 0
    for ep in range(int(n_episodes)):
        scene = make_scene(family, int(rng.integers(2**31)))
        route = int(rng.integers(len(scene.routes)))
        target = scene.target_position
        wps = route_waypoints(scene.start_position, target, scene.routes[route])
        total = sum(np.linalg.norm(np.diff(np.vstack([scene.start_position] + wps), axis=0), axis=1))
        n_steps = int(np.ceil(total / step_size))
        n_steps = int(np.ceil(n_steps / horizon) * horizon)
        path = scripted_path(scene.start_position, wps, step_size, n_steps)
        if np.linalg.norm(path[-1] - target) > 1e-9:
            skipped += 1
            continue
        state = scene.start_state()
        for c in range(n_steps // horizon):
            seg = path[c * horizon:(c + 1) * horizon]
            chunk = robot.chunk_from_poses(state, seg, action_dim=action_dim)
            data.append((f"{scene.scene_id}/{route}", chunk))
            state = RobotState(position=seg[-1], rotation=state.rotation)
        paths.append((scene.start_state(), route, path))
    if skipped:
        logger.info("skipped %d unreachable scripted episodes", skipped)
    return (data, paths) if return_paths else data


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
