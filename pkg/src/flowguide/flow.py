"""Flow-matching sampling: Euler integration, clean estimates, guided steps.

Flow time runs from ``tau = 0`` (standard-normal noise) to ``tau = 1`` (clean
action chunk) along the linear path ``A_tau = (1 - tau) A_0 + tau A_1``.
All samplers accept chunks with arbitrary leading batch dimensions; the last
two axes are always (horizon, action_dim).
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import GuidanceError, check_chunk, check_positive, check_same_shape, check_tau

GUIDANCE_SCHEDULES = ("constant", "linear-up", "linear-down")
TWEEDIE_JACOBIANS = ("scaled", "identity", "exact")


@dataclass
class SamplerConfig:
    """Denoising settings.

    ``guidance_weights`` maps field ids to weights and overrides the weight a
    field was constructed with. ``init_candidates = 1`` disables initial-noise
    selection.
    """

    num_steps: int = 16
    guidance_weights: dict = field(default_factory=dict)
    clip_alpha: float = 50.0
    init_candidates: int = 1
    init_denoise_steps: int = 4
    seed: object = 0
    guidance_schedule: str = "constant"
    tweedie_jacobian: str = "scaled"

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ValueError("num_steps must be >= 1")
        check_positive(self.clip_alpha, "clip_alpha")
        if int(self.init_candidates) < 1:
            raise ValueError("init_candidates must be >= 1")
        if int(self.init_denoise_steps) < 1:
            raise ValueError("init_denoise_steps must be >= 1")
        if self.guidance_schedule not in GUIDANCE_SCHEDULES:
            raise ValueError(f"guidance_schedule must be one of {GUIDANCE_SCHEDULES}")
        if self.tweedie_jacobian not in TWEEDIE_JACOBIANS:
            raise ValueError(f"tweedie_jacobian must be one of {TWEEDIE_JACOBIANS}")
        for key, lam in self.guidance_weights.items():
            if not np.isfinite(lam) or lam < 0:
                raise ValueError(f"guidance weight for {key!r} must be >= 0, got {lam}")

    @property
    def delta(self):
        return 1.0 / int(self.num_steps)

    def schedule(self):
        """Uniform flow times ``k / K`` for k = 0..K-1."""
        k = int(self.num_steps)
        return [i / k for i in range(k)]

    def ramp(self, tau):
        if self.guidance_schedule == "linear-up":
            return 2.0 * tau
        if self.guidance_schedule == "linear-down":
            return 2.0 * (1.0 - tau)
        return 1.0


@dataclass
class StepRecord:
    tau: float
    velocity_norm: float
    grad_norm_pre: float
    grad_norm_post: float
    grad_maxabs_pre: float
    grad_maxabs_post: float
    energy: float
    seconds: float


@dataclass
class DenoiseDiagnostics:
    steps: list = field(default_factory=list)
    init_energies: Optional[np.ndarray] = None
    init_selected: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.steps)

    def as_dicts(self):
        return [vars(s).copy() for s in self.steps]


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.totals = {}
        self.counts = {}

    def add(self, stage, seconds):
        self.totals[stage] = self.totals.get(stage, 0.0) + seconds
        self.counts[stage] = self.counts.get(stage, 0) + 1

    def time(self, stage):
        return _TimerContext(self, stage)

    def get(self, stage):
        return self.totals.get(stage, 0.0)


class _TimerContext:
    def __init__(self, timer, stage):
        self.timer = timer
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        if self.timer is not None:
            self.timer.add(self.stage, time.perf_counter() - self.t0)
        return False


def _timed(timer, stage):
    return _TimerContext(timer, stage)


def conditional_velocity_target(a0, a1):
    """Regression target for flow-matching training: ``a1 - a0``."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    check_same_shape(a0, a1, ("a0", "a1"))
    return a1 - a0


def tweedie_clean_estimate(a_tau, tau, v):
    """Posterior-mean estimate of the clean chunk, ``a_tau + (1 - tau) v``.

    At ``tau == 1`` the sample is already clean and is returned unchanged.
    """
    tau = check_tau(tau)
    a_tau = np.asarray(a_tau, dtype=float)
    v = np.asarray(v, dtype=float)
    check_same_shape(a_tau, v, ("a_tau", "v"))
    if tau == 1.0:
        return a_tau.copy()
    return a_tau + (1.0 - tau) * v


def euler_step(a_tau, v, delta):
    a_tau = np.asarray(a_tau, dtype=float)
    v = np.asarray(v, dtype=float)
    check_same_shape(a_tau, v, ("a_tau", "v"))
    check_positive(delta, "delta")
    return a_tau + delta * v


def clip_gradient(grad, alpha):
    """Per-entry clamp to ``[-alpha, alpha]``."""
    return np.clip(grad, -alpha, alpha)


def guided_step(a_tau, v, grad, lam, alpha, delta, field_id=None):
    """One guided Euler step ``a + delta * (v - lam * clip(grad, alpha))``."""
    a_tau = np.asarray(a_tau, dtype=float)
    v = np.asarray(v, dtype=float)
    grad = np.asarray(grad, dtype=float)
    check_same_shape(a_tau, v, ("a_tau", "v"))
    check_same_shape(a_tau, grad, ("a_tau", "grad"))
    check_positive(alpha, "alpha")
    check_positive(delta, "delta")
    if not np.all(np.isfinite(grad)):
        raise GuidanceError(f"non-finite guidance gradient from field {field_id!r}", field_id=field_id)
    return a_tau + delta * (v - lam * clip_gradient(grad, alpha))


def _chunk_shape(policy, n_samples):
    shape = tuple(policy.chunk_shape)
    if n_samples is not None:
        shape = (int(n_samples),) + shape
    return shape


def _integrate(policy, obs, a, num_steps):
    delta = 1.0 / num_steps
    for k in range(num_steps):
        v = policy.velocity(a, k / num_steps, obs)
        a = a + delta * v
    return a


def sample_unguided(policy, obs, cfg, n_samples=None, timer=None):
    """Draw ``A_0 ~ N(0, I)`` from ``cfg.seed`` and integrate K Euler steps.

    ``n_samples`` adds a leading batch axis; samples are drawn from one
    generator so the result is a pure function of (seed, cfg, policy, obs).
    """
    rng = np.random.default_rng(cfg.seed)
    a = rng.standard_normal(_chunk_shape(policy, n_samples))
    delta = cfg.delta
    for tau in cfg.schedule():
        with _timed(timer, "velocity"):
            v = policy.velocity(a, tau, obs)
        a = a + delta * v
    return a


def select_initial_noise(policy, obs, chain, n_candidates, k_init, seed, n_samples=None,
                         weights=None, return_energies=False):
    """Best-of-N initial noise under the chain's total energy.

    Each candidate is denoised with ``k_init`` unguided Euler steps; the
    candidate whose approximate clean chunk has the lowest energy wins, ties
    going to the lowest index. Candidate 0 is the same draw
    :func:`sample_unguided` would use with the same seed.
    """
    n_candidates = int(n_candidates)
    if n_candidates < 1 or int(k_init) < 1:
        raise ValueError("n_candidates and k_init must be >= 1")
    rng = np.random.default_rng(seed)
    base = _chunk_shape(policy, n_samples)
    candidates = rng.standard_normal((n_candidates,) + base)
    if n_candidates == 1:
        out = candidates[0]
        if return_energies:
            return out, None, np.zeros(base[:-2], dtype=int)
        return out
    a1 = _integrate(policy, obs, candidates, int(k_init))
    energies = chain.total_energy(a1, weights=weights)
    finite = np.isfinite(energies)
    if not np.any(finite, axis=0).all():
        raise GuidanceError("all initial-noise candidates have non-finite energy", stage="init")
    masked = np.where(finite, energies, np.inf)
    best = np.argmin(masked, axis=0)
    out = np.take_along_axis(candidates, best[None, ..., None, None], axis=0)[0]
    if return_energies:
        return out, energies, best
    return out


def sample_guided(policy, obs, chain, cfg, n_samples=None, init_guidance=True,
                  denoise_guidance=True, timer=None):
    """Guided flow sampling with optional initial-noise selection.

    Each step evaluates the velocity, forms the clean estimate, pulls every
    active field's energy gradient back to ``A_tau`` through ``chain``, clips
    each field's gradient per entry and subtracts the weighted sum from the
    velocity. With no active field the result is bit-identical to
    :func:`sample_unguided` under the same seed.

    Returns ``(chunk, DenoiseDiagnostics)``.
    """
    diag = DenoiseDiagnostics()
    weights = chain.resolve_weights(cfg.guidance_weights)
    active = [i for i, lam in enumerate(weights) if lam > 0]

    use_init = init_guidance and int(cfg.init_candidates) > 1 and bool(active)
    if use_init:
        with _timed(timer, "init_selection"):
            a, energies, best = select_initial_noise(
                policy, obs, chain, cfg.init_candidates, cfg.init_denoise_steps, cfg.seed,
                n_samples=n_samples, weights=weights, return_energies=True)
        diag.init_energies = energies
        diag.init_selected = best
    else:
        rng = np.random.default_rng(cfg.seed)
        a = rng.standard_normal(_chunk_shape(policy, n_samples))

    delta = cfg.delta
    alpha = float(cfg.clip_alpha)
    run_chain = denoise_guidance and bool(active)
    for step, tau in enumerate(cfg.schedule()):
        t0 = time.perf_counter()
        with _timed(timer, "velocity"):
            v = policy.velocity(a, tau, obs)
        if not run_chain:
            a = a + delta * v
            diag.steps.append(StepRecord(tau, float(np.linalg.norm(v)), 0.0, 0.0, 0.0, 0.0,
                                         float("nan"), time.perf_counter() - t0))
            continue
        with _timed(timer, "chain_gradient"):
            energies, grads = chain.field_gradients(
                a, tau, v, policy=policy, obs=obs, fields=active,
                jacobian=cfg.tweedie_jacobian, timer=timer)
        scale = cfg.ramp(tau)
        guidance = None
        pre_l2 = post_l2 = pre_max = post_max = 0.0
        total_energy = 0.0
        for j, idx in enumerate(active):
            g = grads[j]
            e_sum = float(np.sum(energies[j]))
            g_flat = g.ravel()
            # a single reduction propagates any nan or inf
            g_sq = float(g_flat @ g_flat)
            if not (math.isfinite(e_sum) and math.isfinite(g_sq)):
                fid = chain.fields[idx].field_id
                what = "energy" if not math.isfinite(e_sum) else "gradient"
                raise GuidanceError(f"non-finite {what} from field {fid!r} at step {step}",
                                    field_id=fid, step=step)
            g_max = float(np.abs(g_flat).max())
            if g_max > alpha:
                gc = clip_gradient(g, alpha)
                gc_flat = gc.ravel()
                post_l2 = max(post_l2, math.sqrt(float(gc_flat @ gc_flat)))
                post_max = max(post_max, alpha)
            else:
                gc = g
                post_l2 = max(post_l2, math.sqrt(g_sq))
                post_max = max(post_max, g_max)
            pre_l2 = max(pre_l2, math.sqrt(g_sq))
            pre_max = max(pre_max, g_max)
            term = (weights[idx] * scale) * gc
            guidance = term if guidance is None else guidance + term
            total_energy += weights[idx] * e_sum / np.size(energies[j])
        a = a + delta * (v - guidance)
        diag.steps.append(StepRecord(tau, float(np.linalg.norm(v)), pre_l2, post_l2, pre_max,
                                     post_max, total_energy, time.perf_counter() - t0))
    return a, diag
