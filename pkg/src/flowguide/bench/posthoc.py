"""Post-hoc trajectory repair: gradient descent on a sampled chunk.

The cost over the executed steps k < h is

    sum_k  w_align |x_k - x_k_ref|^2 + w_coll sum_p (d - sdf(p_k))_+^2
         + w_bound sum_k (|x_k - x_{k-1}| - v_max)_+^2
    + w_goal |x_{h-1} - x_{h-1}_ref|^2

with ``x`` the end-effector positions, ``p`` all probe points and the
reference taken from the unmodified chunk. Only the first ``h`` chunk rows
are optimised; plain gradient descent with Armijo backtracking.
"""

from dataclasses import dataclass

import numpy as np

from ..sdf import query_sdf_with_gradient


@dataclass
class PosthocConfig:
    w_align: float = 100.0
    w_coll: float = 1e7
    w_bound: float = 0.1
    w_goal: float = 100.0
    max_step: float = 0.03
    iterations: int = 100
    barrier_d: float = 0.05
    initial_step: float = 1.0


class PosthocOptimizer:
    def __init__(self, robot, config=None):
        self.robot = robot
        self.config = config or PosthocConfig()

    def _cost_and_grad(self, state, chunk, ref_ee, sdf, h):
        cfg = self.config
        traj = self.robot.rollout(state, chunk)
        pos = traj.positions[:h]
        ee = traj.ee_index
        x = pos[:, ee, :]
        G = np.zeros(traj.positions.shape)
        diff = x - ref_ee[:h]
        cost = cfg.w_align * np.sum(diff**2)
        G[:h, ee, :] += 2 * cfg.w_align * diff
        gdiff = x[-1] - ref_ee[h - 1]
        cost += cfg.w_goal * np.sum(gdiff**2)
        G[h - 1, ee, :] += 2 * cfg.w_goal * gdiff
        if sdf is not None and not sdf.empty and cfg.w_coll > 0:
            dist, grad = query_sdf_with_gradient(sdf, np.ascontiguousarray(pos.reshape(-1, 3)))
            pen = np.maximum(cfg.barrier_d - dist, 0.0)
            cost += cfg.w_coll * np.sum(pen**2)
            G[:h] += (-2 * cfg.w_coll * pen[:, None] * grad).reshape(pos.shape)
        if cfg.w_bound > 0:
            prev = np.vstack([self.robot.probe_positions(state)[ee][None], x[:-1]])
            step = x - prev
            n = np.linalg.norm(step, axis=1)
            over = np.maximum(n - cfg.max_step, 0.0)
            cost += cfg.w_bound * np.sum(over**2)
            unit = np.divide(step, n[:, None], out=np.zeros_like(step), where=n[:, None] > 0)
            gstep = 2 * cfg.w_bound * over[:, None] * unit
            G[:h, ee, :] += gstep
            G[:h - 1, ee, :] -= gstep[1:]
        grad = self.robot.vjp(state, chunk, G)
        grad[h:] = 0.0
        return float(cost), grad

    def optimize(self, state, chunk, sdf, executed_steps):
        """Return ``(repaired_chunk, info)``; ``info`` records costs and divergence."""
        cfg = self.config
        h = int(executed_steps)
        chunk = np.array(chunk, dtype=float)
        ref_ee = self.robot.rollout(state, chunk).ee_positions.copy()
        cost, grad = self._cost_and_grad(state, chunk, ref_ee, sdf, h)
        info = {"initial_cost": cost, "diverged": False, "iterations": 0}
        step = cfg.initial_step
        for it in range(int(cfg.iterations)):
            gn2 = float(np.sum(grad**2))
            if gn2 < 1e-18:
                break
            accepted = False
            t = step
            for _ in range(40):
                cand = chunk - t * grad
                c_new, g_new = self._cost_and_grad(state, cand, ref_ee, sdf, h)
                if np.isfinite(c_new) and c_new <= cost - 1e-4 * t * gn2:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            chunk, cost, grad = cand, c_new, g_new
            step = t * 2.0
            info["iterations"] = it + 1
        if not np.all(np.isfinite(chunk)):
            info["diverged"] = True
        info["final_cost"] = cost
        return chunk, info

    def hook(self, executed_steps):
        """Adapter for :func:`flowguide.sim.run_episode`'s ``chunk_hook``."""
        def _hook(chunk, state, scene, sdf):
            out, info = self.optimize(state, chunk, sdf, executed_steps)
            if info["diverged"]:
                raise FloatingPointError("post-hoc optimiser diverged")
            return out
        return _hook
