"""Experiment runners: cells of episodes, resumable JSONL output and summaries.

A cell is one arm of an experiment (a guidance setting); every cell runs the
same trial seeds, so arms are paired. Trial ``t`` uses episode seed
``SeedSequence([master_seed, t])`` for both the scene and the sampler.
"""

import csv
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import binomtest

from .. import __version__
from ..flow import StageTimer
from ..policies import load_policy
from ..sdf import PointCloud, build_occupancy, compute_sdf
from ..sim import ReachingPrior, append_jsonl, load_scene, make_robot, make_scene, read_jsonl, run_episode
from .posthoc import PosthocConfig, PosthocOptimizer

logger = logging.getLogger(__name__)

CI_METHOD = "wilson"
CI_LEVEL = 0.95


@dataclass
class Cell:
    name: str
    arm: str
    value: Optional[float] = None
    weights: dict = field(default_factory=dict)
    init_guidance: bool = True
    denoise_guidance: bool = True
    posthoc: bool = False


def episode_seed(master, trial):
    return int(np.random.SeedSequence([int(master), int(trial)]).generate_state(1)[0])


def build_policy(spec):
    spec = dict(spec)
    kind = spec.pop("kind", "reaching-prior")
    if kind == "reaching-prior":
        return ReachingPrior(**spec)
    if kind == "file":
        return load_policy(spec["path"])
    raise ValueError(f"unknown policy kind {kind!r}")


def scene_for_trial(cfg, seed):
    files = cfg.scenes.get("files")
    if files:
        return load_scene(files[seed % len(files)])
    return make_scene(cfg.scenes["family"], seed)


def _zero(fields):
    return {k: 0.0 for k in fields}


def experiment_cells(cfg):
    """The arms of ``cfg.experiment`` in table order."""
    kinds = list(cfg.fields)
    exp = cfg.experiment
    if exp == "sweep-lambda":
        target = cfg.sweep.get("field", "collision")
        if target not in cfg.fields:
            raise ValueError(f"swept field {target!r} is not configured")
        grid = list(cfg.sweep["grid"])
        if cfg.sweep.get("include_zero", True):
            grid = [0.0] + grid
        return [Cell(f"lambda={lam:.6g}", "sweep", lam, {target: lam}, False, True) for lam in grid]
    if exp == "ablation":
        return [Cell("none", "none", None, {}, False, False),
                Cell("init-only", "init-only", None, {}, True, False),
                Cell("denoise-only", "denoise-only", None, {}, False, True),
                Cell("both", "both", None, {}, True, True)]
    if exp == "synergy":
        for need in ("semantic", "collision"):
            if need not in cfg.fields:
                raise ValueError(f"synergy needs a {need} field")
        return [Cell("none", "none", None, _zero(kinds)),
                Cell("semantic-only", "semantic-only", None, {"collision": 0.0}),
                Cell("collision-only", "collision-only", None, {"semantic": 0.0}),
                Cell("both", "both", None, {})]
    if exp == "posthoc":
        return [Cell("none", "none", None, _zero(kinds), False, False),
                Cell("posthoc", "posthoc", None, _zero(kinds), False, False, True),
                Cell("guided", "guided", None, {}, False, True)]
    if exp == "demo-follow":
        if "human" not in cfg.fields:
            raise ValueError("demo-follow needs a human field")
        return [Cell("none", "none", None, _zero(kinds), False, False),
                Cell("init-only", "init-only", None, {}, True, False),
                Cell("full", "full", None, {}, True, True),
                Cell("lambda_h=0", "zero-weight", 0.0, {"human": 0.0}, True, True)]
    raise ValueError(f"experiment {exp!r} has no cells")


def run_trial(cfg, cell, trial):
    """Run one episode and return its JSON record."""
    seed = episode_seed(cfg.seed, trial)
    scene = scene_for_trial(cfg, seed)
    policy = build_policy(cfg.policy)
    robot = make_robot()
    sampler = cfg.sampler_config(guidance_weights=dict(cell.weights))
    exec_cfg = cfg.execution_config()
    hook = None
    if cell.posthoc:
        opt = PosthocOptimizer(robot, PosthocConfig(**cfg.posthoc))
        hook = opt.hook(exec_cfg.executed_steps)
    res = run_episode(scene, policy, exec_cfg, sampler, seed=seed, robot=robot,
                      field_specs=cfg.fields, init_guidance=cell.init_guidance,
                      denoise_guidance=cell.denoise_guidance, chunk_hook=hook)
    rec = {"experiment": cfg.experiment, "cell": cell.name, "arm": cell.arm, "value": cell.value,
           "trial": int(trial), "seed": seed, "scene_id": scene.scene_id}
    rec.update(res.to_json())
    return rec


def _run_task(args):
    cfg, cell, trial = args
    return run_trial(cfg, cell, trial)


def wilson_interval(k, n, level=CI_LEVEL):
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return (float(ci.low), float(ci.high))


@dataclass
class CellSummary:
    cell: str
    arm: str
    value: Optional[float]
    trials: int
    successes: int
    success_rate: float
    success_ci: tuple
    safe: int
    safety_rate: float
    safety_ci: tuple
    mean_min_clearance: float
    mean_chunks: float
    mean_chunk_seconds: float
    mean_demo_deviation: Optional[float]
    ci_method: str = CI_METHOD

    def row(self):
        return {"cell": self.cell, "arm": self.arm,
                "value": "" if self.value is None else repr(self.value),
                "trials": self.trials, "successes": self.successes,
                "success_rate": repr(self.success_rate), "success_ci_low": repr(self.success_ci[0]),
                "success_ci_high": repr(self.success_ci[1]), "safe": self.safe,
                "safety_rate": repr(self.safety_rate), "safety_ci_low": repr(self.safety_ci[0]),
                "safety_ci_high": repr(self.safety_ci[1]),
                "mean_min_clearance": repr(self.mean_min_clearance),
                "mean_chunks": repr(self.mean_chunks),
                "mean_chunk_seconds": repr(self.mean_chunk_seconds),
                "mean_demo_deviation": "" if self.mean_demo_deviation is None else repr(self.mean_demo_deviation),
                "ci_method": self.ci_method}


class ResultTable:
    """Per-cell aggregates with Wilson intervals, in cell order."""

    def __init__(self, rows):
        self.rows = list(rows)

    def __getitem__(self, name):
        for r in self.rows:
            if r.cell == name:
                return r
        raise KeyError(name)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_records(cls, cells, records):
        by_cell = {}
        for rec in records:
            by_cell.setdefault(rec["cell"], {})[rec["trial"]] = rec
        rows = []
        for cell in cells:
            recs = [by_cell.get(cell.name, {})[t] for t in sorted(by_cell.get(cell.name, {}))]
            n = len(recs)
            s = sum(bool(r["success"]) for r in recs)
            f = sum(bool(r["safe"]) for r in recs)
            secs = [x for r in recs for x in r["chunk_seconds"]]
            devs = [r["demo_deviation"] for r in recs if r.get("demo_deviation") is not None]
            rows.append(CellSummary(
                cell.name, cell.arm, cell.value, n, s, s / n if n else 0.0, wilson_interval(s, n),
                f, f / n if n else 0.0, wilson_interval(f, n),
                float(np.mean([r["min_clearance"] for r in recs])) if n else float("nan"),
                float(np.mean([r["chunks"] for r in recs])) if n else float("nan"),
                float(np.mean(secs)) if secs else 0.0,
                float(np.mean(devs)) if devs else None))
        return cls(rows)

    def deterministic_rows(self):
        """Rows without the wall-clock column, for reproducibility checks."""
        out = []
        for r in self.rows:
            d = r.row()
            d.pop("mean_chunk_seconds")
            out.append(d)
        return out

    def write_csv(self, path):
        rows = [r.row() for r in self.rows]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["cell"])
            w.writeheader()
            w.writerows(rows)

    def format(self):
        lines = [f"{'cell':<22}{'n':>4}  {'success':>22}  {'safety':>22}  clearance"]
        for r in self.rows:
            lines.append(
                f"{r.cell:<22}{r.trials:>4}  {r.success_rate:6.2f} [{r.success_ci[0]:.2f},{r.success_ci[1]:.2f}]"
                f"      {r.safety_rate:6.2f} [{r.safety_ci[0]:.2f},{r.safety_ci[1]:.2f}]"
                f"      {r.mean_min_clearance:.3f}")
        return "\n".join(lines)


def versions():
    import numba
    import scipy
    import sklearn

    return {"flowguide": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__, "numba": numba.__version__}


class ResultsConflict(RuntimeError):
    """The output directory already holds results of another config."""


def _prepare_out(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta_path = os.path.join(out_dir, "meta.json")
    digest = cfg.digest()
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            old = json.load(fh)
        if old.get("config_hash") != digest:
            raise ResultsConflict(f"{out_dir} holds results of a different config; choose another --out")
    meta = {"config_hash": digest, "config": cfg.to_dict(), "versions": versions(),
            "ci_method": CI_METHOD, "ci_level": CI_LEVEL}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return os.path.join(out_dir, "episodes.jsonl")


def run_experiment(cfg, out_dir=None, parallel=1, progress=None):
    """Run (or resume) every cell of ``cfg``; returns the :class:`ResultTable`.

    Episodes already present in ``<out>/episodes.jsonl`` are not rerun.
    Workers return records by value and only this process writes the stream.
    """
    out_dir = out_dir or cfg.out
    cells = experiment_cells(cfg)
    stream = _prepare_out(cfg, out_dir)
    done = {}
    if os.path.exists(stream):
        for rec in read_jsonl(stream):
            done[(rec["cell"], rec["trial"])] = rec
    tasks = [(cfg, c, t) for c in cells for t in range(int(cfg.trials)) if (c.name, t) not in done]
    if tasks:
        logger.info("running %d episodes (%d already done)", len(tasks), len(done))
    results = _map(tasks, parallel)
    for i, rec in enumerate(results):
        append_jsonl(stream, rec)
        done[(rec["cell"], rec["trial"])] = rec
        if progress:
            progress(i + 1, len(tasks))
    table = ResultTable.from_records(cells, done.values())
    table.write_csv(os.path.join(out_dir, "summary.csv"))
    return table


def _map(tasks, parallel):
    if int(parallel) <= 1 or len(tasks) <= 1:
        for t in tasks:
            yield _run_task(t)
        return
    with ProcessPoolExecutor(max_workers=int(parallel)) as pool:
        yield from pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * int(parallel))))


# ---------------------------------------------------------------------------
# Latency


def measure_grid_rebuild(dims=64, n_points=4000, repeats=5, seed=0):
    """Best-of-``repeats`` seconds to build occupancy plus distances on a ``dims``^3 grid."""
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.random((n_points, 3)))
    bounds = (np.zeros(3), np.ones(3))
    build_occupancy(cloud, 1.0 / dims, bounds)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        compute_sdf(build_occupancy(cloud, 1.0 / dims, bounds))
        best = min(best, time.perf_counter() - t0)
    return best


def run_latency(cfg, out_dir=None):
    """Per-chunk wall-clock of guided versus unguided sampling.

    Runs episodes of the configured family with and without guidance until
    ``cfg.chunks`` chunks are collected per arm. Reports the mean per-chunk
    inference time (conditioning the prior plus sampling), the mean full
    loop time (including execution checks), per-step and per-stage
    breakdowns and the 64^3 grid rebuild time.
    """
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    policy = build_policy(cfg.policy)
    robot = make_robot()
    exec_cfg = cfg.execution_config()
    steps = int(cfg.sampler.get("num_steps", 16))
    # warm compiled kernels outside the measurement
    warm = make_scene(cfg.scenes["family"], 0)
    run_episode(warm, policy, exec_cfg, cfg.sampler_config(), 0, robot, cfg.fields)
    report = {"chunks_target": int(cfg.chunks), "num_steps": steps}
    arms = {"unguided": {k: 0.0 for k in cfg.fields}, "guided": {}}
    for arm, weights in arms.items():
        sampler = cfg.sampler_config(guidance_weights=weights)
        guided = arm == "guided"

        def collect(timer):
            infer, loop = [], []
            trial = 0
            while len(infer) < int(cfg.chunks):
                seed = episode_seed(cfg.seed, trial)
                scene = scene_for_trial(cfg, seed)
                res = run_episode(scene, policy, exec_cfg, sampler, seed, robot, cfg.fields,
                                  init_guidance=guided, denoise_guidance=guided, timer=timer)
                infer.extend(res.inference_seconds)
                loop.extend(res.chunk_seconds)
                trial += 1
            return infer[:int(cfg.chunks)], loop[:int(cfg.chunks)], trial

        # wall-clock is taken without stage instrumentation, which has its own
        # cost; the per-stage breakdown comes from a second instrumented pass
        infer, loop, trials = collect(None)
        timer = StageTimer()
        collect(timer)
        stages = {k: v / int(cfg.chunks) for k, v in timer.totals.items()}
        stages.setdefault("chain_gradient", 0.0)
        report[arm] = {
            "chunks": len(infer), "episodes": trials,
            "mean_inference_seconds": float(np.mean(infer)),
            "mean_loop_seconds": float(np.mean(loop)),
            "mean_step_seconds": float(np.mean(infer)) / steps,
            "stage_seconds_per_chunk": stages,
        }
    report["ratio_inference"] = report["guided"]["mean_inference_seconds"] / report["unguided"]["mean_inference_seconds"]
    report["ratio_loop"] = report["guided"]["mean_loop_seconds"] / report["unguided"]["mean_loop_seconds"]
    report["grid_rebuild_64_seconds"] = measure_grid_rebuild()
    with open(os.path.join(out_dir, "latency.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "mean_inference_seconds", "mean_loop_seconds", "mean_step_seconds"])
        for arm in arms:
            r = report[arm]
            w.writerow([arm, repr(r["mean_inference_seconds"]), repr(r["mean_loop_seconds"]),
                        repr(r["mean_step_seconds"])])
    meta = {"config_hash": cfg.digest(), "config": cfg.to_dict(), "versions": versions()}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return report
