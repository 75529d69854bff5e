"""Experiment configuration: one TOML or JSON document per run.

Sections: ``[policy]``, ``[fields.<kind>]``, ``[sampler]``, ``[execution]``,
``[scenes]`` plus top-level ``trials``, ``seed``, ``out`` and an optional
``[sweep]`` or ``[posthoc]`` table. Missing sections fall back to the
per-experiment defaults in :data:`EXPERIMENT_DEFAULTS`.
"""

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..flow import SamplerConfig
from ..sim import ExecutionConfig, SCENE_FAMILIES


def default_lambda_grid(center=0.02, decades=4, n=8):
    """``n`` log-spaced weights spanning ``decades`` decades centred on ``center``."""
    half = decades / 2
    return [float(x) for x in center * np.logspace(-half, half, n)]


BENCH_FIELDS = {
    "collision": {"weight": 0.3, "barrier_d": 0.15, "floor_eps": 1e-4},
    "semantic": {"weight": 5.0, "sigma": 0.1},
}

EXPERIMENT_DEFAULTS = {
    "sweep-lambda": {
        "scenes": {"family": "corridor"},
        "fields": {"collision": {"weight": 0.02, "barrier_d": 0.15, "floor_eps": 1e-4}},
        "sampler": {"init_candidates": 1},
        "sweep": {"field": "collision", "grid": default_lambda_grid(), "include_zero": True},
    },
    "ablation": {
        "scenes": {"family": "cluttered"},
        "fields": BENCH_FIELDS,
        "sampler": {"init_candidates": 8, "init_denoise_steps": 4},
    },
    "synergy": {
        "scenes": {"family": "cluttered-multi-choice"},
        "fields": BENCH_FIELDS,
        "sampler": {"init_candidates": 8, "init_denoise_steps": 4},
    },
    "posthoc": {
        "scenes": {"family": "corridor"},
        "fields": {"collision": {"weight": 0.5, "barrier_d": 0.15, "floor_eps": 1e-4}},
        "sampler": {"init_candidates": 1},
        "posthoc": {"w_align": 100.0, "w_coll": 1e7, "w_bound": 0.1, "w_goal": 100.0,
                    "iterations": 100, "barrier_d": 0.05},
    },
    "latency": {
        "scenes": {"family": "cluttered"},
        "fields": BENCH_FIELDS,
        "sampler": {"init_candidates": 1},
        "chunks": 100,
    },
    "demo-follow": {
        "scenes": {"family": "demo"},
        "fields": {"human": {"weight": 1.0, "sigma": 0.05}},
        "sampler": {"init_candidates": 8, "init_denoise_steps": 4},
    },
}

POLICY_DEFAULTS = {"kind": "reaching-prior", "horizon": 15, "action_dim": 7, "step_size": 0.012,
                   "sigma": 0.3, "persistence": 3.0}
SAMPLER_DEFAULTS = {"num_steps": 16, "clip_alpha": 50.0, "init_candidates": 1,
                    "init_denoise_steps": 4, "guidance_schedule": "constant",
                    "tweedie_jacobian": "scaled"}
EXECUTION_DEFAULTS = {"horizon": 15, "executed_steps": 8, "max_chunks": 10, "success_radius": 0.05,
                      "collision_substeps": 4}


@dataclass
class ExperimentConfig:
    experiment: str
    policy: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    execution: dict = field(default_factory=dict)
    scenes: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    posthoc: dict = field(default_factory=dict)
    trials: int = 50
    seed: int = 0
    out: str = "results"
    chunks: int = 100

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_DEFAULTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        family = self.scenes.get("family")
        if family not in SCENE_FAMILIES and "files" not in self.scenes:
            raise ValueError(f"unknown scene family {family!r}")
        if self.experiment == "sweep-lambda":
            grid = self.sweep.get("grid", [])
            if not grid:
                raise ValueError("sweep grid must be non-empty")
            if any(g <= 0 for g in grid):
                raise ValueError("sweep grid values must be positive (use include_zero for 0)")
        for kind in self.fields:
            if kind not in ("collision", "semantic", "human"):
                raise ValueError(f"unknown field type {kind!r}")
        self.sampler_config()
        self.execution_config()

    def sampler_config(self, **overrides):
        params = {k: v for k, v in self.sampler.items() if k != "guidance_weights"}
        params.update(overrides)
        return SamplerConfig(**params)

    def execution_config(self):
        return ExecutionConfig(**self.execution)

    def to_dict(self):
        return {"experiment": self.experiment, "policy": self.policy, "fields": self.fields,
                "sampler": self.sampler, "execution": self.execution, "scenes": self.scenes,
                "sweep": self.sweep, "posthoc": self.posthoc, "trials": int(self.trials),
                "seed": int(self.seed), "chunks": int(self.chunks)}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_document(path):
    path = str(path)
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def build_config(experiment, doc=None, seed=None, trials=None, out=None):
    """Merge a user document over the experiment defaults and CLI overrides."""
    if experiment not in EXPERIMENT_DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    doc = dict(doc or {})
    base = {"policy": POLICY_DEFAULTS, "sampler": SAMPLER_DEFAULTS,
            "execution": EXECUTION_DEFAULTS}
    base = _merge(base, EXPERIMENT_DEFAULTS[experiment])
    if "fields" in doc:
        # a user field list replaces the defaults rather than extending them
        base["fields"] = {}
    merged = _merge(base, doc)
    merged.pop("experiment", None)
    if seed is not None:
        merged["seed"] = seed
    if trials is not None:
        merged["trials"] = trials
    if out is not None:
        merged["out"] = out
    known = set(ExperimentConfig.__dataclass_fields__) - {"experiment"}
    unknown = set(merged) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(experiment=experiment, **merged)


def load_config(experiment, path=None, **overrides):
    doc = read_document(path) if path else {}
    return build_config(experiment, doc, **overrides)
