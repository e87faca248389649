"""Run configuration: a strict YAML document wired to the library types.

Unknown keys are rejected with their full path so sweep scripts cannot
silently typo a knob. Every command writes the fully resolved document
(defaults filled in) next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .budget import BudgetConfig
from .data import SceneConfig
from .errors import ConfigError
from .model import EncoderConfig, LayerConfig, TrainConfig

_LAYER_KEYS = {"sampler", "n_queries", "radii", "samples", "mlp", "out",
               "fans", "dynamic"}

_SCHEMA = {
    "data": {
        "generate": {"n_scenes", "n_points", "bg_ratio", "object_count",
                     "size_log_mean", "size_log_sigma", "extent", "seed"},
        "path": None,
        "eval_scenes": None,
        "eval_seed": None,
    },
    "encoder": {
        "in_channels": None,
        "head_hidden": None,
        "gate_granularity": None,
        "seed": None,
        "layers": None,  # list of layer dicts, validated separately
    },
    "budget": {"lambda": None, "gamma": None, "tau": None,
               "batch_average": None, "expected_cost": None},
    "train": {"epochs": None, "lr": None, "batch": None, "onecycle": None,
              "aux_weight": None, "seeds": None, "dense_gradients": None},
    "bench": {"reps": None, "warmup": None, "counts": None},
    "paths": {"latency_map": None, "checkpoint_dir": None, "csv_dir": None},
}

_DEFAULTS = {
    "data": {
        "generate": {"n_scenes": 64, "n_points": 2048, "bg_ratio": 0.75,
                     "object_count": [3, 6], "size_log_mean": 0.3,
                     "size_log_sigma": 0.3, "extent": [24.0, 24.0, 6.0],
                     "seed": 7},
        "path": None,
        "eval_scenes": 16,
        "eval_seed": 9091,
    },
    "encoder": {
        "in_channels": 1,
        "head_hidden": 64,
        "gate_granularity": "pointwise",
        "seed": 0,
        "layers": [
            {"sampler": "fan_fps", "fans": 4, "n_queries": 512,
             "radii": [0.2, 0.8], "samples": [16, 32], "mlp": [32, 32],
             "out": 32, "dynamic": True},
            {"sampler": "topk", "n_queries": 256, "radii": [0.8, 1.6],
             "samples": [16, 32], "mlp": [64, 64], "out": 64, "dynamic": True},
            {"sampler": "topk", "n_queries": 128, "radii": [1.6, 4.8],
             "samples": [16, 32], "mlp": [128, 128], "out": 128, "dynamic": True},
        ],
    },
    "budget": {"lambda": 0.1, "gamma": 0.0, "tau": 1.0,
               "batch_average": True, "expected_cost": False},
    "train": {"epochs": 4, "lr": 1e-3, "batch": 4, "onecycle": True,
              "aux_weight": 1.0, "seeds": [0], "dense_gradients": False},
    "bench": {"reps": 7, "warmup": 2, "counts": None},
    "paths": {"latency_map": "latency_map.csv", "checkpoint_dir": "checkpoints",
              "csv_dir": "metrics"},
}


def _reject_unknown(doc: dict, schema: dict, path: str = "") -> None:
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                if value is not None:
                    raise ConfigError(f"config key {where!r} must be a mapping")
                continue
            _reject_unknown(value, sub, where)
        elif isinstance(sub, set):
            if not isinstance(value, dict):
                if value is not None:
                    raise ConfigError(f"config key {where!r} must be a mapping")
                continue
            for k2 in value:
                if k2 not in sub:
                    raise ConfigError(f"unknown config key {where}.{k2!r}")


def _merge(defaults, doc):
    if isinstance(defaults, dict) and isinstance(doc, dict):
        out = {}
        for key, dv in defaults.items():
            out[key] = _merge(dv, doc[key]) if key in doc else dv
        return out
    return doc if doc is not None else defaults


@dataclass
class RunConfig:
    """Everything one command needs, already validated."""

    raw: dict
    scene_cfg: SceneConfig
    n_scenes: int
    data_seed: int
    data_path: str | None
    eval_scenes: int
    eval_seed: int
    encoder: EncoderConfig
    lambdas: list[float]
    budget_base: BudgetConfig
    train: TrainConfig
    bench_reps: int
    bench_warmup: int
    bench_counts: list | None
    seeds: list[int]
    paths: dict[str, str]

    def budget_for(self, lam: float) -> BudgetConfig:
        return BudgetConfig(lam=lam, gamma=self.budget_base.gamma,
                            batch_average=self.budget_base.batch_average)


def _build_encoder_config(enc: dict, tau: float) -> EncoderConfig:
    layers = []
    for i, ld in enumerate(enc["layers"]):
        if not isinstance(ld, dict):
            raise ConfigError(f"encoder.layers[{i}] must be a mapping")
        for key in ld:
            if key not in _LAYER_KEYS:
                raise ConfigError(f"unknown config key encoder.layers[{i}].{key!r}")
        if not {"sampler", "n_queries", "radii", "samples", "mlp", "out"} <= set(ld):
            raise ConfigError(f"encoder.layers[{i}] is missing required keys")
        layers.append(LayerConfig(
            sampler=ld["sampler"], n_queries=int(ld["n_queries"]),
            radii=tuple(float(r) for r in ld["radii"]),
            samples=tuple(int(s) for s in ld["samples"]),
            mlp=tuple(int(w) for w in ld["mlp"]), out=int(ld["out"]),
            fans=int(ld.get("fans", 4)), dynamic=bool(ld.get("dynamic", True))))
    return EncoderConfig(layers=layers, head_hidden=int(enc["head_hidden"]),
                         gate_granularity=enc["gate_granularity"],
                         tau=tau, seed=int(enc["seed"]))


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown(doc, _SCHEMA)
    merged = _merge(_DEFAULTS, doc)

    gen = merged["data"]["generate"]
    scene_cfg = SceneConfig(
        n_points=int(gen["n_points"]), bg_ratio=float(gen["bg_ratio"]),
        object_count=tuple(int(v) for v in gen["object_count"]),
        size_log_mean=float(gen["size_log_mean"]),
        size_log_sigma=float(gen["size_log_sigma"]),
        extent=tuple(float(v) for v in gen["extent"]))

    bud = merged["budget"]
    lam = bud["lambda"]
    lambdas = [float(v) for v in lam] if isinstance(lam, (list, tuple)) else [float(lam)]
    budget_base = BudgetConfig(lam=lambdas[0], gamma=float(bud["gamma"]),
                               batch_average=bool(bud["batch_average"]))

    tr = merged["train"]
    train_cfg = TrainConfig(
        epochs=int(tr["epochs"]), lr=float(tr["lr"]), batch=int(tr["batch"]),
        onecycle=bool(tr["onecycle"]), aux_weight=float(tr["aux_weight"]),
        expected_cost=bool(bud["expected_cost"]),
        dense_gradients=bool(tr["dense_gradients"]))

    encoder = _build_encoder_config(merged["encoder"], float(bud["tau"]))

    return RunConfig(
        raw=merged,
        scene_cfg=scene_cfg,
        n_scenes=int(gen["n_scenes"]),
        data_seed=int(gen["seed"]),
        data_path=merged["data"]["path"],
        eval_scenes=int(merged["data"]["eval_scenes"]),
        eval_seed=int(merged["data"]["eval_seed"]),
        encoder=encoder,
        lambdas=lambdas,
        budget_base=budget_base,
        train=train_cfg,
        bench_reps=int(merged["bench"]["reps"]),
        bench_warmup=int(merged["bench"]["warmup"]),
        bench_counts=merged["bench"]["counts"],
        seeds=[int(s) for s in tr["seeds"]],
        paths=dict(merged["paths"]),
    )


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    return parse_run_config(doc)


def write_resolved(run: RunConfig, out_dir) -> Path:
    out = Path(out_dir) / "resolved_config.yaml"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        yaml.safe_dump(run.raw, fh, sort_keys=True)
    return out
