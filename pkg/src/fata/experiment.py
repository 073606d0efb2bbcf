"""Glue between validated configs and the pretrain / adapt machinery."""

from __future__ import annotations

import re
from dataclasses import replace
from pathlib import Path

from . import data
from .adaptation import AdaptReport, evaluate, pretrain, run_scenario
from .config import ExperimentConfig, derive_seed
from .nn import LayerStack


def build_stack(cfg: ExperimentConfig, seed: int) -> LayerStack:
    return LayerStack(cfg.stack_config(), rng=derive_seed(seed, "init"))


def source_pools(cfg: ExperimentConfig, seed: int):
    task = cfg.task_for(seed)
    return (data.generate_pool(task, cfg.pretrain.n_train, "train"),
            data.generate_pool(task, cfg.pretrain.n_val, "val"))


def pretrain_source(cfg: ExperimentConfig, seed: int) -> tuple[LayerStack, dict]:
    stack = build_stack(cfg, seed)
    train, val = source_pools(cfg, seed)
    p = cfg.pretrain
    summary = pretrain(stack, train, epochs=p.epochs, lr=p.lr, batch_size=p.batch_size,
                       momentum=p.momentum, weight_decay=p.weight_decay,
                       seed=derive_seed(seed, "pretrain"), val=val)
    summary["seed"] = seed
    return stack, summary


def test_pool(cfg: ExperimentConfig, seed: int):
    return data.generate_pool(cfg.task_for(seed), cfg.stream.n_test, "test")


def build_stream(cfg: ExperimentConfig, seed: int, family: str, severity: int, pool=None):
    pool = test_pool(cfg, seed) if pool is None else pool
    s = cfg.stream
    spec = data.StreamSpec(
        scenario=s.scenario, batch_size=s.batch_size, num_batches=s.num_batches,
        corruption=data.CorruptionSpec(family, severity, derive_seed(seed, "corruption")),
        seed=derive_seed(seed, "stream"),
    )
    return data.make_stream(pool, spec)


def run_episode(cfg: ExperimentConfig, stack: LayerStack, seed: int, family: str,
                severity: int, method: str | None = None, pool=None, tag: str = "") -> AdaptReport:
    acfg = replace(cfg.adapt, method=method or cfg.method)
    batches = build_stream(cfg, seed, family, severity, pool)
    meta = {"method": acfg.method, "family": family, "severity": severity,
            "scenario": cfg.stream.scenario, "batch_size": cfg.stream.batch_size, "sweep": tag}
    return run_scenario(stack, batches, acfg, noise_seed=derive_seed(seed, "noise"),
                        seed=seed, meta=meta)


def clean_accuracy(cfg: ExperimentConfig, stack: LayerStack, seed: int) -> float:
    x, y = test_pool(cfg, seed)
    return evaluate(stack, x, y)


def episode_stem(method: str, family: str, severity: int, seed: int, tag: str = "") -> str:
    stem = f"{method}__{family}-s{severity}__seed{seed}"
    if tag:
        stem += "__" + re.sub(r"[^A-Za-z0-9_.=,-]", "", tag)
    return stem


def checkpoint_path(out_dir: str | Path, seed: int) -> Path:
    return Path(out_dir) / "pretrain" / f"seed{seed}.ckpt.json"
