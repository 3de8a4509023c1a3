"""Ablation ladder and balancing-strategy grid over shared seeds and datasets."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..synthdata import generate
from .config import METHODS, RunConfig
from .training import RunArtifacts, run_training

log = logging.getLogger(__name__)

LADDER = ("baseline", "gate", "gate+meta", "gate+btg", "bmcl")
LEARNERS = ("backbone", "meta")
BALANCES = ("none", "LB", "MB", "GB")


class DatasetMismatch(ValueError):
    """Runs being compared were trained or evaluated on different datasets."""


@dataclass
class CellResult:
    name: str
    seeds: list[int]
    test: list[float]
    val: list[float]
    dataset_hashes: list[str]
    extra: dict[str, list[float]] = field(default_factory=dict)

    @property
    def test_mean(self) -> float:
        return float(np.mean(self.test))

    @property
    def test_std(self) -> float:
        return float(np.std(self.test))

    @property
    def val_mean(self) -> float:
        return float(np.mean(self.val))


@dataclass
class ComparisonReport:
    title: str
    cells: dict[str, CellResult]
    seeds: list[int]

    def to_dict(self) -> dict:
        return {"title": self.title, "seeds": self.seeds,
                "cells": {k: asdict(v) | {"test_mean": v.test_mean, "test_std": v.test_std,
                                          "val_mean": v.val_mean} for k, v in self.cells.items()}}

    def format(self) -> str:
        extras = sorted({k for c in self.cells.values() for k in c.extra})
        head = f"{'method':<16}{'test mean':>10}{'test std':>10}{'val mean':>10}" + "".join(
            f"{k:>16}" for k in extras)
        lines = [self.title, head, "-" * len(head)]
        for name, c in self.cells.items():
            row = f"{name:<16}{c.test_mean:>10.2f}{c.test_std:>10.2f}{c.val_mean:>10.2f}"
            row += "".join(f"{np.mean(c.extra[k]):>16.4f}" if k in c.extra else f"{'':>16}" for k in extras)
            lines.append(row)
        lines.append("seeds: " + " ".join(map(str, self.seeds)))
        lines.append("per-seed test:")
        for name, c in self.cells.items():
            lines.append(f"  {name:<14}" + " ".join(f"{v:6.2f}" for v in c.test))
        return "\n".join(lines) + "\n"

    def save(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = self.title.lower().replace(" ", "_")
        txt, js = directory / f"{stem}.txt", directory / f"{stem}.json"
        txt.write_text(self.format())
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return txt, js


def behaviour_hash(cfg: RunConfig) -> str:
    """Config hash ignoring the method's display name and the output directory."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d["method"].pop("name")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class RunCache:
    """Reuses finished runs whose behaviour (config minus names) is identical."""

    def __init__(self):
        self._runs: dict[str, RunArtifacts] = {}

    def __len__(self) -> int:
        return len(self._runs)

    def runs(self) -> list[RunArtifacts]:
        return list(self._runs.values())

    def get(self, cfg: RunConfig, data) -> RunArtifacts:
        key = behaviour_hash(cfg)
        if key not in self._runs:
            self._runs[key] = run_training(cfg, data)
        return self._runs[key]


def check_same_datasets(results: Iterable[RunArtifacts]) -> str:
    hashes = {r.dataset_hash for r in results}
    if len(hashes) != 1:
        raise DatasetMismatch(f"refusing to compare runs over different datasets: {sorted(hashes)}")
    return hashes.pop()


def _run_cells(base: RunConfig, cells: dict[str, object], seeds: Sequence[int], title: str,
               output_dir=None, cache: RunCache | None = None, extra_keys=()) -> ComparisonReport:
    cache = cache if cache is not None else RunCache()
    results = {name: CellResult(name, [], [], [], []) for name in cells}
    for seed in seeds:
        cfg_seed = base.with_seed(seed)
        data = generate(cfg_seed.gen)
        per_seed = []
        for name, method in cells.items():
            cfg = cfg_seed.with_method(method)
            if output_dir is not None:
                cfg = replace(cfg, output_dir=str(Path(output_dir) / f"seed{seed}" / name.replace("/", "_")))
            art = cache.get(cfg, data) if output_dir is None else run_training(cfg, data)
            per_seed.append(art)
            cell = results[name]
            cell.seeds.append(seed)
            cell.test.append(art.final["test_acc"])
            cell.val.append(art.final["val_acc"])
            cell.dataset_hashes.append(art.dataset_hash)
            for key in extra_keys:
                if key in art.final:
                    cell.extra.setdefault(key, []).append(art.final[key])
            log.info("%s seed %d %s test %.2f", title, seed, name, art.final["test_acc"])
        check_same_datasets(per_seed)
    report = ComparisonReport(title, results, list(seeds))
    if output_dir is not None:
        report.save(output_dir)
    return report


def run_ablation(base: RunConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4), output_dir=None,
                 cache: RunCache | None = None, methods: Sequence[str] = LADDER) -> ComparisonReport:
    """Train the ladder baseline, +gate, +gate+meta, +gate+BTG, full method on shared seeds."""
    cells = {name: METHODS[name] for name in methods}
    return _run_cells(base, cells, seeds, "Ablation", output_dir, cache,
                      extra_keys=("gate_class", "gate_context", "balance_entropy"))


def run_balance_comparison(base: RunConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4), output_dir=None,
                           cache: RunCache | None = None, learners: Sequence[str] = LEARNERS,
                           balances: Sequence[str] = BALANCES) -> ComparisonReport:
    """Grid of balancing strategies under the backbone and the meta learner."""
    cells = {f"{learner}/{b}": METHODS[f"{learner}/{b}"] for learner in learners for b in balances}
    return _run_cells(base, cells, seeds, "Balance comparison", output_dir, cache,
                      extra_keys=("balance_entropy",))
