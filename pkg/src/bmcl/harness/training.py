"""Two-stage training: periodic partition refresh (stage 1) around model updates (stage 2)."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import btg
from .. import mcfl
from .. import model as mdl
from ..synthdata import Dataset, generate, save_dataset
from .config import RunConfig
from .metrics import MetricsRecord, MetricsStream, top1_accuracy

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    """A loss or gradient went non-finite; the run was aborted."""


@dataclass
class RunArtifacts:
    config: RunConfig
    params: dict
    metrics: list[dict]
    final: dict
    partition: btg.Partition | None = None
    balance: dict | None = None
    warnings: list[str] = field(default_factory=list)
    dataset_hash: str = ""
    elapsed: float = 0.0


def evaluate(params, data: Dataset, head: str = "task") -> float:
    return top1_accuracy(mdl.predict_numpy(data.features, params, head), data.classes).accuracy


def gate_mass(params, data: Dataset) -> tuple[float, float]:
    """Mean gate value over class-signal and context-signal coordinates."""
    a = mdl.gate_values(data.features, params)
    c0, c1 = data.meta["class_dims"]
    s0, s1 = data.meta["context_dims"]
    return float(a[:, c0:c1].mean()), float(a[:, s0:s1].mean())


def _erm_step(params, x, y, splits, method, lr, mix_cfg, num_classes, rng):
    """Backbone step on the task head.

    Without splits: plain (optionally mixup) cross-entropy.  With splits: the
    mean of per-split risks plus ``causal_weight`` times the per-split IRM
    penalty of the task head, so every split counts equally whatever its size.
    """
    tape = ad.Tape()
    names = mdl.encoder_names(params) + mdl.head_names(params, "task")
    pvars = tape.parameters_from(params, names)
    if method.mixup:
        batch = mcfl.mixup_batch(x, y, num_classes, mix_cfg, rng)
        xb, target = batch.x, batch.y
    else:
        xb, target = x, y
    feats = mdl.encode(tape.constant(xb), pvars, tape)
    logits = mdl.head_logits(feats, pvars, "task")
    penalty_value = 0.0
    if splits is None or method.mixup:
        loss = ad.softmax_cross_entropy(logits, target)
        erm_value = float(loss.value)
    else:
        ce = ad.softmax_cross_entropy(logits, y, reduction="none")
        probs = ad.softmax(logits, axis=1)
        dw = ad.sum((probs - mcfl.one_hot(y, num_classes)) * logits, axis=1)
        present = np.unique(splits)
        # column t averages the samples of split t
        sel = np.zeros((len(y), len(present)))
        for col, t in enumerate(present):
            sel[splits == t, col] = 1.0 / (splits == t).sum()
        risks = ad.reshape(ad.reshape(ce, (1, len(y))) @ sel, (len(present),))
        loss = ad.mean(risks)
        erm_value = float(loss.value)
        if method.causal_weight:
            grads_w = ad.reshape(ad.reshape(dw, (1, len(y))) @ sel, (len(present),))
            penalty = ad.sum(ad.square(grads_w))
            penalty_value = float(penalty.value)
            loss = loss + ad.scale(penalty, method.causal_weight)
    if not np.isfinite(loss.value):
        raise NumericFailure("non-finite backbone loss")
    grads = tape.backward(loss)
    new = {k: (v - lr * grads[k] if k in grads else v) for k, v in params.items()}
    return new, {"erm": erm_value, "irm_penalty": penalty_value}


def _split_batches(partition: btg.Partition, batch_size: int, n: int, rng):
    """Minibatches with ``batch_size // m`` draws from every non-empty split."""
    members = [mem for mem in partition.members if len(mem)]
    per = max(1, batch_size // len(members))
    for _ in range(max(1, n // batch_size)):
        yield np.concatenate([rng.choice(mem, size=per, replace=len(mem) < per) for mem in members])


def _refresh_partition(cfg: RunConfig, params, train: Dataset, seed: int, warnings):
    feats = btg.confound_features(train.features, params)
    res = btg.build_partition(cfg.btg, feats, train.classes, train.num_classes, seed)
    warnings.extend(res.warnings)
    report = btg.balance_report(res.partition, train.classes, train.num_classes, res.strategy,
                                train.contexts, train.num_contexts,
                                "risk+penalty" if cfg.btg.risk_ascent else "penalty")
    return res.partition, res.probs, report


def run_training(cfg: RunConfig, data: tuple[Dataset, Dataset, Dataset] | None = None,
                 progress: bool = False) -> RunArtifacts:
    """Train one method end to end.  Deterministic given ``cfg`` (including seed)."""
    t0 = time.perf_counter()
    train, val, test = data if data is not None else generate(cfg.gen)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        (out / "FAILED").unlink(missing_ok=True)
    chash = cfg.config_hash()
    stream = MetricsStream(out / "metrics.jsonl" if out else None)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, part_rng, task_rng, batch_rng = (np.random.default_rng(s) for s in seeds)

    params = mdl.init_params(cfg.model, init_rng)
    method = cfg.method
    warnings: list[str] = []
    partition = probs = report = None
    if method.partition != "none":
        partition = btg.Partition.random(len(train), cfg.btg.num_splits, part_rng)
        report = btg.balance_report(partition, train.classes, train.num_classes, "random")
    refresh = set(cfg.refresh_epochs()) if method.partition == "learned" else set()
    n = len(train)
    x, y = train.features, train.classes
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            if epoch in refresh:
                partition, probs, report = _refresh_partition(cfg, params, train, cfg.seed * 1000 + epoch,
                                                              warnings)
            losses: dict[str, list[float]] = {}
            if method.meta:
                rounds = cfg.meta.tasks_per_epoch // cfg.btg.num_splits
                for update in range(rounds):
                    tasks = mcfl.sample_meta_tasks(partition, y, cfg.meta, task_rng, warnings)
                    batch = None
                    if method.mixup:
                        idx = batch_rng.choice(n, size=cfg.mixup.batch_size, replace=False)
                        batch = mcfl.mixup_batch(x[idx], y[idx], train.num_classes, cfg.mixup, batch_rng)
                    step, params = mcfl.stage2_step(params, tasks, batch, x, y, cfg.meta, lr,
                                                    erm_weight=1.0 if method.mixup else 0.0)
                    if not np.isfinite(step.total):
                        raise NumericFailure(f"non-finite stage-2 loss at epoch {epoch}")
                    stream.append({"epoch": epoch, "split": "update", "update": update,
                                   "task_names": [t.name for t in tasks]} | step.as_record())
                    losses.setdefault("meta", []).append(step.meta_loss)
                    losses.setdefault("erm", []).append(step.erm_loss)
                    losses.setdefault("total", []).append(step.total)
                    losses.setdefault("meta_grad_norm", []).append(step.meta_grad_norm)
                    losses.setdefault("erm_grad_norm", []).append(step.erm_grad_norm)
            else:
                if partition is not None:
                    batches = _split_batches(partition, cfg.batch_size, n, batch_rng)
                else:
                    order = batch_rng.permutation(n)
                    batches = (order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size))
                for idx in batches:
                    if len(idx) < 2:
                        continue
                    splits = partition.assignment[idx] if partition is not None else None
                    params, parts = _erm_step(params, x[idx], y[idx], splits, method, lr, cfg.mixup,
                                              train.num_classes, batch_rng)
                    for k, v in parts.items():
                        losses.setdefault(k, []).append(v)
            summary = {k: float(np.mean(v)) for k, v in losses.items()}
            entropy = report["entropy"] if report else None
            for split_name, ds in (("val", val), ("test", test)):
                stream.append(MetricsRecord(epoch, split_name, evaluate(params, ds), summary, entropy, chash))
            if progress:
                log.info("epoch %d lr %.4g %s", epoch, lr, summary)
    except (FloatingPointError, NumericFailure) as exc:
        if out is not None:
            (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise NumericFailure(str(exc)) from exc

    final = {"val_acc": evaluate(params, val), "test_acc": evaluate(params, test),
             "train_acc": evaluate(params, train), "config_hash": chash,
             "dataset_hash": train.config_hash, "method": method.name, "seed": cfg.seed}
    if cfg.model.use_gate:
        final["gate_class"], final["gate_context"] = gate_mass(params, test)
    if report is not None:
        final["balance_entropy"] = report["entropy"]
    elapsed = time.perf_counter() - t0
    if out is not None:
        mdl.save_checkpoint(out / "checkpoint.npz", params, cfg.model,
                            {"config_hash": chash, "dataset_hash": train.config_hash})
        (out / "report.json").write_text(json.dumps(final, indent=2, sort_keys=True))
        (out / "timing.json").write_text(json.dumps({"elapsed_s": elapsed}))
        if partition is not None:
            btg.export_partition(out / "partition.txt",
                                 partition, probs if probs is not None else np.full(
                                     (n, cfg.btg.num_splits), 1.0 / cfg.btg.num_splits))
            (out / "balance_report.txt").write_text(btg.format_balance_report(report))
    return RunArtifacts(cfg, params, stream.records, final, partition, report, warnings,
                        train.config_hash, elapsed)


def write_datasets(cfg: RunConfig, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_dataset(ds, directory / f"{ds.role}.bmclds") for ds in generate(cfg.gen)]
