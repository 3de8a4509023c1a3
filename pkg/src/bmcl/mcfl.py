"""Meta-causal feature learning: per-split meta-tasks plus a mixup ERM branch.

One update round draws one task per split.  Each task adapts the shared
encoder/gate (phi) and task head (mu) on its support set, then scores the
query set with the adapted snapshot.  The outer step moves the base snapshot
along the averaged query gradient; the mixup ERM loss on the auxiliary head is
added in the same step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .btg import Partition

Params = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class MetaTaskConfig:
    ways: int = 3
    support_per_class: int = 2
    query_per_class: int = 13
    tasks_per_epoch: int = 128
    inner_lr: float = 0.01
    outer_lr: float = 0.05
    inner_steps: int = 1
    first_order: bool = True
    task_softmax: bool = False

    def __post_init__(self):
        if self.support_per_class < 1 or self.query_per_class < 1:
            raise ValueError("support_per_class and query_per_class must be >= 1")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("step sizes must be non-negative")
        if self.ways < 1:
            raise ValueError("ways must be >= 1")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 1.0
    batch_size: int = 64

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        if self.batch_size < 2:
            raise ValueError("mixup batch needs at least 2 samples")


@dataclass
class MetaTask:
    split: int
    classes: np.ndarray
    support: np.ndarray
    query: np.ndarray
    with_replacement: bool = False

    @property
    def name(self) -> str:
        return f"split{self.split}:{'-'.join(map(str, self.classes))}"


@dataclass
class MixedBatch:
    x: np.ndarray
    y: np.ndarray  # (N, C) probability rows
    lam: np.ndarray


@dataclass
class StepLog:
    query_losses: list[float]
    meta_loss: float
    erm_loss: float
    total: float
    meta_grad_norm: float
    erm_grad_norm: float
    warnings: list[str] = field(default_factory=list)

    def as_record(self) -> dict:
        return {"query_losses": self.query_losses, "meta_loss": self.meta_loss, "erm_loss": self.erm_loss,
                "total": self.total, "meta_grad_norm": self.meta_grad_norm,
                "erm_grad_norm": self.erm_grad_norm}


# -- task sampling -----------------------------------------------------------

def sample_meta_tasks(partition: Partition, labels: np.ndarray, cfg: MetaTaskConfig,
                      rng: np.random.Generator, warnings: list | None = None) -> list[MetaTask]:
    """One task per split: ``ways`` classes, then ``i + j`` samples per class.

    A split with fewer than ``ways`` classes having ``i + j`` samples falls back
    to sampling classes and samples with replacement inside that split.
    """
    need = cfg.support_per_class + cfg.query_per_class
    tasks = []
    for t, members in enumerate(partition.members):
        if len(members) == 0:
            if warnings is not None:
                warnings.append(f"split {t} is empty; no task drawn")
            continue
        split_labels = labels[members]
        present, counts = np.unique(split_labels, return_counts=True)
        eligible = present[counts >= need]
        if len(eligible) >= cfg.ways:
            classes = np.sort(rng.choice(eligible, size=cfg.ways, replace=False))
            fallback = False
        else:
            if warnings is not None:
                warnings.append(f"split {t}: {len(eligible)} eligible classes < {cfg.ways}; sampling with replacement")
            replace_cls = len(present) < cfg.ways
            classes = np.sort(rng.choice(present, size=cfg.ways, replace=replace_cls))
            fallback = True
        support, query = [], []
        for c in classes:
            pool = members[split_labels == c]
            pick = rng.choice(pool, size=need, replace=fallback and len(pool) < need)
            support.append(pick[:cfg.support_per_class])
            query.append(pick[cfg.support_per_class:])
        tasks.append(MetaTask(t, classes, np.concatenate(support), np.concatenate(query), fallback))
    return tasks


# -- losses -------------------------------------------------------------------

def _task_ce(logits: ad.Var, y: np.ndarray, classes: np.ndarray | None) -> ad.Var:
    if classes is None:
        return ad.softmax_cross_entropy(logits, y)
    # softmax restricted to the task's classes: select columns with a fixed 0/1 matrix
    sel = np.zeros((logits.shape[1], len(classes)))
    sel[classes, np.arange(len(classes))] = 1.0
    remap = np.searchsorted(classes, y)
    return ad.softmax_cross_entropy(logits @ sel, remap)


def _loss_on(tape, pvars, x, y, classes, loss_hook=None):
    if loss_hook is not None:
        return loss_hook(tape, pvars, x, y)
    feats = mdl.encode(tape.constant(x), pvars, tape)
    return _task_ce(mdl.head_logits(feats, pvars, "task"), y, classes)


def meta_param_names(params: Params) -> list[str]:
    return mdl.encoder_names(params) + mdl.head_names(params, "task")


def inner_update(params: Params, x: np.ndarray, y: np.ndarray, cfg: MetaTaskConfig,
                 classes: np.ndarray | None = None, names: Sequence[str] | None = None,
                 loss_hook: Callable | None = None, task_id: str = "") -> dict[str, np.ndarray]:
    """Adapted snapshot after ``cfg.inner_steps`` gradient steps on the support loss.

    The caller's ``params`` are never modified.
    """
    if len(y) == 0:
        raise ValueError("empty support set")
    names = list(meta_param_names(params) if names is None else names)
    current = dict(params)
    for step in range(cfg.inner_steps):
        tape = ad.Tape()
        pvars = tape.parameters_from(current, names)
        loss = _loss_on(tape, pvars, x, y, classes, loss_hook)
        grads = tape.backward(loss)
        for k in names:
            if not np.all(np.isfinite(grads[k])):
                raise FloatingPointError(f"non-finite inner gradient in task {task_id or '?'} at step {step}")
        current = {k: (current[k] - cfg.inner_lr * grads[k] if k in grads else current[k]) for k in current}
    return current


def meta_query_loss(tasks: Sequence[MetaTask], adapted: Sequence[Params], x: np.ndarray, y: np.ndarray,
                    cfg: MetaTaskConfig, num_splits: int | None = None) -> float:
    if len(adapted) != len(tasks):
        raise ValueError(f"{len(tasks)} tasks but {len(adapted)} adapted snapshots")
    if num_splits is not None and len(tasks) != num_splits:
        raise ValueError(f"expected {num_splits} tasks, got {len(tasks)}")
    losses = []
    for task, snap in zip(tasks, adapted):
        tape = ad.Tape()
        cls = task.classes if cfg.task_softmax else None
        losses.append(float(_loss_on(tape, _const_vars(tape, snap), x[task.query], y[task.query], cls).value))
    return float(np.mean(losses))


def _const_vars(tape, params):
    return {k: tape.constant(v) for k, v in params.items()}


def task_meta_gradient(params: Params, task_x: tuple, task_y: tuple, cfg: MetaTaskConfig,
                       classes: np.ndarray | None, names: Sequence[str], loss_hook=None,
                       task_id: str = "") -> tuple[float, dict[str, np.ndarray]]:
    """Query loss after adaptation and its gradient w.r.t. the base snapshot.

    First-order: gradient evaluated at the adapted snapshot.  Second-order:
    differentiates through the inner steps.
    """
    (xs, xq), (ys, yq) = task_x, task_y
    if cfg.first_order:
        adapted = inner_update(params, xs, ys, cfg, classes, names, loss_hook, task_id)
        tape = ad.Tape()
        pvars = tape.parameters_from(adapted, names)
        loss = _loss_on(tape, pvars, xq, yq, classes, loss_hook)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[k] for k in names}
    tape = ad.Tape()
    base = tape.parameters_from(params, names)
    cur = dict(base)
    for _ in range(cfg.inner_steps):
        s_loss = _loss_on(tape, cur, xs, ys, classes, loss_hook)
        gs = tape.grad(s_loss, [cur[k] for k in names], create_graph=True)
        cur = dict(cur)
        for k, g in zip(names, gs):
            cur[k] = cur[k] - ad.scale(g, cfg.inner_lr)
    q_loss = _loss_on(tape, cur, xq, yq, classes, loss_hook)
    gq = tape.grad(q_loss, [base[k] for k in names])
    return float(q_loss.value), {k: g.value for k, g in zip(names, gq)}


def outer_update(params: Params, tasks: Sequence[MetaTask], x: np.ndarray, y: np.ndarray,
                 cfg: MetaTaskConfig, lr: float | None = None,
                 loss_hook=None) -> tuple[dict[str, np.ndarray], list[float], dict[str, np.ndarray]]:
    """``phi, mu <- phi, mu - beta * mean_i grad L_query_i``.  Returns (params, query losses, grad)."""
    if not tasks:
        raise ValueError("outer update needs at least one task")
    beta = cfg.outer_lr if lr is None else lr
    losses, grad = meta_gradient(params, tasks, x, y, cfg, loss_hook)
    new = {k: (v - beta * grad[k] if k in grad else v) for k, v in params.items()}
    return new, losses, grad


def meta_gradient(params, tasks, x, y, cfg, loss_hook=None):
    names = meta_param_names(params)
    total = {k: np.zeros_like(params[k]) for k in names}
    losses = []
    for task in tasks:
        cls = task.classes if cfg.task_softmax else None
        loss, g = task_meta_gradient(params, (x[task.support], x[task.query]),
                                     (y[task.support], y[task.query]), cfg, cls, names,
                                     loss_hook, task.name)
        for k in names:
            if not np.all(np.isfinite(g[k])):
                raise FloatingPointError(f"non-finite meta gradient in task {task.name}")
            total[k] += g[k]
        losses.append(loss)
    # averaged over tasks, matching the mean query loss that is logged
    return losses, {k: v / len(tasks) for k, v in total.items()}


# -- mixup ---------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup_batch(x: np.ndarray, y: np.ndarray, num_classes: int, cfg: MixupConfig,
                rng: np.random.Generator, lam: float | np.ndarray | None = None) -> MixedBatch:
    """Mix each sample with a partner from a seeded shuffle of the batch.

    ``y`` may be labels or probability rows.  ``lam`` overrides the Beta draw.
    """
    n = len(x)
    if n < 2:
        raise ValueError("mixup needs a batch of at least 2")
    yp = one_hot(y, num_classes) if y.ndim == 1 else np.asarray(y, dtype=float)
    perm = rng.permutation(n)
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,)).copy()
    xm = lam[:, None] * x + (1.0 - lam[:, None]) * x[perm]
    ym = lam[:, None] * yp + (1.0 - lam[:, None]) * yp[perm]
    return MixedBatch(xm, ym, lam)


def mix_pair(xi, xj, yi, yj, lam: float):
    xi, xj, yi, yj = map(np.asarray, (xi, xj, yi, yj))
    return lam * xi + (1 - lam) * xj, lam * yi + (1 - lam) * yj


def erm_gradient(params: Params, batch: MixedBatch, head: str = "aux") -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy of ``head(F_c(x_mix))`` against the mixed soft labels."""
    names = mdl.encoder_names(params) + mdl.head_names(params, head)
    tape = ad.Tape()
    pvars = tape.parameters_from(params, names)
    feats = mdl.encode(tape.constant(batch.x), pvars, tape)
    loss = ad.softmax_cross_entropy(mdl.head_logits(feats, pvars, head), batch.y)
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[k] for k in names}


def _norm(g: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))


def stage2_step(params: Params, tasks: Sequence[MetaTask], batch: MixedBatch | None, x: np.ndarray,
                y: np.ndarray, cfg: MetaTaskConfig, lr: float, meta_weight: float = 1.0,
                erm_weight: float = 1.0) -> tuple[StepLog, dict[str, np.ndarray]]:
    """One joint step on ``meta_weight * L_meta + erm_weight * L_erm``.

    Both gradients are taken at the same base snapshot and applied together.
    """
    grad: dict[str, np.ndarray] = {}
    q_losses: list[float] = []
    meta_loss = erm_loss = 0.0
    meta_norm = erm_norm = 0.0
    if meta_weight and tasks:
        q_losses, g_meta = meta_gradient(params, tasks, x, y, cfg)
        meta_loss = float(np.mean(q_losses))
        meta_norm = _norm(g_meta)
        for k, v in g_meta.items():
            grad[k] = grad.get(k, 0.0) + meta_weight * v
    if erm_weight and batch is not None:
        erm_loss, g_erm = erm_gradient(params, batch)
        erm_norm = _norm(g_erm)
        for k, v in g_erm.items():
            grad[k] = grad.get(k, 0.0) + erm_weight * v
    new = {k: (v - lr * grad[k] if k in grad else v) for k, v in params.items()}
    total = meta_weight * meta_loss + erm_weight * erm_loss
    return StepLog(q_losses, meta_loss, erm_loss, total, meta_norm, erm_norm), new
