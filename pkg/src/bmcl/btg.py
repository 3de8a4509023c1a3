"""Balanced task generation: learned data partitions from confounder features.

A partition matrix ``theta`` (K x m logits) is trained against a frozen bias
classifier ``h`` on the confounder features F_s.  The bias head minimises plain
ERM; ``theta`` ascends the split IRM objective

    sum_t  R_t(h) + lam * (d/dw R_t(w * h) at w=1)**2

where ``R_t`` is the softmax(theta)-weighted mean cross-entropy of split t.
Balancing strategies: ``"LB"`` (entropy bonus on expected split sizes while
training theta), ``"MB"`` (post-hoc per-class reassignment), ``"GB"``
(sum of the soft assignments of several independently trained matrices).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import model as mdl

log = logging.getLogger(__name__)

STRATEGIES = ("none", "LB", "MB", "GB")
DEGENERATE_WEIGHT = 1e-8


@dataclass(frozen=True)
class BtgConfig:
    num_splits: int = 4
    num_matrices: int = 4
    irm_weight: float = 1.0
    balance_weight: float = 1.0
    strategy: str = "GB"
    epochs: int = 100
    min_epochs: int = 40
    patience: int = 5
    theta_lr: float = 0.3
    theta_init_scale: float = 0.01
    bias_lr: float = 0.5
    bias_warmup_steps: int = 400
    bias_steps: int = 2
    # False ascends the IRM penalty only; the risk terms are still reported
    risk_ascent: bool = True

    def __post_init__(self):
        if self.num_splits < 2:
            raise ValueError("num_splits must be >= 2")
        if self.num_matrices < 1:
            raise ValueError("num_matrices must be >= 1")
        if self.irm_weight < 0:
            raise ValueError("irm_weight must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @classmethod
    def full_scale_preset(cls, **kw) -> "BtgConfig":
        """Settings quoted for full-size image runs (lambda=1e6, 100 epochs, SGD lr 0.1)."""
        base = dict(num_splits=4, irm_weight=1e6, epochs=100, min_epochs=40, patience=5, theta_lr=0.1)
        base.update(kw)
        return cls(**base)


@dataclass
class Partition:
    assignment: np.ndarray
    num_splits: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= self.num_splits):
            raise ValueError("split index out of range")

    def __len__(self) -> int:
        return len(self.assignment)

    @property
    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == t) for t in range(self.num_splits)]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_splits)

    def class_counts(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        """Table ``(num_classes, num_splits)``."""
        table = np.zeros((num_classes, self.num_splits), dtype=np.int64)
        np.add.at(table, (labels, self.assignment), 1)
        return table

    @classmethod
    def random(cls, n: int, num_splits: int, rng: np.random.Generator) -> "Partition":
        return cls(rng.integers(0, num_splits, size=n), num_splits)


@dataclass
class StageOneResult:
    theta: np.ndarray
    bias_params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)
    gap_history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    epochs_run: int = 0


@dataclass
class BtgResult:
    partition: Partition
    probs: np.ndarray
    strategy: str
    matrices: list[StageOneResult]
    warnings: list[str]


# -- bias classifier ------------------------------------------------------

def _bias_loss(tape, feats, labels, params):
    w = tape.parameter("bias.w", params["bias.w"])
    b = tape.parameter("bias.b", params["bias.b"])
    logits = tape.constant(feats) @ w + b
    return ad.softmax_cross_entropy(logits, labels)


def train_bias_classifier(features: np.ndarray, labels: np.ndarray, num_classes: int, lr: float,
                          steps: int, init: Mapping[str, np.ndarray] | None = None,
                          history: list | None = None) -> dict[str, np.ndarray]:
    """Full-batch gradient descent on mean cross-entropy of ``h(F_s)``."""
    if len(features) == 0:
        raise ValueError("cannot train a bias classifier on an empty dataset")
    params = ({"bias.w": np.zeros((features.shape[1], num_classes)), "bias.b": np.zeros(num_classes)}
              if init is None else {k: np.array(v, dtype=float) for k, v in init.items()})
    for _ in range(steps):
        tape = ad.Tape()
        loss = _bias_loss(tape, features, labels, params)
        grads = tape.backward(loss)
        if history is not None:
            history.append(float(loss.value))
        params = {k: params[k] - lr * grads[k] for k in params}
    return params


def bias_logits(features: np.ndarray, bias_params: Mapping[str, np.ndarray]) -> np.ndarray:
    return features @ bias_params["bias.w"] + bias_params["bias.b"]


# -- split objective -------------------------------------------------------

def per_sample_terms(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its derivative w.r.t. a logit multiplier w at w=1.

    d/dw CE(w z, y) = sum_c (softmax(z)_c - y_c) z_c.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    p = np.exp(logp)
    n = len(labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), labels] = 1.0
    ce = -logp[np.arange(n), labels]
    dw = ((p - onehot) * logits).sum(axis=1)
    return ce, dw


def irm_split_loss(theta, bias_params: Mapping[str, np.ndarray], features: np.ndarray,
                   labels: np.ndarray, irm_weight: float, tape: ad.Tape | None = None,
                   warnings: list | None = None, risk_weight: float = 1.0) -> ad.Var:
    """Soft-assignment split IRM objective; differentiable in ``theta``.

    Splits with total soft weight below ``DEGENERATE_WEIGHT`` contribute zero.
    """
    if tape is None:
        tape = theta.tape if isinstance(theta, ad.Var) else ad.Tape()
    th = theta if isinstance(theta, ad.Var) else tape.constant(theta)
    ce, dw = per_sample_terms(bias_logits(features, bias_params), labels)
    q = ad.softmax(th, axis=1)
    weight = ad.sum(q, axis=0)
    ok = (weight.value >= DEGENERATE_WEIGHT).astype(float)
    if warnings is not None and not ok.all():
        warnings.append(f"degenerate splits {np.flatnonzero(ok == 0).tolist()}")
    safe = weight + (1.0 - ok)
    risk = ad.reshape(tape.constant(ce[None, :]) @ q, (q.shape[1],)) / safe
    grad_w = ad.reshape(tape.constant(dw[None, :]) @ q, (q.shape[1],)) / safe
    terms = (ad.scale(risk, risk_weight) + ad.scale(ad.square(grad_w), irm_weight)) * ok
    return ad.sum(terms)


def split_entropy(sizes) -> float:
    s = np.asarray(sizes, dtype=float)
    s = s / s.sum()
    nz = s[s > 0]
    return float(-(nz * np.log(nz)).sum())


def lb_term(q: ad.Var, balance_weight: float) -> ad.Var:
    """``-balance_weight * H(mean soft assignment per split)``."""
    s_hat = ad.mean(q, axis=0)
    ent = ad.neg(ad.sum(s_hat * ad.log(s_hat)))
    return ad.scale(ent, -balance_weight)


def lb_term_value(soft_sizes, balance_weight: float) -> float:
    return -balance_weight * split_entropy(soft_sizes)


# -- stage 1 -----------------------------------------------------------------

def stage1_optimize(cfg: BtgConfig, features: np.ndarray, labels: np.ndarray, num_classes: int,
                    seed: int, loss_balance: bool | None = None) -> StageOneResult:
    """Alternate: refit the bias head on F_s (minimise), then ascend the split IRM loss in theta.

    ``features`` are the confounder features F_s of the training set, computed
    from the current model snapshot.
    """
    rng = np.random.default_rng(seed)
    k, m = len(labels), cfg.num_splits
    use_lb = cfg.strategy == "LB" if loss_balance is None else loss_balance
    theta = cfg.theta_init_scale * rng.standard_normal((k, m))
    bias = train_bias_classifier(features, labels, num_classes, cfg.bias_lr, cfg.bias_warmup_steps)
    result = StageOneResult(theta, bias)
    best, since_best = -np.inf, 0
    for epoch in range(cfg.epochs):
        bias = train_bias_classifier(features, labels, num_classes, cfg.bias_lr, cfg.bias_steps, init=bias)
        tape = ad.Tape()
        th = tape.parameter("theta", theta)
        split_loss = irm_split_loss(th, bias, features, labels, cfg.irm_weight, tape,
                                    warnings=result.warnings, risk_weight=float(cfg.risk_ascent))
        objective = ad.neg(split_loss)
        if use_lb:
            objective = objective + lb_term(ad.softmax(th, axis=1), cfg.balance_weight)
        value = float(split_loss.value)
        if not np.isfinite(value) or not np.isfinite(objective.value):
            raise FloatingPointError(f"non-finite split loss at stage-1 iteration {epoch}")
        # progress is measured against the unsplit objective under the same head:
        # refitting h lowers the split loss itself, so its raw value cannot drive early stopping
        ce, dw = per_sample_terms(bias_logits(features, bias), labels)
        gap = value - m * (cfg.risk_ascent * ce.mean() + cfg.irm_weight * dw.mean() ** 2)
        # per-sample step: gradients of split means scale like m/K
        grad = tape.backward(objective)["theta"] * k
        theta = theta - cfg.theta_lr * grad
        result.history.append(value)
        result.gap_history.append(gap)
        result.epochs_run = epoch + 1
        if gap > best + 1e-9:
            best, since_best = gap, 0
        else:
            since_best += 1
        if epoch + 1 >= cfg.min_epochs and since_best >= cfg.patience:
            break
    result.theta = theta
    result.bias_params = bias
    return result


def row_softmax(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def aggregate_partitions(matrices: Sequence[np.ndarray]) -> tuple[np.ndarray, Partition]:
    """Sum row-softmaxed matrices; assign each row to its argmax (lowest index on ties)."""
    if not matrices:
        raise ValueError("need at least one matrix")
    shape = np.shape(matrices[0])
    for mat in matrices:
        if np.shape(mat) != shape:
            raise ValueError(f"matrix shape {np.shape(mat)} differs from {shape}")
    theta_final = np.sum([np.asarray(mat, dtype=float) for mat in matrices], axis=0)
    # np.argmax returns the first maximum, i.e. the lowest split index
    assignment = np.argmax(row_softmax(theta_final), axis=1)
    return theta_final, Partition(assignment, shape[1])


def manual_balance(partition: Partition, probs: np.ndarray, labels: np.ndarray,
                   warnings: list | None = None) -> Partition:
    """Per-class reassignment to floor(count/m) (+1 for the remainder) samples per split.

    Splits over target shed their least confident members first; each moved
    sample goes to the open deficit split it has the highest probability for.
    """
    m = partition.num_splits
    assign = partition.assignment.copy()
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n = len(idx)
        if n < m:
            if warnings is not None:
                warnings.append(f"class {int(cls)} has {n} < {m} samples; left unbalanced")
            continue
        counts = np.bincount(assign[idx], minlength=m)
        base, extra = divmod(n, m)
        target = np.full(m, base)
        # remainder slots go to the currently largest splits (fewest moves)
        order = sorted(range(m), key=lambda t: (-counts[t], t))
        target[order[:extra]] += 1
        pool = []
        for t in range(m):
            surplus = counts[t] - target[t]
            if surplus > 0:
                members = idx[assign[idx] == t]
                conf = probs[members, t]
                drop = members[np.lexsort((members, conf))][:surplus]
                pool.extend(drop.tolist())
        room = target - counts
        room[room < 0] = 0
        pool.sort(key=lambda s: (-probs[s].max(), s))
        for s in pool:
            open_splits = np.flatnonzero(room > 0)
            dest = open_splits[np.argmax(probs[s, open_splits])]
            assign[s] = dest
            room[dest] -= 1
    return Partition(assign, m)


def align_splits(reference: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Permute the columns of ``probs`` to maximise soft overlap with ``reference``.

    Split indices are arbitrary labels, so independently trained matrices must
    be put in correspondence before their probabilities are summed.
    """
    overlap = np.asarray(reference).T @ np.asarray(probs)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return np.asarray(probs)[:, cols[np.argsort(rows)]]


def build_partition(cfg: BtgConfig, features: np.ndarray, labels: np.ndarray, num_classes: int,
                    seed: int) -> BtgResult:
    """Run stage 1 with the configured balancing strategy and emit the hard partition."""
    warnings: list[str] = []
    n_mats = cfg.num_matrices if cfg.strategy == "GB" else 1
    runs = [stage1_optimize(cfg, features, labels, num_classes, seed + 7919 * i) for i in range(n_mats)]
    probs_list = [row_softmax(r.theta) for r in runs]
    probs_list = [probs_list[0]] + [align_splits(probs_list[0], p) for p in probs_list[1:]]
    for r in runs:
        warnings.extend(r.warnings)
    theta_final, partition = aggregate_partitions(probs_list)
    probs = row_softmax(theta_final)
    if cfg.strategy == "MB":
        partition = manual_balance(partition, probs, labels, warnings)
    return BtgResult(partition, probs, cfg.strategy, runs, warnings)


def apply_balance(strategy: str, **kw):
    """Dispatch helper: ``MB`` rebalances a partition, ``GB`` aggregates matrices,
    ``LB`` returns the entropy penalty for a soft-assignment Var."""
    if strategy == "MB":
        return manual_balance(kw["partition"], kw["probs"], kw["labels"], kw.get("warnings"))
    if strategy == "GB":
        return aggregate_partitions(kw["matrices"])
    if strategy == "LB":
        return lb_term(kw["q"], kw["balance_weight"])
    raise ValueError(f"unknown balancing strategy {strategy!r}")


# -- reports ---------------------------------------------------------------

def balance_report(partition: Partition, labels: np.ndarray, num_classes: int, strategy: str,
                   contexts: np.ndarray | None = None, num_contexts: int | None = None,
                   ascent: str = "risk+penalty") -> dict:
    report = {
        "strategy": strategy,
        "sizes": partition.sizes.tolist(),
        "entropy": split_entropy(partition.sizes),
        "class_by_split": partition.class_counts(labels, num_classes).tolist(),
        "ascent": ascent,
    }
    if contexts is not None:
        table = np.zeros((num_contexts, partition.num_splits), dtype=np.int64)
        np.add.at(table, (contexts, partition.assignment), 1)
        report["context_by_split"] = table.tolist()
    return report


def format_balance_report(report: dict) -> str:
    lines = [f"strategy: {report['strategy']}",
             f"sizes: {' '.join(map(str, report['sizes']))}",
             f"entropy: {report['entropy']:.6f}",
             f"ascent: {report['ascent']}",
             "class_by_split:"]
    lines += [f"  {c}: {' '.join(map(str, row))}" for c, row in enumerate(report["class_by_split"])]
    if "context_by_split" in report:
        lines.append("context_by_split:")
        lines += [f"  {c}: {' '.join(map(str, row))}" for c, row in enumerate(report["context_by_split"])]
    return "\n".join(lines) + "\n"


def export_partition(path, partition: Partition, probs: np.ndarray) -> Path:
    """Whitespace table: sample index, split index, one probability column per split."""
    path = Path(path)
    m = partition.num_splits
    header = "index split " + " ".join(f"p{t}" for t in range(m))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, (s, row) in enumerate(zip(partition.assignment, probs)):
            fh.write(f"{i} {s} " + " ".join(repr(float(v)) for v in row) + "\n")
    return path


def load_partition(path) -> tuple[Partition, np.ndarray]:
    rows = np.loadtxt(path, skiprows=1, ndmin=2)
    probs = rows[:, 2:]
    return Partition(rows[:, 1].astype(np.int64), probs.shape[1]), probs


def confound_features(x: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    return mdl.encode(x, params).confound.value
