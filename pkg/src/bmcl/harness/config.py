"""Run configuration: dataset, model, partitioning, meta-task and schedule settings."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..btg import BtgConfig
from ..mcfl import MetaTaskConfig, MixupConfig
from ..model import ModelConfig
from ..synthdata import GenConfig


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class Method:
    """Which pipeline pieces a run switches on.

    ``partition``: ``"none"`` (no splits), ``"random"`` (initial random split
    only) or ``"learned"`` (stage-1 refreshes with ``BtgConfig.strategy``).
    ``causal_weight`` adds an IRM penalty of the task head across splits to
    backbone (non-meta) training.
    """

    name: str = "bmcl"
    use_gate: bool = True
    meta: bool = True
    mixup: bool = True
    partition: str = "learned"
    balance: str = "GB"
    causal_weight: float = 0.0

    def __post_init__(self):
        if self.partition not in ("none", "random", "learned"):
            raise ConfigError(f"unknown partition mode {self.partition!r}")
        if self.meta and self.partition == "none":
            raise ConfigError("meta learning needs a partition (random or learned)")


METHODS: dict[str, Method] = {
    "baseline": Method("baseline", use_gate=False, meta=False, mixup=False, partition="none", balance="none"),
    "gate": Method("gate", meta=False, mixup=False, partition="none", balance="none"),
    "mixup": Method("mixup", use_gate=False, meta=False, mixup=True, partition="none", balance="none"),
    "gate+meta": Method("gate+meta", meta=True, mixup=True, partition="learned", balance="none"),
    "gate+btg": Method("gate+btg", meta=False, mixup=False, partition="learned", balance="GB",
                       causal_weight=0.1),
    "bmcl": Method("bmcl", meta=True, mixup=True, partition="learned", balance="GB"),
}
for _s in ("none", "LB", "MB", "GB"):
    METHODS[f"backbone/{_s}"] = Method(f"backbone/{_s}", meta=False, mixup=False, partition="learned",
                                       balance=_s, causal_weight=0.1)
    METHODS[f"meta/{_s}"] = Method(f"meta/{_s}", meta=True, mixup=True, partition="learned", balance=_s)


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    btg: BtgConfig = field(default_factory=BtgConfig)
    meta: MetaTaskConfig = field(default_factory=MetaTaskConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    method: Method = field(default_factory=Method)
    epochs: int = 60
    refresh_start: int = 12
    refresh_period: int = 6
    lr: float = 0.05
    lr_decay_at: float = 0.9
    lr_decay: float = 0.1
    batch_size: int = 64
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.refresh_start >= self.epochs and self.method.partition == "learned":
            # allowed: zero refreshes, training stays on the initial random partition
            pass
        if self.gen.feature_dim != self.model.input_dim:
            raise ConfigError(f"model input_dim {self.model.input_dim} != data feature_dim {self.gen.feature_dim}")
        if self.gen.num_classes != self.model.num_classes:
            raise ConfigError("model and data disagree on num_classes")
        if self.meta.tasks_per_epoch % self.btg.num_splits:
            raise ConfigError(
                f"tasks_per_epoch {self.meta.tasks_per_epoch} not divisible by num_splits {self.btg.num_splits}")
        if self.method.use_gate != self.model.use_gate:
            raise ConfigError("method.use_gate and model.use_gate disagree; use with_method()")

    def with_method(self, method: Method | str) -> "RunConfig":
        m = METHODS[method] if isinstance(method, str) else method
        btg = replace(self.btg, strategy=m.balance if m.partition == "learned" else self.btg.strategy)
        return replace(self, method=m, model=replace(self.model, use_gate=m.use_gate), btg=btg)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, gen=replace(self.gen, seed=seed))

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay if epoch >= int(self.lr_decay_at * self.epochs) else 1.0)

    def refresh_epochs(self) -> list[int]:
        return list(range(self.refresh_start, self.epochs, self.refresh_period))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sub = {"gen": GenConfig, "model": ModelConfig, "btg": BtgConfig, "meta": MetaTaskConfig,
               "mixup": MixupConfig, "method": Method}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for k, v in d.items():
                kw[k] = sub[k](**v) if k in sub and isinstance(v, dict) else v
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_config(**overrides) -> RunConfig:
    """Default desk-scale benchmark configuration (10 classes, 4+2 contexts, rho 0.9)."""
    return RunConfig(**overrides)
