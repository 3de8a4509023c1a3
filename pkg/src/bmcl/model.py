"""Encoder, attention gate and the three classification heads.

The encoder is residual: ``F_x = x @ S + MLP(x)`` with a fixed coordinate skip
``S`` and a zero-initialised last layer, so feature dimension ``k`` stays tied to
input coordinate ``k``.  That keeps the per-dimension gate readable in input
terms (class-signal vs context-signal coordinates).

Parameters are plain ``dict[str, np.ndarray]`` snapshots; every update returns a
new dict.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad

__all__ = [
    "ModelConfig", "DecoupledFeatures", "init_params", "encode", "predict", "head_logits",
    "encoder_names", "head_names", "save_checkpoint", "load_checkpoint", "gate_values",
    "HEADS",
]

HEADS = ("task", "bias", "aux")
_HEAD_INPUT = {"task": "causal", "aux": "causal", "bias": "confound"}

Params = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 32
    num_classes: int = 10
    use_gate: bool = True
    init_scale: float = 1.0
    head_init_scale: float = 0.0

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class DecoupledFeatures(NamedTuple):
    mixed: ad.Var    # F_x
    gate: ad.Var     # a in [0, 1]
    causal: ad.Var   # F_c = a * F_x
    confound: ad.Var  # F_s = (1 - a) * F_x


def _glorot(rng, fan_in, fan_out, scale):
    return scale * rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h, f, c = cfg.input_dim, cfg.hidden_dim, cfg.feature_dim, cfg.num_classes
    p = {
        "enc.w1": _glorot(rng, d, h, cfg.init_scale), "enc.b1": np.zeros(h),
        "enc.w2": _glorot(rng, h, h, cfg.init_scale), "enc.b2": np.zeros(h),
        "enc.w3": np.zeros((h, f)), "enc.b3": np.zeros(f),
    }
    if cfg.use_gate:
        p["gate.w"] = np.zeros((f, f))
        p["gate.b"] = np.zeros(f)
    for head in HEADS:
        p[f"{head}.w"] = cfg.head_init_scale * rng.standard_normal((f, c))
        p[f"{head}.b"] = np.zeros(c)
    return p


def encoder_names(params: Params) -> list[str]:
    return [k for k in params if k.startswith(("enc.", "gate."))]


def head_names(params: Params, head: str) -> list[str]:
    return [k for k in params if k.startswith(head + ".")]


def _skip(d: int, f: int) -> np.ndarray:
    return np.eye(d, f)


def _as_vars(tape: ad.Tape, params) -> dict[str, ad.Var]:
    return {k: (v if isinstance(v, ad.Var) else tape.constant(v)) for k, v in params.items()}


def encode(x, params, tape: ad.Tape | None = None) -> DecoupledFeatures:
    """Map inputs ``(N, d)`` (or ``(d,)``) to the decoupled feature triple.

    ``params`` values may be arrays or Vars on ``tape``.
    """
    tape = tape if tape is not None else ad.Tape()
    p = _as_vars(tape, params)
    xv = x if isinstance(x, ad.Var) else tape.constant(np.atleast_2d(np.asarray(x, dtype=float)))
    d = p["enc.w1"].shape[0]
    if xv.ndim != 2 or xv.shape[1] != d:
        raise ValueError(f"encoder expects inputs with {d} features, got shape {xv.shape}")
    f = p["enc.w3"].shape[1]
    h1 = ad.relu(xv @ p["enc.w1"] + p["enc.b1"])
    h2 = ad.relu(h1 @ p["enc.w2"] + p["enc.b2"])
    mixed = xv @ _skip(d, f) + (h2 @ p["enc.w3"] + p["enc.b3"])
    if "gate.w" in p:
        gate = ad.sigmoid(mixed @ p["gate.w"] + p["gate.b"])
        causal = mixed * gate
        confound = mixed * (1.0 - gate)
    else:
        gate = tape.constant(np.ones(mixed.shape))
        causal = mixed
        confound = tape.constant(np.zeros(mixed.shape))
    return DecoupledFeatures(mixed, gate, causal, confound)


def head_logits(features: DecoupledFeatures, params, head: str) -> ad.Var:
    if head not in _HEAD_INPUT:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    tape = features.mixed.tape
    p = _as_vars(tape, {k: params[k] for k in (f"{head}.w", f"{head}.b")})
    inp = getattr(features, _HEAD_INPUT[head])
    return inp @ p[f"{head}.w"] + p[f"{head}.b"]


def predict(x, params, head: str = "task", tape: ad.Tape | None = None) -> ad.Var:
    """Logits ``(N, C)`` from the chosen head.  Task/aux heads read F_c, bias reads F_s."""
    if head not in _HEAD_INPUT:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    return head_logits(encode(x, params, tape), params, head)


def predict_numpy(x, params: Params, head: str = "task") -> np.ndarray:
    return predict(x, params, head).value


def gate_values(x, params: Params) -> np.ndarray:
    return encode(x, params).gate.value


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, params: Params, cfg: ModelConfig, extra: dict | None = None) -> Path:
    """Named-tensor ``.npz`` container; metadata travels as a JSON string entry."""
    path = Path(path)
    meta = {"model_config": asdict(cfg), "config_hash": cfg.config_hash(), "extra": extra or {}}
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    cfg = ModelConfig(**meta["model_config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    return params, cfg, meta["extra"]
