"""Attention-gate heatmaps as uncompressed grayscale PGM images.

Each image holds one class: column ``i`` is the gate vector of the class's
``i``-th sample, one row per feature dimension (white = 1, black = 0).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import model as mdl
from ..synthdata import Dataset


def gate_to_gray(gate: np.ndarray) -> np.ndarray:
    """Map gate values in [0, 1] to 8-bit gray levels (0.5 -> 128)."""
    return np.clip(np.floor(np.asarray(gate) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> Path:
    """Binary PGM (P5), 8-bit."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    path = Path(path)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def gate_summary(gates: np.ndarray, data: Dataset) -> dict:
    c0, c1 = data.meta["class_dims"]
    s0, s1 = data.meta["context_dims"]
    return {"class_mass": float(gates[:, c0:c1].mean()), "context_mass": float(gates[:, s0:s1].mean()),
            "other_mass": float(np.delete(gates, np.r_[c0:c1, s0:s1], axis=1).mean())
            if gates.shape[1] > max(c1, s1) else None,
            "class_dims": [c0, c1], "context_dims": [s0, s1]}


def export_attention_heatmaps(params_or_checkpoint, data: Dataset, out_dir,
                              samples_per_class: int = 16) -> dict:
    """Write one strip image per class plus ``summary.json``; return the summary.

    ``params_or_checkpoint`` is a parameter dict or a checkpoint path.
    """
    if isinstance(params_or_checkpoint, (str, Path)):
        path = Path(params_or_checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        params, _, _ = mdl.load_checkpoint(path)
    else:
        params = params_or_checkpoint
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gates = mdl.gate_values(data.features, params)
    files = []
    for cls in range(data.num_classes):
        idx = np.flatnonzero(data.classes == cls)[:samples_per_class]
        if len(idx) == 0:
            continue
        files.append(str(write_pgm(out / f"class_{cls:02d}.pgm", gate_to_gray(gates[idx].T)).name))
    summary = gate_summary(gates, data) | {"images": files, "samples_per_class": samples_per_class,
                                           "role": data.role}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
