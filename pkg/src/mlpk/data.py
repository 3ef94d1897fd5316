"""Datasets: CIFAR-10 binary batches and a seeded synthetic template task."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Batch
from .tensor import DTYPE

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    pass


@dataclass
class Splits:
    train: Batch
    val: Batch
    test: Batch
    meta: dict = field(default_factory=dict)


def synth_templates(seed: int, n_classes: int, size: int, channels: int = 3,
                    amplitude: float = 1.0, cell: int = 4) -> np.ndarray:
    """Blocky N(0, amplitude^2) patterns, one per class, constant on cell x cell blocks."""
    if size < 8:
        raise ValueError(f"synthetic images need size >= 8, got {size}")
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((n_classes, channels, -(-size // cell), -(-size // cell)))
    full = np.kron(coarse, np.ones((1, 1, cell, cell)))
    return (amplitude * full[:, :, :size, :size]).astype(DTYPE)


def synth_dataset(seed: int = 42, n_classes: int = 10, n_per_class: int = 150, size: int = 16,
                  noise: float = 0.25, channels: int = 3, fractions=(0.6, 0.2, 0.2),
                  amplitude: float = 1.0, cell: int = 4) -> Splits:
    """Template + Gaussian noise classification task.

    Each class draws ``n_per_class`` noisy copies of its template; these are
    split per class into train/val/test by ``fractions``.
    """
    templates = synth_templates(seed, n_classes, size, channels, amplitude, cell)
    rng = np.random.default_rng([seed, 1])
    n_tr = int(round(fractions[0] * n_per_class))
    n_va = int(round(fractions[1] * n_per_class))
    parts = {"train": [], "val": [], "test": []}
    for c in range(n_classes):
        x = templates[c] + noise * rng.standard_normal((n_per_class,) + templates.shape[1:])
        parts["train"].append((x[:n_tr], c))
        parts["val"].append((x[n_tr:n_tr + n_va], c))
        parts["test"].append((x[n_tr + n_va:], c))
    out = {}
    for split, items in parts.items():
        xs = np.concatenate([x for x, _ in items]).astype(DTYPE)
        ys = np.concatenate([np.full(len(x), c, dtype=np.int64) for x, c in items])
        perm = np.random.default_rng([seed, 2, len(out)]).permutation(len(ys))
        out[split] = Batch(np.ascontiguousarray(xs[perm]), ys[perm])
    return Splits(out["train"], out["val"], out["test"],
                  {"kind": "synthetic", "seed": seed, "noise": noise, "n_classes": n_classes, "size": size})


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images [n,3,32,32] and labels from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} bytes is not a multiple of {CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range 0-9")
    return rec[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def load_cifar10(directory, normalize: bool = True, val_size: int = 5000) -> Splits:
    """Load ``data_batch_*.bin`` and ``test_batch.bin``.

    The last ``val_size`` training records form the validation split. Pixels
    are scaled to [0,1]; with ``normalize`` each channel is then standardised
    with the training-split mean/std, which are stored in ``meta``.
    """
    d = Path(directory)
    train_files = sorted(d.glob("data_batch_*.bin"))
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin files in {d}")
    xs, ys = zip(*(read_cifar_file(f) for f in train_files))
    x, y = np.concatenate(xs), np.concatenate(ys)
    xt, yt = read_cifar_file(d / "test_batch.bin")
    if not 0 <= val_size < len(x):
        raise ValueError(f"val_size {val_size} must leave training data ({len(x)} records)")
    cut = len(x) - val_size
    x = x.astype(DTYPE) / 255.0
    xt = xt.astype(DTYPE) / 255.0
    meta = {"kind": "cifar10_binary", "path": str(d)}
    if normalize:
        mean = x[:cut].mean(axis=(0, 2, 3), dtype=np.float64)
        std = x[:cut].std(axis=(0, 2, 3), dtype=np.float64)
        m, s = mean.astype(DTYPE)[:, None, None], std.astype(DTYPE)[:, None, None]
        x = (x - m) / s
        xt = (xt - m) / s
        meta.update(mean=mean.tolist(), std=std.tolist())
    return Splits(Batch(x[:cut], y[:cut]), Batch(x[cut:], y[cut:]), Batch(xt, yt), meta)


def load_data(source: str, seed: int = 42) -> Splits:
    """Resolve a ``--data`` argument: ``synthetic`` or ``synthetic:<seed>``, else a CIFAR directory."""
    if source == "synthetic" or source.startswith("synthetic:"):
        _, _, s = source.partition(":")
        return synth_dataset(seed=int(s) if s else seed)
    return load_cifar10(source)
