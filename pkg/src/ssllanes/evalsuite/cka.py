"""Linear centered kernel alignment between feature matrices."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np


def cka(a: np.ndarray, b: np.ndarray) -> float:
    """Linear CKA of two (n, d) feature matrices over the same n samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"cka needs two matrices with equal rows, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("cka needs at least two samples")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    norm_a = np.linalg.norm(a.T @ a)
    norm_b = np.linalg.norm(b.T @ b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    if norm_a <= 1e-24 * scale**2 or norm_b <= 1e-24 * scale**2:
        raise ValueError("cka is undefined for zero-variance features")
    cross = np.linalg.norm(b.T @ a) ** 2
    return float(min(max(cross / (norm_a * norm_b), 0.0), 1.0))


def cka_matrix(features: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    names = list(features)
    out = np.eye(len(names))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            out[i, j] = out[j, i] = cka(features[a], features[names[j]])
    return names, out


def write_matrix_csv(path: str | Path, names: list[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(f"{v:.6f}" for v in row)])
