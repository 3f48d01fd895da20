"""Reconstruction quality metrics and quality-vs-compute tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError


@dataclass
class PsnrResult:
    """10*log10(peak^2 / mse); identical images set the infinite flag."""

    psnr: float
    peak: float
    mse: float
    infinite: bool = False


def _as_array(img):
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def psnr(a, b, peak):
    """Peak signal-to-noise ratio of a against b at the given peak."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(psnr=math.inf, peak=float(peak), mse=0.0,
                          infinite=True)
    return PsnrResult(psnr=10.0 * math.log10(peak * peak / mse),
                      peak=float(peak), mse=mse)


@dataclass
class QualityCurve:
    """Aligned (iteration, PSNR-per-method) table.

    Row 1 is the initialization.  Shorter traces are padded with their
    last value (a converged plateau); input values are never smoothed.
    """

    labels: list
    rows: np.ndarray  # (num_iterations, num_labels)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("iteration," + ",".join(self.labels) + "\n")
            for i, row in enumerate(self.rows):
                cells = ",".join(f"{v:.6f}" for v in row)
                f.write(f"{i + 1},{cells}\n")


def quality_curve(traces, labels):
    """Build a QualityCurve from SolveTrace PSNR sequences.

    Accepts SolveTrace objects (using their psnr field) or plain value
    sequences; a length-1 sequence becomes a flat reference row.
    """
    if len(traces) == 0:
        raise ValueError("at least one trace is required")
    if len(traces) != len(labels):
        raise ValueError("labels must match traces")
    seqs = []
    for tr in traces:
        vals = tr.psnr if hasattr(tr, "psnr") else tr
        if vals is None or len(vals) == 0:
            raise ValueError("trace carries no PSNR values")
        seqs.append(list(vals))
    depth = max(len(s) for s in seqs)
    rows = np.empty((depth, len(seqs)))
    for j, s in enumerate(seqs):
        padded = s + [s[-1]] * (depth - len(s))
        rows[:, j] = padded
    return QualityCurve(labels=list(labels), rows=rows)
