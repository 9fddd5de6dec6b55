"""Exploration statistics: bucket coverage, radius of gyration and action power spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class CoverageConfig:
    n_buckets: int
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        side = math.isqrt(self.n_buckets)
        if side * side != self.n_buckets:
            raise ValueError(f"bucket count must be a perfect square, got {self.n_buckets}")
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if np.any(self.high <= self.low):
            raise ValueError("empty bounding box")

    @property
    def side(self) -> int:
        return math.isqrt(self.n_buckets)

    def bucket_ids(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        frac = (positions - self.low) / (self.high - self.low)
        idx = np.clip(np.floor(frac * self.side).astype(int), 0, self.side - 1)
        return idx[:, 0] * self.side + idx[:, 1]


@dataclass
class GyrationConfig:
    diagonal: float

    def __post_init__(self):
        if self.diagonal <= 0:
            raise ValueError("diagonal must be positive")


def coverage(trajectories: Sequence[np.ndarray], config: CoverageConfig) -> float:
    """Fraction of buckets visited by the union of all trajectory positions."""
    if len(trajectories) == 0 or all(len(t) == 0 for t in trajectories):
        raise ValueError("coverage needs at least one visited state")
    visited = set()
    for traj in trajectories:
        visited.update(np.unique(config.bucket_ids(traj)).tolist())
    return len(visited) / config.n_buckets


def gyration_sq(trajectories: Sequence[np.ndarray], config: GyrationConfig) -> float:
    """Squared radius of gyration averaged over trajectories, normalized by the box diagonal."""
    if len(trajectories) == 0:
        raise ValueError("gyration_sq needs at least one trajectory")
    total = 0.0
    for traj in trajectories:
        traj = np.asarray(traj, dtype=np.float64)
        if len(traj) < 2:
            raise ValueError("every trajectory needs at least 2 states")
        d2 = np.sum((traj - traj.mean(axis=0)) ** 2, axis=1)
        total += d2.sum() / (len(traj) - 1)
    return total / (config.diagonal * len(trajectories))


def action_psd(sequences: Sequence[np.ndarray]) -> np.ndarray:
    """One-sided power spectrum of action sequences, averaged over dimensions and sequences.

    Each sequence is ``(L, action_dim)``. Bin ``k`` of the output (``k = 0..L//2``)
    holds the power of frequency ``k / L`` cycles per step; interior bins fold in
    their negative-frequency mirror so that the bins sum to the mean squared value
    of the signal (Parseval).
    """
    if len(sequences) == 0:
        raise ValueError("action_psd needs at least one sequence")
    arrs = [np.asarray(s, dtype=np.float64) for s in sequences]
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    lengths = {len(a) for a in arrs}
    if len(lengths) != 1:
        raise ValueError(f"ragged action sequences: lengths {sorted(lengths)}")
    (length,) = lengths
    stacked = np.stack(arrs)  # (n, L, d)
    basis = dft_matrix(length)[: length // 2 + 1]  # (bins, L)
    coeffs = np.einsum("kl,nld->nkd", basis, stacked)
    power = np.abs(coeffs) ** 2 / length**2
    fold = np.full(length // 2 + 1, 2.0)
    fold[0] = 1.0
    if length % 2 == 0:
        fold[-1] = 1.0
    return (power * fold[None, :, None]).mean(axis=(0, 2))


def dft_matrix(length: int) -> np.ndarray:
    """Direct DFT basis ``exp(-2 pi i k l / L)``."""
    k = np.arange(length)
    return np.exp(-2j * np.pi * np.outer(k, k) / length)


def low_frequency_fraction(psd: np.ndarray, fraction: float = 0.1) -> float:
    """Share of total power in the lowest ``fraction`` of frequency bins."""
    n_low = max(1, int(math.ceil(fraction * len(psd))))
    return float(psd[:n_low].sum() / psd.sum())
