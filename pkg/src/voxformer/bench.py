"""Sparse versus dense attention pair counts on random volumes."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .attention import AttentionBlockParams, pair_count, sparse_window_attention
from .voxel import SparseVolume

# timing a forward pass is skipped above this many attention pairs
TIMING_PAIR_BUDGET = 5_000_000


@dataclass
class BenchReport:
    dims: tuple
    occupancy: float
    window: int
    sparse_pairs: int
    dense_pairs: int
    ratio: float
    trials: int
    active_voxels: list = field(default_factory=list)
    trial_ratios: list = field(default_factory=list)
    seconds_per_op: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def random_volume(dims, occupancy: float, channels: int = 8, seed: int = 0) -> SparseVolume:
    """Each cell is active independently with probability ``occupancy``."""
    rng = np.random.default_rng(seed)
    mask = rng.random(tuple(dims)) < occupancy
    coords = torch.from_numpy(np.argwhere(mask).astype(np.int64))
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(len(coords), channels, generator=gen)
    return SparseVolume(coords, feats, tuple(dims), _sorted=True)


def run_bench(dims=(100, 100, 100), occupancy: float = 0.1, n: int = 10, trials: int = 1, seed: int = 0,
              channels: int = 8, heads: int = 2, time_ops: bool = True) -> BenchReport:
    """Pair counts summed over ``trials`` seeded volumes; optionally time one attention block.

    ``ratio`` is exactly ``sparse_pairs / dense_pairs`` of the summed counts.
    """
    dims = tuple(int(d) for d in dims)
    sparse_total, dense = 0, 0
    actives, ratios = [], []
    timed = []
    params = AttentionBlockParams(channels, heads, generator=torch.Generator().manual_seed(seed))
    for t in range(trials):
        vol = random_volume(dims, occupancy, channels, seed + t)
        sparse, dense = pair_count(vol, n)
        sparse_total += sparse
        actives.append(len(vol))
        ratios.append(sparse / dense)
        if time_ops and 0 < sparse <= TIMING_PAIR_BUDGET:
            start = time.perf_counter()
            with torch.no_grad():
                sparse_window_attention(vol, params, n)
            timed.append(time.perf_counter() - start)
    dense_total = dense * trials
    return BenchReport(
        dims=dims,
        occupancy=occupancy,
        window=n,
        sparse_pairs=int(sparse_total),
        dense_pairs=int(dense_total),
        ratio=sparse_total / dense_total if dense_total else 0.0,
        trials=trials,
        active_voxels=actives,
        trial_ratios=ratios,
        seconds_per_op=float(np.mean(timed)) if timed else None,
    )
