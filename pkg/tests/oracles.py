"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def neighbor_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    # 6: share a face, 18: face or edge, 26: any touching voxel
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    return [d for d in itertools.product((-1, 0, 1), repeat=3)
            if 0 < sum(map(abs, d)) <= max_nonzero]


def bfs_components(mask: np.ndarray, connectivity: int) -> list[frozenset]:
    """Flood fill from each unvisited true voxel in C order."""
    shape = mask.shape
    seen = np.zeros(shape, dtype=bool)
    comps = []
    offs = neighbor_offsets(connectivity)
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(int(np.ravel_multi_index(v, shape)))
            for d in offs:
                w = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if all(0 <= w[i] < shape[i] for i in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append(frozenset(comp))
    return comps


def surface_voxels(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Foreground voxels with at least one background face neighbor (outside counts as background)."""
    pts = []
    for v in zip(*np.nonzero(mask)):
        for d in neighbor_offsets(6):
            w = tuple(v[i] + d[i] for i in range(3))
            if not all(0 <= w[i] < mask.shape[i] for i in range(3)) or not mask[w]:
                pts.append(tuple(int(a) for a in v))
                break
    return pts


def all_pairs_surface(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """HD95 (nearest rank over both directed distance lists pooled) and ASD by explicit pairs."""
    a, b = surface_voxels(pred), surface_voxels(gt)
    if not a or not b:
        return math.inf, math.inf

    def directed(src, dst):
        return [min(math.dist(p, q) for q in dst) for p in src]

    d = sorted(directed(a, b) + directed(b, a))
    rank = max(1, math.ceil(0.95 * len(d)))
    return d[rank - 1], sum(d) / len(d)


def loop_masked_mean(f: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """f [1, D, d, h, w]; mean of the feature vectors at true voxels."""
    acc = np.zeros(f.shape[1])
    n = 0
    for v in zip(*np.nonzero(mask)):
        acc += f[(0, slice(None)) + v]
        n += 1
    return acc / n


def loop_cosine(a: np.ndarray, b: np.ndarray) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 1.0 - dot / (na * nb)
