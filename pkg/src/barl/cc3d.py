"""3D connected-component labeling and minimum-volume filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

CONNECTIVITIES = (6, 18, 26)
_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class InstanceMask:
    """One connected component of class ``class_id``.

    ``voxels`` holds sorted linear (C-order) indices into a volume of ``shape``.
    """
    voxels: np.ndarray
    shape: tuple[int, int, int]
    class_id: int = 1
    component_id: int = 0

    @property
    def volume(self) -> int:
        return int(self.voxels.size)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.voxels] = True
        return m.reshape(self.shape)


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def connected_components(mask: np.ndarray, connectivity: int = 26, class_id: int = 1) -> list[InstanceMask]:
    """Partition the true voxels of a 3D binary mask into maximal connected sets.

    Components are ordered by their smallest linear voxel index.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    labels, n = ndimage.label(mask, structure=structure(connectivity))
    if n == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    groups = np.split(idx, splits)
    groups.sort(key=lambda g: g[0])
    return [InstanceMask(g, mask.shape, class_id, j) for j, g in enumerate(groups)]


def filter_by_volume(instances: list[InstanceMask], tau_vol: int) -> list[InstanceMask]:
    if tau_vol < 1:
        raise ValueError(f"tau_vol must be >= 1, got {tau_vol}")
    return [m for m in instances if m.volume >= tau_vol]


def count_components(mask: np.ndarray, connectivity: int = 26) -> int:
    return len(connected_components(mask, connectivity))


def label_volume(instances: list[InstanceMask], shape) -> np.ndarray:
    """Integer volume with component ``j`` painted as ``j + 1``."""
    out = np.zeros(int(np.prod(shape)), dtype=np.int64)
    for j, m in enumerate(instances):
        out[m.voxels] = j + 1
    return out.reshape(shape)
