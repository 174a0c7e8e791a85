"""Representation-space alignment: per-class region prototypes and per-lesion
instance prototypes, compared by cosine distance between the two branches.

Feature volumes are tensors of shape [1, D_rep, d, h, w]; masks and label
maps are plain numpy arrays at the feature resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cc3d
from . import diffcore as dc
from .diffcore import Tensor

_TINY = 1e-30


@dataclass
class AlignResult:
    value: Tensor
    skipped: bool
    n_terms: int


@dataclass
class InstancePair:
    class_id: int
    z_s: Tensor
    z_t: Tensor
    mask: cc3d.InstanceMask


@dataclass
class PrototypeSet:
    region: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)
    instances: list[InstancePair] = field(default_factory=list)
    empty_classes: list[int] = field(default_factory=list)


def argmax_labels(probs, scale: int = 1) -> np.ndarray:
    """Hard labels from [1, C, D, H, W] (or [C, D, H, W]) probabilities,
    nearest-neighbor downsampled by ``scale``."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.ndim == 5:
        p = p[0]
    lab = p.argmax(axis=0)
    if scale > 1:
        lab = lab[::scale, ::scale, ::scale]
    return lab


def masked_mean(f: Tensor, mask: np.ndarray) -> Tensor:
    """Mean feature vector over the voxels of a boolean mask; returns [D_rep]."""
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    m = np.broadcast_to(mask[None, None], f.shape).astype(np.float64)
    s = dc.sum_(dc.mul(f, dc.tensor(m)), axes=(0, 2, 3, 4))
    return dc.scalar_mul(s, 1.0 / count)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    dot = dc.sum_(dc.mul(a, b))
    nn = dc.mul(dc.sum_(dc.square(a)), dc.sum_(dc.square(b)))
    return dc.sub(1.0, dc.div(dot, dc.sqrt(dc.add(nn, _TINY))))


def region_prototypes(f_s: Tensor, f_t: Tensor, lab_s: np.ndarray, lab_t: np.ndarray,
                      classes, cross: bool = True) -> PrototypeSet:
    """Per-class prototypes from both branches.

    With ``cross`` pooling, ``R_c`` averages T-features over the S mask and
    ``R~_c`` averages S-features over the T mask; otherwise each branch pools
    its own features over its own mask.
    """
    out = PrototypeSet()
    for c in classes:
        ms, mt = lab_s == c, lab_t == c
        if not ms.any() or not mt.any():
            out.empty_classes.append(int(c))
            continue
        if cross:
            out.region[int(c)] = (masked_mean(f_t, ms), masked_mean(f_s, mt))
        else:
            out.region[int(c)] = (masked_mean(f_s, ms), masked_mean(f_t, mt))
    return out


def region_loss(protos: PrototypeSet) -> AlignResult:
    terms = [cosine_distance(r, rt) for r, rt in protos.region.values()]
    return _mean_or_skip(terms)


def instance_prototypes(f_s: Tensor, f_t: Tensor, lab_t: np.ndarray, lesion_classes,
                        connectivity: int = 26, tau_vol: int = 4) -> PrototypeSet:
    """Pairs of S/T prototypes pooled over each sufficiently large connected
    component of the T-branch lesion masks."""
    out = PrototypeSet()
    for c in lesion_classes:
        comps = cc3d.connected_components(lab_t == c, connectivity, class_id=int(c))
        for inst in cc3d.filter_by_volume(comps, tau_vol):
            m = inst.to_mask()
            out.instances.append(InstancePair(int(c), masked_mean(f_s, m), masked_mean(f_t, m), inst))
    return out


def instance_loss(protos: PrototypeSet) -> AlignResult:
    by_class: dict[int, list[Tensor]] = {}
    for pair in protos.instances:
        by_class.setdefault(pair.class_id, []).append(cosine_distance(pair.z_s, pair.z_t))
    per_class = [dc.scalar_mul(_sum(ts), 1.0 / len(ts)) for _, ts in sorted(by_class.items())]
    return _mean_or_skip(per_class)


def _sum(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = dc.add(acc, t)
    return acc


def _mean_or_skip(terms: list[Tensor]) -> AlignResult:
    if not terms:
        return AlignResult(dc.tensor(0.0), True, 0)
    return AlignResult(dc.scalar_mul(_sum(terms), 1.0 / len(terms)), False, len(terms))
