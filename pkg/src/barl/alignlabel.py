"""Label-space objectives: dual-path regularization (softened MSE, deep cross
pseudo supervision, entropy and prior matching), disagreement-weighted
supervised correction, and the CE + Dice segmentation loss.

Probability inputs are tensors of shape [N, C, d, h, w]; multi-scale inputs
are lists ordered coarsest to finest. One-hot targets are numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_FLOOR = 1e-12
DICE_SMOOTH = 1e-6

DISTR_TOOLS = ("mse", "kl")
PSEUDO_TOOLS = ("ce", "dice")
TOOL_VARIANTS = {"mse+ce": ("mse", "ce"), "mse+dice": ("mse", "dice"),
                 "kl+dice": ("kl", "dice"), "kl+ce": ("kl", "ce")}


class NumericHalt(FloatingPointError):
    """A loss component became non-finite."""


@dataclass(frozen=True)
class PriorDistribution:
    q: np.ndarray

    @classmethod
    def from_frequencies(cls, freqs, floor: float = 1e-6) -> "PriorDistribution":
        q = np.maximum(np.asarray(freqs, dtype=float), floor)
        return cls(q / q.sum())

    @classmethod
    def from_labels(cls, labels, n_classes: int, floor: float = 1e-6) -> "PriorDistribution":
        counts = sum(np.bincount(np.asarray(l).ravel(), minlength=n_classes)[:n_classes] for l in labels)
        return cls.from_frequencies(counts / counts.sum(), floor)


def onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """[N, d, h, w] integer labels -> [N, C, d, h, w] float one-hot."""
    labels = np.asarray(labels)
    return np.moveaxis(np.eye(n_classes)[labels], -1, 1)


def check_onehot(y: np.ndarray) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("target is not one-hot along the channel axis")


def pseudo_labels(p: Tensor) -> np.ndarray:
    """Detached one-hot argmax of a probability tensor."""
    return onehot(p.data.argmax(axis=1), p.shape[1])


def _spatial_axes(t: Tensor) -> tuple[int, ...]:
    return (0,) + tuple(range(2, t.ndim))


# ---------------------------------------------------------------------------
# building blocks

def soften(p, temperature: float) -> Tensor:
    """Per-voxel ``p**(1/T)`` renormalized over channels (T < 1 sharpens)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    p = p if isinstance(p, Tensor) else dc.tensor(p)
    if temperature == 1.0:
        return p
    return dc.softmax_channels(dc.scalar_mul(dc.log_safe(p, LOG_FLOOR), 1.0 / temperature))


def cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """Voxel-mean of ``-sum_c y log p``."""
    ll = dc.sum_(dc.mul(dc.tensor(y), dc.log_safe(p, LOG_FLOOR)), axes=1)
    return dc.neg(dc.mean(ll))


def dice_loss(p: Tensor, y: np.ndarray) -> Tensor:
    """``1 - mean_c 2 sum(p y) / (sum p + sum y + smooth)`` with sums over batch and space."""
    ax = _spatial_axes(p)
    inter = dc.sum_(dc.mul(p, dc.tensor(y)), axes=ax)
    denom = dc.add(dc.sum_(p, axes=ax), dc.tensor(y.sum(axis=ax) + DICE_SMOOTH))
    return dc.sub(1.0, dc.mean(dc.scalar_mul(dc.div(inter, denom), 2.0)))


def _sym_kl(a: Tensor, b: Tensor) -> Tensor:
    # 0.5 (KL(a||b) + KL(b||a)) = 0.5 sum_c (a - b)(log a - log b), voxel mean
    d = dc.mul(dc.sub(a, b), dc.sub(dc.log_safe(a, LOG_FLOOR), dc.log_safe(b, LOG_FLOOR)))
    return dc.scalar_mul(dc.mean(dc.sum_(d, axes=1)), 0.5)


def _scale_mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.scalar_mul(acc, 1.0 / len(terms))


def _check_scales(ps_s, ps_t):
    if len(ps_s) != len(ps_t) or not ps_s:
        raise ValueError(f"scale-count mismatch: {len(ps_s)} vs {len(ps_t)}")
    for k, (a, b) in enumerate(zip(ps_s, ps_t)):
        if a.shape != b.shape:
            raise dc.DimensionError(f"scale {k}: shapes {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# dual-path regularization

def distr_loss(ps_s: list[Tensor], ps_t: list[Tensor], temperature: float = 0.5,
               tool: str = "mse") -> Tensor:
    """Scale-averaged discrepancy between softened predictions.

    ``mse`` is the mean over voxels and channels of the squared difference;
    ``kl`` is the voxel mean of the symmetric KL divergence.
    """
    _check_scales(ps_s, ps_t)
    if tool not in DISTR_TOOLS:
        raise ValueError(f"distribution tool must be one of {DISTR_TOOLS}, got {tool!r}")
    terms = []
    for a, b in zip(ps_s, ps_t):
        sa, sb = soften(a, temperature), soften(b, temperature)
        terms.append(dc.mean(dc.square(dc.sub(sa, sb))) if tool == "mse" else _sym_kl(sa, sb))
    return _scale_mean(terms)


def deep_cps_loss(ps_s: list[Tensor], ps_t: list[Tensor], tool: str = "ce") -> Tensor:
    """Each branch is supervised by the other's detached argmax at every scale."""
    _check_scales(ps_s, ps_t)
    if tool not in PSEUDO_TOOLS:
        raise ValueError(f"pseudo-label tool must be one of {PSEUDO_TOOLS}, got {tool!r}")
    fn = cross_entropy if tool == "ce" else dice_loss
    terms = [dc.add(fn(a, pseudo_labels(b)), fn(b, pseudo_labels(a))) for a, b in zip(ps_s, ps_t)]
    return _scale_mean(terms)


def entropy_loss(p: Tensor) -> Tensor:
    """Voxel-mean Shannon entropy (nats)."""
    h = dc.sum_(dc.mul(p, dc.log_safe(p, LOG_FLOOR)), axes=1)
    return dc.neg(dc.mean(h))


def kl_prior_loss(p: Tensor, prior: PriorDistribution) -> Tensor:
    """``KL(p_bar || q)`` where ``p_bar`` is the class-wise mean over all voxels of the batch."""
    q = np.asarray(prior.q, dtype=float)
    if q.shape != (p.shape[1],):
        raise dc.DimensionError(f"prior has {q.shape[0]} classes, predictions {p.shape[1]}")
    pbar = dc.mean(p, axes=_spatial_axes(p))
    return dc.sum_(dc.mul(pbar, dc.sub(dc.log_safe(pbar, LOG_FLOOR), dc.tensor(np.log(q)))))


@dataclass
class DPRResult:
    total: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)


def dpr_loss(ps_s: list[Tensor], ps_t: list[Tensor], prior: PriorDistribution,
             lambda_ent: float = 0.5, lambda_kl: float = 0.1, temperature: float = 0.5,
             tools: str = "mse+ce", ent_target: str = "both") -> DPRResult:
    if lambda_ent < 0 or lambda_kl < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambda_ent}, {lambda_kl}")
    distr_tool, pseudo_tool = TOOL_VARIANTS[tools]
    parts = {
        "distr": distr_loss(ps_s, ps_t, temperature, distr_tool),
        "cps": deep_cps_loss(ps_s, ps_t, pseudo_tool),
        "ent": branch_average(entropy_loss, ps_s[-1], ps_t[-1], ent_target),
        "kl": branch_average(lambda p: kl_prior_loss(p, prior), ps_s[-1], ps_t[-1], "both"),
    }
    weights = {"distr": 1.0, "cps": 1.0, "ent": lambda_ent, "kl": lambda_kl}
    return DPRResult(weighted_sum(parts, weights), parts, weights)


def branch_average(fn, p_s: Tensor, p_t: Tensor, target: str = "both") -> Tensor:
    if target == "S":
        return fn(p_s)
    if target == "both":
        return dc.scalar_mul(dc.add(fn(p_s), fn(p_t)), 0.5)
    raise ValueError(f"target must be 'S' or 'both', got {target!r}")


# ---------------------------------------------------------------------------
# supervised terms

def disagreement(p_s: Tensor, p_t: Tensor) -> np.ndarray:
    """Per-voxel L1 distance between the branch distributions, [N, d, h, w]; detached."""
    return np.abs(p_s.data - p_t.data).sum(axis=1)


def pcbc_loss(p_s: Tensor, p_t: Tensor, y: np.ndarray, eps: float = 1e-8,
              weights: np.ndarray | None = None) -> Tensor:
    """Squared error to the one-hot target, weighted by branch disagreement.

    ``weights`` overrides the (detached) per-voxel disagreement.
    """
    check_onehot(y)
    u = disagreement(p_s, p_t) if weights is None else np.asarray(weights, dtype=float)
    yt = dc.tensor(y)
    sq = dc.add(dc.sum_(dc.square(dc.sub(p_s, yt)), axes=1),
                dc.sum_(dc.square(dc.sub(p_t, yt)), axes=1))
    num = dc.sum_(dc.mul(sq, dc.tensor(u)))
    return dc.scalar_mul(num, 1.0 / (u.sum() + eps))


def seg_loss(p: Tensor, y: np.ndarray) -> Tensor:
    return dc.add(cross_entropy(p, y), dice_loss(p, y))


# ---------------------------------------------------------------------------
# objective assembly

REP_WEIGHT = 0.1


def weighted_sum(parts: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    acc = None
    for name, value in parts.items():
        if not math.isfinite(float(np.asarray(value.data).sum())):
            raise NumericHalt(f"loss component {name!r} is non-finite")
        w = weights.get(name, 1.0)
        term = dc.scalar_mul(value, w)
        acc = term if acc is None else dc.add(acc, term)
    return acc if acc is not None else dc.tensor(0.0)


def total_loss(region, instance, dpr, pcbc, seg, rep_weight: float = REP_WEIGHT) -> Tensor:
    """``rep_weight * (region + instance) + dpr + pcbc + seg``."""
    parts = {k: v if isinstance(v, Tensor) else dc.tensor(float(v)) for k, v in
             dict(region=region, instance=instance, dpr=dpr, pcbc=pcbc, seg=seg).items()}
    return weighted_sum(parts, {"region": rep_weight, "instance": rep_weight})
