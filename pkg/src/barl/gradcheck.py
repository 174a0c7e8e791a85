"""Central finite-difference checks for every differentiable op and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import alignlabel as al
from . import alignrep as ar
from . import diffcore as dc

H = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def numeric_grad(fn: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], which: int,
                 coords, h: float = H) -> np.ndarray:
    x = arrays[which]
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        old = x[c]
        x[c] = old + h
        fp = fn(arrays)
        x[c] = old - h
        fm = fn(arrays)
        x[c] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def check_function(build: Callable[[list[dc.Tensor]], dc.Tensor], arrays: list[np.ndarray],
                   rng: np.random.Generator, max_coords: int | None = 64, h: float = H,
                   name: str = "") -> CheckResult:
    """Compare tape gradients of ``build`` against central differences.

    ``build`` maps leaf tensors to a scalar. Up to ``max_coords`` coordinates
    per input are sampled (all of them when ``None``).
    """
    t0 = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [dc.parameter(a.copy()) for a in arrays]
    root = build(leaves)
    dc.backward(root)

    def fn(arrs):
        with dc.no_grad():
            return build([dc.tensor(a) for a in arrs]).item()

    worst, n = 0.0, 0
    for i, (a, leaf) in enumerate(zip(arrays, leaves)):
        all_coords = list(np.ndindex(a.shape))
        if max_coords is not None and len(all_coords) > max_coords:
            pick = rng.choice(len(all_coords), size=max_coords, replace=False)
            coords = [all_coords[j] for j in sorted(pick)]
        else:
            coords = all_coords
        num = numeric_grad(fn, arrays, i, coords, h)
        ana = np.array([leaf.grad[c] for c in coords])
        if coords:
            worst = max(worst, float(rel_err(ana, num).max()))
        n += len(coords)
    return CheckResult(name, worst, n, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# per-op cases: each returns (build, arrays)

def _weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: dc.sum_(dc.mul(t, dc.tensor(w)))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _case_conv3d(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    red = _weighted(rng, (1, 3, 4, 4, 4))
    return (lambda t: red(dc.conv3d(t[0], t[1], t[2], stride=1))), [x, k, b]


def _case_conv3d_stride2(rng):
    x = rng.standard_normal((2, 2, 4, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    red = _weighted(rng, (2, 2, 2, 2, 2))
    return (lambda t: red(dc.conv3d(t[0], t[1], t[2], stride=2))), [x, k, b]


def _case_conv3d_pointwise(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    k = rng.standard_normal((4, 3, 1, 1, 1))
    b = rng.standard_normal(4)
    red = _weighted(rng, (2, 4, 2, 2, 2))
    return (lambda t: red(dc.conv3d(t[0], t[1], t[2]))), [x, k, b]


def _case_unary(op, sampler):
    def case(rng):
        x = sampler(rng, (2, 3, 2, 2, 2))
        red = _weighted(rng, x.shape)
        return (lambda t: red(op(t[0]))), [x]
    return case


def _case_binary(op, pos_y=False):
    def case(rng):
        x = rng.standard_normal((2, 3, 2, 2))
        y = rng.uniform(0.5, 2.0, x.shape) if pos_y else rng.standard_normal(x.shape)
        red = _weighted(rng, x.shape)
        return (lambda t: red(op(t[0], t[1]))), [x, y]
    return case


def _case_scalar_broadcast(rng):
    x = rng.standard_normal((2, 3, 2))
    s = rng.standard_normal(())
    red = _weighted(rng, x.shape)
    return (lambda t: red(dc.mul(t[0], t[1]))), [x, s]


def _case_group_norm(rng):
    x = rng.standard_normal((2, 4, 2, 2, 2))
    g = rng.uniform(0.5, 1.5, 4)
    b = rng.standard_normal(4)
    red = _weighted(rng, x.shape)
    return (lambda t: red(dc.group_norm(t[0], 2, t[1], t[2]))), [x, g, b]


def _case_reduce(kind, axes):
    def case(rng):
        x = rng.standard_normal((2, 3, 4))
        out_shape = np.sum(x, axis=axes).shape if axes is not None else ()
        red = _weighted(rng, out_shape)
        return (lambda t: red(dc.reduce(t[0], kind, axes))), [x]
    return case


def _case_softmax(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    red = _weighted(rng, x.shape)
    return (lambda t: red(dc.softmax_channels(t[0]))), [x]


def _case_upsample(rng):
    x = rng.standard_normal((1, 2, 2, 2, 2))
    red = _weighted(rng, (1, 2, 4, 4, 4))
    return (lambda t: red(dc.upsample_nearest(t[0]))), [x]


def _case_downsample(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    red = _weighted(rng, (1, 2, 2, 2, 2))
    return (lambda t: red(dc.downsample_nearest(t[0]))), [x]


def _case_shape_ops(rng):
    a = rng.standard_normal((2, 2, 2, 2, 2))
    b = rng.standard_normal((2, 3, 2, 2, 2))
    c = rng.standard_normal((2, 1, 2, 2, 2))
    red = _weighted(rng, (1, 8, 2, 2, 2))

    def build(t):
        cat = dc.concat([t[0], t[1], dc.repeat_channels(t[2], 3)], axis=1)
        sel = dc.index_select(cat, [1], axis=0)
        return red(dc.reshape(dc.reshape(sel, (8, 8)), (1, 8, 2, 2, 2)))
    return build, [a, b, c]


# loss cases take logits and pass them through softmax so inputs stay on the simplex

def _probs(t):
    return dc.softmax_channels(t)


def _logits(rng, shape=(2, 3, 2, 2, 2)):
    return rng.standard_normal(shape)


def _multiscale(rng, n=2, c=3):
    return [rng.standard_normal((n, c) + (2 ** k,) * 3) for k in range(4)]


def _case_soften(rng):
    x = _logits(rng)
    red = _weighted(rng, x.shape)
    return (lambda t: red(al.soften(_probs(t[0]), 0.5))), [x]


def _case_distr(tool):
    def case(rng):
        arrays = _multiscale(rng) + _multiscale(rng)
        return (lambda t: al.distr_loss([_probs(a) for a in t[:4]], [_probs(a) for a in t[4:]],
                                        0.5, tool)), arrays
    return case


def _case_cps(tool):
    def case(rng):
        arrays = _multiscale(rng) + _multiscale(rng)
        return (lambda t: al.deep_cps_loss([_probs(a) for a in t[:4]], [_probs(a) for a in t[4:]],
                                           tool)), arrays
    return case


def _case_entropy(rng):
    return (lambda t: al.entropy_loss(_probs(t[0]))), [_logits(rng)]


def _case_kl(rng):
    q = al.PriorDistribution.from_frequencies(rng.dirichlet(np.ones(3)))
    return (lambda t: al.kl_prior_loss(_probs(t[0]), q)), [_logits(rng)]


def _case_pcbc(rng):
    a, b = _logits(rng), _logits(rng)
    y = al.onehot(rng.integers(0, 3, (2, 2, 2, 2)), 3)
    with dc.no_grad():
        u = al.disagreement(_probs(dc.tensor(a)), _probs(dc.tensor(b)))
    # the disagreement weight is detached, so hold it fixed under perturbation
    return (lambda t: al.pcbc_loss(_probs(t[0]), _probs(t[1]), y, weights=u)), [a, b]


def _case_seg(rng):
    y = al.onehot(rng.integers(0, 3, (2, 2, 2, 2)), 3)
    return (lambda t: al.seg_loss(_probs(t[0]), y)), [_logits(rng)]


def _case_region(rng):
    fs, ft = rng.standard_normal((1, 4, 4, 4, 4)), rng.standard_normal((1, 4, 4, 4, 4))
    ls, lt = rng.integers(0, 3, (4, 4, 4)), rng.integers(0, 3, (4, 4, 4))
    return (lambda t: ar.region_loss(ar.region_prototypes(t[0], t[1], ls, lt, range(3))).value), [fs, ft]


def _case_instance(rng):
    fs, ft = rng.standard_normal((1, 4, 6, 6, 6)), rng.standard_normal((1, 4, 6, 6, 6))
    lt = np.zeros((6, 6, 6), dtype=int)
    lt[0:2, 0:2, 0:2] = 1
    lt[4:6, 4:6, 0:3] = 1
    lt[0:3, 4:6, 4:6] = 2
    return (lambda t: ar.instance_loss(ar.instance_prototypes(t[0], t[1], lt, [1, 2], 26, 2)).value), [fs, ft]


OP_CASES: dict[str, Callable] = {
    "conv3d": _case_conv3d,
    "conv3d_stride2": _case_conv3d_stride2,
    "conv3d_pointwise": _case_conv3d_pointwise,
    "upsample_nearest": _case_upsample,
    "downsample_nearest": _case_downsample,
    "softmax_channels": _case_softmax,
    "relu": _case_unary(dc.relu, _away_from_zero),
    "abs": _case_unary(dc.abs_, _away_from_zero),
    "square": _case_unary(dc.square, lambda r, s: r.standard_normal(s)),
    "sqrt": _case_unary(dc.sqrt, lambda r, s: r.uniform(0.5, 2.0, s)),
    "exp": _case_unary(dc.exp, lambda r, s: r.standard_normal(s)),
    "sigmoid": _case_unary(dc.sigmoid, lambda r, s: r.standard_normal(s)),
    "log_safe": _case_unary(lambda t: dc.log_safe(t, 1e-12), lambda r, s: r.uniform(0.1, 2.0, s)),
    "scalar_mul": _case_unary(lambda t: dc.scalar_mul(t, -1.7), lambda r, s: r.standard_normal(s)),
    "neg": _case_unary(dc.neg, lambda r, s: r.standard_normal(s)),
    "add": _case_binary(dc.add),
    "sub": _case_binary(dc.sub),
    "mul": _case_binary(dc.mul),
    "div": _case_binary(dc.div, pos_y=True),
    "scalar_broadcast": _case_scalar_broadcast,
    "group_norm": _case_group_norm,
    "reduce_sum": _case_reduce("sum", None),
    "reduce_mean_axes": _case_reduce("mean", (0, 2)),
    "reduce_sum_axis": _case_reduce("sum", (1,)),
    "shape_ops": _case_shape_ops,
}

LOSS_CASES: dict[str, Callable] = {
    "soften": _case_soften,
    "distr_mse": _case_distr("mse"),
    "distr_kl": _case_distr("kl"),
    "cps_ce": _case_cps("ce"),
    "cps_dice": _case_cps("dice"),
    "entropy": _case_entropy,
    "kl_prior": _case_kl,
    "pcbc": _case_pcbc,
    "seg": _case_seg,
    "region": _case_region,
    "instance": _case_instance,
}

ALL_CASES = {**OP_CASES, **LOSS_CASES}


def run_case(name: str, seed: int = 0, max_coords: int | None = 64) -> CheckResult:
    if name not in ALL_CASES:
        raise KeyError(f"unknown op {name!r}; choose from {sorted(ALL_CASES)}")
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    build, arrays = ALL_CASES[name](rng)
    return check_function(build, arrays, rng, max_coords, name=name)


def run_cases(names, trials: int = 1, max_coords: int | None = 64) -> list[CheckResult]:
    out = []
    for name in names:
        results = [run_case(name, seed, max_coords) for seed in range(trials)]
        out.append(CheckResult(name, max(r.max_rel_err for r in results),
                               sum(r.n_coords for r in results), sum(r.seconds for r in results)))
    return out
