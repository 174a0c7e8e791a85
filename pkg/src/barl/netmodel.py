"""Tiny 3D attention U-Net branches with deep-supervision heads and a
representation head, plus the checkpoint format used for parameters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

REP_ATTACHMENTS = ("rep0", "rep1", "rep2", "rep3")
# feature map each attachment reads, and its downsampling factor w.r.t. the input
_ATTACH_SOURCE = {"rep0": ("enc3", 4), "rep1": ("bottleneck", 8), "rep2": ("dec2", 2), "rep3": ("dec1", 1)}


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    n_classes: int = 3
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    rep_dim: int = 16
    rep_attach: str = "rep3"
    attention: bool = True

    def __post_init__(self):
        if self.rep_attach not in REP_ATTACHMENTS:
            raise ValueError(f"rep_attach must be one of {REP_ATTACHMENTS}, got {self.rep_attach!r}")
        if len(self.widths) != 4:
            raise ValueError("widths needs 4 entries (3 encoder levels + bottleneck)")
        if self.n_classes < 2 or self.rep_dim < 1:
            raise ValueError("n_classes >= 2 and rep_dim >= 1 required")

    @property
    def rep_scale(self) -> int:
        return _ATTACH_SOURCE[self.rep_attach][1]


@dataclass
class Branch:
    config: NetConfig
    params: dict[str, Tensor]
    seed: int

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)


@dataclass
class PredictionSet:
    """Multi-scale probabilities ``probs[k]`` (k=0 coarsest, 3 full) and features ``rep``."""
    probs: list[Tensor]
    logits: list[Tensor]
    rep: Tensor
    rep_scale: int
    view: str = "weak"
    features: dict[str, Tensor] = field(default_factory=dict, repr=False)

    @property
    def full(self) -> Tensor:
        return self.probs[-1]


def _groups(c: int) -> int:
    for g in (4, 2, 1):
        if c % g == 0 and c >= g:
            return g
    return 1


def _param_specs(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    w1, w2, w3, w4 = cfg.widths
    C = cfg.n_classes
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, cin, cout, k):
        specs.append((f"{name}.w", (cout, cin, k, k, k), "he"))
        specs.append((f"{name}.b", (cout,), "zero"))

    def norm(name, c):
        specs.append((f"{name}.gamma", (c,), "one"))
        specs.append((f"{name}.beta", (c,), "zero"))

    def block(name, cin, cout, k=3):
        conv(f"{name}.conv", cin, cout, k)
        norm(f"{name}.norm", cout)

    block("enc1", cfg.in_channels, w1)
    block("enc2", w1, w2)
    block("enc3", w2, w3)
    block("bottleneck", w3, w4)
    for name, cx, cg in (("gate3", w3, w4), ("gate2", w2, w3), ("gate1", w1, w2)):
        if cfg.attention:
            ci = max(cx // 2, 1)
            conv(f"{name}.x", cx, ci, 1)
            conv(f"{name}.g", cg, ci, 1)
            conv(f"{name}.psi", ci, 1, 1)
    block("dec3", w4 + w3, w3)
    block("dec2", w3 + w2, w2)
    block("dec1", w2 + w1, w1)
    for k, c in enumerate((w4, w3, w2, w1)):
        conv(f"head{k}", c, C, 1)
    src_c = {"enc3": w3, "bottleneck": w4, "dec2": w2, "dec1": w1}[_ATTACH_SOURCE[cfg.rep_attach][0]]
    conv("rep.conv1", src_c, cfg.rep_dim, 1)
    norm("rep.norm", cfg.rep_dim)
    conv("rep.conv2", cfg.rep_dim, cfg.rep_dim, 1)
    return specs


def init_branch(seed: int, config: NetConfig | None = None, head_bias=None) -> Branch:
    """He-normal (fan-in) kernels, zero biases, unit norm scale.

    ``head_bias`` (length ``n_classes``) sets the initial bias of every output
    head, e.g. log class frequencies so the untrained net starts at the prior.
    """
    cfg = config or NetConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        if head_bias is not None and name.startswith("head") and name.endswith(".b"):
            data = np.asarray(head_bias, dtype=np.float64).reshape(shape).copy()
        params[name] = dc.parameter(data, name=name)
    return Branch(cfg, params, seed)


def _conv(p, name, x, stride=1):
    return dc.conv3d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding="same")


def _block(p, name, x, stride=1):
    y = _conv(p, f"{name}.conv", x, stride)
    c = y.shape[1]
    y = dc.group_norm(y, _groups(c), p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    return dc.relu(y)


def _gate(p, name, x, g):
    q = dc.relu(dc.add(_conv(p, f"{name}.x", x), _conv(p, f"{name}.g", g)))
    alpha = dc.sigmoid(_conv(p, f"{name}.psi", q))
    return dc.mul(x, dc.repeat_channels(alpha, x.shape[1]))


def forward(branch: Branch, x, view: str = "weak") -> PredictionSet:
    """Run one branch on ``x`` of shape [N, Cin, D, H, W] (extents divisible by 8)."""
    cfg, p = branch.config, branch.params
    x = x if isinstance(x, Tensor) else dc.tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise dc.DimensionError(f"forward expects [N,{cfg.in_channels},D,H,W], got {x.shape}")
    bad = [ax for ax, e in zip("DHW", x.shape[2:]) if e % 8]
    if bad:
        raise dc.DimensionError(f"forward: spatial axes {bad} of {x.shape[2:]} not divisible by 8")

    enc1 = _block(p, "enc1", x)
    enc2 = _block(p, "enc2", enc1, stride=2)
    enc3 = _block(p, "enc3", enc2, stride=2)
    bott = _block(p, "bottleneck", enc3, stride=2)

    def up(name, coarse, skip):
        g = dc.upsample_nearest(coarse)
        if cfg.attention:
            skip = _gate(p, f"gate{name[-1]}", skip, g)
        return _block(p, name, dc.concat([g, skip], axis=1))

    dec3 = up("dec3", bott, enc3)
    dec2 = up("dec2", dec3, enc2)
    dec1 = up("dec1", dec2, enc1)

    logits = [_conv(p, f"head{k}", f) for k, f in enumerate((bott, dec3, dec2, dec1))]
    probs = [dc.softmax_channels(z) for z in logits]

    feats = {"enc1": enc1, "enc2": enc2, "enc3": enc3, "bottleneck": bott,
             "dec3": dec3, "dec2": dec2, "dec1": dec1}
    src, scale = _ATTACH_SOURCE[cfg.rep_attach]
    r = _conv(p, "rep.conv1", feats[src])
    r = dc.relu(dc.group_norm(r, _groups(cfg.rep_dim), p["rep.norm.gamma"], p["rep.norm.beta"]))
    rep = _conv(p, "rep.conv2", r)
    return PredictionSet(probs, logits, rep, scale, view, feats)


# ---------------------------------------------------------------------------
# checkpoint format: <stem>.json manifest + <stem>.bin little-endian float64 payload

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_arrays(stem, arrays: dict[str, np.ndarray], cfg_hash: str = "", meta: dict | None = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64",
                            "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    manifest = {"format": "barl-params-v1", "byteorder": "little", "config_hash": cfg_hash,
                "params": entries, "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    payload = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["params"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest


def save_branch(stem, branch: Branch) -> None:
    cfg = branch.config.__dict__ | {"seed": branch.seed}
    save_arrays(stem, branch.state_arrays(), config_hash(cfg), {"net": _jsonable(cfg)})


def load_branch(stem) -> Branch:
    arrays, manifest = load_arrays(stem)
    net = dict(manifest["meta"]["net"])
    seed = net.pop("seed")
    net["widths"] = tuple(net["widths"])
    branch = init_branch(seed, NetConfig(**net))
    branch.load_arrays(arrays)
    return branch


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
