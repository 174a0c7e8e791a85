"""Dual-branch co-training loop.

The weak view of every sample goes through branch S, the strong view through
branch T. Supervised terms use the labeled part of the batch; the
consistency and alignment terms use the parts selected in the config.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import alignlabel as al
from . import alignrep as ar
from . import diffcore as dc
from . import metrics as mt
from . import netmodel as nm
from . import volgen as vg


class ConfigError(ValueError):
    pass


SOURCES = ("all", "labeled", "unlabeled")
TOGGLES = ("use_region", "use_instance", "use_distr", "use_cps", "use_im", "use_pcbc")
PRESETS = {
    "barl": {},
    "supervised": {k: False for k in TOGGLES},
    "no_rep": {"use_region": False, "use_instance": False},
    "no_region": {"use_region": False},
    "no_instance": {"use_instance": False},
    "no_dpr": {"use_distr": False, "use_cps": False, "use_im": False},
    "no_im": {"use_im": False},
    "no_pcbc": {"use_pcbc": False},
}
COMPONENTS = ("seg", "pcbc", "distr", "cps", "ent", "kl", "region", "instance")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # data
    n_samples: int = 40
    n_test: int = 10
    grid: int = 16
    n_classes: int = 3
    fragments_min: int = 2
    fragments_max: int = 3
    label_ratio: float = 0.1
    # schedule
    epochs: int = 60
    steps_per_epoch: int = 0  # 0: one step per labeled sample
    labeled_per_batch: int = 1
    unlabeled_per_batch: int = 1
    lr_base: float = 0.02
    lr_final: float = 1e-4
    warmup_epochs: int = 6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # objective
    preset: str = "barl"
    use_region: bool | None = None  # None: taken from the preset
    use_instance: bool | None = None  # None: taken from the preset
    use_distr: bool | None = None  # None: taken from the preset
    use_cps: bool | None = None  # None: taken from the preset
    use_im: bool | None = None  # None: taken from the preset
    use_pcbc: bool | None = None  # None: taken from the preset
    rep_weight: float = 0.1
    rampup_epochs: int = 20  # 0: unsupervised weights fixed from the first step
    lambda_ent: float = 0.5
    lambda_kl: float = 0.1
    temperature: float = 0.5
    tools: str = "mse+ce"
    align_source: str = "all"
    dpr_source: str = "all"
    im_source: str = "unlabeled"
    ent_target: str = "both"
    cross_pool: bool = True
    stop_grad_t: bool = False
    tau_vol: int = 4
    connectivity: int = 26
    # network
    rep_dim: int = 16
    rep_attach: str = "rep3"
    attention: bool = True
    identical_init: bool = False
    prior_bias: bool = True
    # augmentation
    weak_shift: float = 0.05
    noise_sigma: float = 0.1
    jitter: bool = True
    cutout: bool = True
    flip: bool = True
    # bookkeeping
    eval_every: int = 1
    eval_mode: str = "ensemble"
    ckpt_every: int = 0

    def __post_init__(self):
        problems = []
        if self.preset not in PRESETS:
            problems.append(f"preset must be one of {sorted(PRESETS)}")
        else:
            for k in TOGGLES:
                if getattr(self, k) is None:
                    object.__setattr__(self, k, PRESETS[self.preset].get(k, True))
        for name in ("lr_base", "lr_final", "temperature"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("lambda_ent", "lambda_kl", "rep_weight", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            problems.append("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.rampup_epochs < 0:
            problems.append("rampup_epochs must be >= 0")
        if self.labeled_per_batch < 1:
            problems.append("labeled_per_batch must be >= 1")
        if self.unlabeled_per_batch < 0:
            problems.append("unlabeled_per_batch must be >= 0")
        if self.tools not in al.TOOL_VARIANTS:
            problems.append(f"tools must be one of {sorted(al.TOOL_VARIANTS)}")
        for name in ("align_source", "dpr_source", "im_source"):
            if getattr(self, name) not in SOURCES:
                problems.append(f"{name} must be one of {SOURCES}")
        if self.ent_target not in ("S", "both"):
            problems.append("ent_target must be S or both")
        if self.connectivity not in (6, 18, 26):
            problems.append("connectivity must be 6, 18 or 26")
        if self.tau_vol < 1:
            problems.append("tau_vol must be >= 1")
        if self.rep_attach not in nm.REP_ATTACHMENTS:
            problems.append(f"rep_attach must be one of {nm.REP_ATTACHMENTS}")
        if self.eval_mode not in ("ensemble", "S", "T"):
            problems.append("eval_mode must be ensemble, S or T")
        if self.grid % 8:
            problems.append("grid must be divisible by 8")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- construction -------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, raw: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string or typed values. A preset fills the module toggles;
        an explicit toggle that contradicts the preset is an error."""
        valid = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(valid))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(valid)}")
        values = dataclasses.asdict(base) if base else {}
        typed = {k: _coerce(valid[k], v) for k, v in raw.items()}
        preset = typed.get("preset", values.get("preset", "barl"))
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
        if "preset" in typed:
            implied = {k: True for k in TOGGLES} | PRESETS[preset]
            clash = [k for k in TOGGLES if k in typed and typed[k] != implied[k]]
            if clash:
                raise ConfigError(f"preset {preset!r} conflicts with explicit {clash}")
            values.update(implied)
        values.update(typed)
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        raw = parse_kv_text(Path(path).read_text())
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_mapping(kw, base=self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_kv_text(self) -> str:
        return "".join(f"{k}={_fmt_value(v)}\n" for k, v in self.to_dict().items())

    # -- derived ------------------------------------------------------------
    @property
    def n_labeled(self) -> int:
        return int(math.floor(self.label_ratio * self.n_samples + 1e-9))

    @property
    def steps_in_epoch(self) -> int:
        return self.steps_per_epoch or max(1, self.n_labeled // self.labeled_per_batch)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_in_epoch

    def weights(self, ramp: float = 1.0) -> dict[str, float]:
        """Loss weights; ``ramp`` scales every term that does not see labels."""
        return {
            "seg": 1.0,
            "pcbc": 1.0 if self.use_pcbc else 0.0,
            "distr": ramp if self.use_distr else 0.0,
            "cps": ramp if self.use_cps else 0.0,
            "ent": ramp * self.lambda_ent if self.use_im else 0.0,
            "kl": ramp * self.lambda_kl if self.use_im else 0.0,
            "region": ramp * self.rep_weight if self.use_region else 0.0,
            "instance": ramp * self.rep_weight if self.use_instance else 0.0,
        }

    def net_config(self) -> nm.NetConfig:
        return nm.NetConfig(n_classes=self.n_classes, rep_dim=self.rep_dim,
                            rep_attach=self.rep_attach, attention=self.attention)

    def gen_config(self) -> vg.GeneratorConfig:
        return vg.GeneratorConfig(grid=self.grid, n_classes=self.n_classes,
                                  fragments=(self.fragments_min, self.fragments_max))

    def aug_config(self) -> vg.AugConfig:
        return vg.AugConfig(weak_shift=self.weak_shift, noise_sigma=self.noise_sigma,
                            jitter=(0.8, 1.2) if self.jitter else None,
                            cutout=(0.05, 0.15) if self.cutout else None, flip=self.flip)


def _coerce(f: dataclasses.Field, v):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    kind = kind.replace(" | None", "")
    if not isinstance(v, str):
        return v
    v = v.strip()
    try:
        if kind == "bool":
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if kind == "int":
            return int(v)
        if kind == "float":
            return float(v)
    except ValueError:
        raise ConfigError(f"key {f.name}: cannot parse {v!r} as {kind}") from None
    return v


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def parse_kv_text(text: str) -> dict[str, str]:
    """``key=value`` per line; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr_base``, then cosine decay to ``lr_final`` at the last step."""
    warm = cfg.warmup_epochs * cfg.steps_in_epoch
    last = cfg.total_steps - 1
    if step < warm:
        return cfg.lr_base * step / warm
    span = max(last - warm, 1)
    t = min(max((step - warm) / span, 0.0), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr_base - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


def rampup(step: int, cfg: TrainConfig) -> float:
    """Sigmoid-shaped ramp exp(-5 (1 - t)^2) over ``rampup_epochs``; 1 when disabled."""
    span = cfg.rampup_epochs * cfg.steps_in_epoch
    if span == 0 or step >= span:
        return 1.0
    return math.exp(-5.0 * (1.0 - step / span) ** 2)


def sgdw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              velocity: dict[str, np.ndarray], lr: float, momentum: float = 0.9,
              weight_decay: float = 5e-4) -> dict[str, np.ndarray]:
    """SGD with momentum and decoupled weight decay; updates ``velocity`` in place."""
    new = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if not np.all(np.isfinite(g)):
            raise al.NumericHalt(f"non-finite gradient for parameter {name!r}")
        v = momentum * velocity.get(name, np.zeros_like(theta)) + g
        velocity[name] = v
        new[name] = theta - lr * v - lr * weight_decay * theta
    return new


# ---------------------------------------------------------------------------
# data

@dataclass
class DataBundle:
    labeled: list[vg.Sample]
    unlabeled: list[vg.Sample]
    test: list[vg.Sample]
    prior: al.PriorDistribution
    fill: float


def build_data(cfg: TrainConfig) -> DataBundle:
    gen = cfg.gen_config()
    train = vg.generate_dataset(cfg.n_samples, cfg.seed, gen)
    test = vg.generate_dataset(cfg.n_test, cfg.seed, gen, start_id=cfg.n_samples)
    labeled, unlabeled = vg.split_labeled(train, cfg.label_ratio, cfg.seed)
    if not labeled:
        raise ConfigError("empty labeled pool")
    prior = al.PriorDistribution.from_labels([s.label for s in labeled], cfg.n_classes)
    fill = float(np.mean([s.intensity.mean() for s in train]))
    return DataBundle(labeled, unlabeled, test, prior, fill)


# ---------------------------------------------------------------------------
# state

@dataclass
class LossReport:
    values: dict[str, float]
    weights: dict[str, float]
    total: float
    lr: float = 0.0
    skipped: dict[str, bool] = field(default_factory=dict)

    def recompose(self) -> float:
        return sum(self.weights[k] * self.values[k] for k in self.values)


@dataclass
class TrainState:
    config: TrainConfig
    branch_s: nm.Branch
    branch_t: nm.Branch
    velocity_s: dict[str, np.ndarray] = field(default_factory=dict)
    velocity_t: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig, prior: al.PriorDistribution | None = None) -> TrainState:
    """Fresh branches; with ``prior_bias`` the output heads start at log ``prior.q``."""
    net = cfg.net_config()
    seed_s = cfg.seed * 2 + 1
    seed_t = seed_s if cfg.identical_init else seed_s + 1
    bias = None
    if cfg.prior_bias:
        prior = prior or build_data(cfg).prior
        bias = np.log(prior.q)
    return TrainState(cfg, nm.init_branch(seed_s, net, bias), nm.init_branch(seed_t, net, bias))


def save_state(stem, state: TrainState) -> None:
    arrays = {}
    for tag, br, vel in (("S", state.branch_s, state.velocity_s), ("T", state.branch_t, state.velocity_t)):
        for k, v in br.state_arrays().items():
            arrays[f"{tag}/{k}"] = v
        for k in br.params:
            if k in vel:
                arrays[f"v{tag}/{k}"] = vel[k]
    cfg = state.config.to_dict()
    meta = {"config": cfg, "epoch": state.epoch, "step": state.step, "history": state.history,
            "seeds": [state.branch_s.seed, state.branch_t.seed]}
    nm.save_arrays(stem, arrays, nm.config_hash(cfg), meta)


def load_state(stem) -> TrainState:
    arrays, manifest = nm.load_arrays(stem)
    meta = manifest["meta"]
    cfg = TrainConfig.from_mapping(meta["config"])
    # every array is overwritten below, so the prior used for the fresh heads is irrelevant
    state = init_state(cfg, al.PriorDistribution(np.full(cfg.n_classes, 1.0 / cfg.n_classes)))
    for tag, br, vel in (("S", state.branch_s, state.velocity_s), ("T", state.branch_t, state.velocity_t)):
        br.load_arrays({k: arrays[f"{tag}/{k}"] for k in br.params})
        for k in br.params:
            if f"v{tag}/{k}" in arrays:
                vel[k] = arrays[f"v{tag}/{k}"]
    state.epoch, state.step, state.history = meta["epoch"], meta["step"], meta["history"]
    return state


# ---------------------------------------------------------------------------
# one optimization step

def _indices(source: str, n_l: int, n: int) -> list[int]:
    return {"all": list(range(n)), "labeled": list(range(n_l)), "unlabeled": list(range(n_l, n))}[source]


def _select(t: dc.Tensor, idx: list[int], n: int) -> dc.Tensor:
    return t if len(idx) == n else dc.index_select(t, idx, axis=0)


def compute_losses(state: TrainState, batch: list[vg.Sample], view_seed: int, data_fill: float,
                   prior: al.PriorDistribution):
    """Forward both branches and build every loss term.

    Returns ``(total, parts, weights, skipped)``. Terms whose weight is zero are
    still evaluated for logging but kept off the tape.
    """
    cfg = state.config
    n = len(batch)
    n_l = sum(s.is_labeled for s in batch)
    if n_l == 0:
        raise ConfigError("batch has no labeled sample")
    views = [vg.make_views(s, view_seed, cfg.aug_config(), fill=data_fill) for s in batch]
    xw = np.stack([v.weak for v in views])
    xs = np.stack([v.strong for v in views])
    labels = np.stack([v.transport(s.label) for v, s in zip(views, batch)])
    y_l = al.onehot(labels[:n_l], cfg.n_classes)

    pred_s = nm.forward(state.branch_s, xw, "weak")
    pred_t = nm.forward(state.branch_t, xs, "strong")
    weights = cfg.weights(rampup(state.step, cfg))
    parts: dict[str, dc.Tensor] = {}
    skipped: dict[str, bool] = {}
    lab_idx = list(range(n_l))

    def build(name, fn):
        try:
            if weights[name] > 0:
                parts[name] = fn()
            else:
                with dc.no_grad():
                    parts[name] = fn()
        except dc.NonFiniteError as e:
            raise al.NumericHalt(f"loss component {name!r} is non-finite ({e})") from None

    def seg():
        ps, pt = _select(pred_s.full, lab_idx, n), _select(pred_t.full, lab_idx, n)
        return dc.scalar_mul(dc.add(al.seg_loss(ps, y_l), al.seg_loss(pt, y_l)), 0.5)

    build("seg", seg)
    build("pcbc", lambda: al.pcbc_loss(_select(pred_s.full, lab_idx, n),
                                       _select(pred_t.full, lab_idx, n), y_l))

    dpr_idx = _indices(cfg.dpr_source, n_l, n)
    distr_tool, pseudo_tool = al.TOOL_VARIANTS[cfg.tools]
    if dpr_idx:
        ms = [_select(p, dpr_idx, n) for p in pred_s.probs]
        mt_ = [_select(p, dpr_idx, n) for p in pred_t.probs]
        build("distr", lambda: al.distr_loss(ms, mt_, cfg.temperature, distr_tool))
        build("cps", lambda: al.deep_cps_loss(ms, mt_, pseudo_tool))
    else:
        parts["distr"] = parts["cps"] = dc.tensor(0.0)
        skipped["distr"] = skipped["cps"] = True

    im_idx = _indices(cfg.im_source, n_l, n)
    if im_idx:
        fs, ft = _select(pred_s.full, im_idx, n), _select(pred_t.full, im_idx, n)
        build("ent", lambda: al.branch_average(al.entropy_loss, fs, ft, cfg.ent_target))
        build("kl", lambda: al.branch_average(lambda p: al.kl_prior_loss(p, prior), fs, ft, "both"))
    else:
        parts["ent"] = parts["kl"] = dc.tensor(0.0)
        skipped["ent"] = skipped["kl"] = True

    rep_idx = _indices(cfg.align_source, n_l, n)
    classes = list(range(cfg.n_classes))

    def rep_terms():
        region, instance = [], []
        for i in rep_idx:
            f_s = dc.index_select(pred_s.rep, [i], axis=0)
            f_t = dc.index_select(pred_t.rep, [i], axis=0)
            if cfg.stop_grad_t:
                f_t = f_t.detach()
            lab_s = ar.argmax_labels(pred_s.full.data[i], pred_s.rep_scale)
            lab_t = ar.argmax_labels(pred_t.full.data[i], pred_t.rep_scale)
            r = ar.region_loss(ar.region_prototypes(f_s, f_t, lab_s, lab_t, classes, cfg.cross_pool))
            if not r.skipped:
                region.append(r.value)
            ins = ar.instance_loss(ar.instance_prototypes(f_s, f_t, lab_t, classes[1:],
                                                          cfg.connectivity, cfg.tau_vol))
            if not ins.skipped:
                instance.append(ins.value)
        return region, instance

    needs_grad = weights["region"] > 0 or weights["instance"] > 0
    try:
        if needs_grad:
            region, instance = rep_terms()
        else:
            with dc.no_grad():
                region, instance = rep_terms()
    except dc.NonFiniteError as e:
        raise al.NumericHalt(f"loss component 'region'/'instance' is non-finite ({e})") from None
    for name, terms in (("region", region), ("instance", instance)):
        skipped[name] = not terms
        if not terms:
            parts[name] = dc.tensor(0.0)
        elif weights[name] > 0:
            parts[name] = al._scale_mean(terms)
        else:
            with dc.no_grad():
                parts[name] = al._scale_mean(terms)

    total = al.weighted_sum({k: parts[k] for k in COMPONENTS}, weights)
    return total, parts, weights, skipped


def train_step(batch: list[vg.Sample], state: TrainState, data: DataBundle) -> LossReport:
    cfg = state.config
    lr = lr_schedule(state.step, cfg)
    total, parts, weights, skipped = compute_losses(state, batch, _view_seed(cfg, state.step),
                                                    data.fill, data.prior)
    for br in (state.branch_s, state.branch_t):
        br.zero_grad()
    if total.requires_grad:
        dc.backward(total)
    for br, vel in ((state.branch_s, state.velocity_s), (state.branch_t, state.velocity_t)):
        grads = {k: p.grad for k, p in br.params.items()}
        try:
            new = sgdw_step(br.state_arrays(), grads, vel, lr, cfg.momentum, cfg.weight_decay)
        except al.NumericHalt as e:
            raise al.NumericHalt(f"branch {br.seed}: {e}") from None
        for k, p in br.params.items():
            p.data = new[k]
            p.grad = None
    state.step += 1
    values = {k: float(parts[k].item()) for k in COMPONENTS}
    return LossReport(values, {k: weights[k] for k in COMPONENTS}, float(total.item()), lr, skipped)


def _view_seed(cfg: TrainConfig, step: int) -> int:
    return int(np.random.default_rng([cfg.seed, 104729, step]).integers(2 ** 31))


def epoch_batches(cfg: TrainConfig, data: DataBundle, epoch: int) -> list[list[vg.Sample]]:
    """Labeled samples in a per-epoch permutation, each paired with random unlabeled ones."""
    rng = np.random.default_rng([cfg.seed, 7919, epoch])
    order = rng.permutation(len(data.labeled))
    batches = []
    for i in range(cfg.steps_in_epoch):
        lab = [data.labeled[order[(i * cfg.labeled_per_batch + j) % len(order)]]
               for j in range(cfg.labeled_per_batch)]
        unl = []
        if data.unlabeled and cfg.unlabeled_per_batch:
            pick = rng.choice(len(data.unlabeled), size=cfg.unlabeled_per_batch,
                              replace=len(data.unlabeled) < cfg.unlabeled_per_batch)
            unl = [data.unlabeled[j] for j in pick]
        batches.append(lab + unl)
    return batches


# ---------------------------------------------------------------------------
# evaluation

def predict_probs(state: TrainState, samples: list[vg.Sample], mode: str = "ensemble",
                  chunk: int = 4) -> np.ndarray:
    out = []
    with dc.no_grad():
        for i in range(0, len(samples), chunk):
            x = np.stack([s.intensity for s in samples[i:i + chunk]])
            ps = nm.forward(state.branch_s, x).full.data if mode in ("ensemble", "S") else None
            pt = nm.forward(state.branch_t, x).full.data if mode in ("ensemble", "T") else None
            if mode == "ensemble":
                out.append(0.5 * (ps + pt))
            else:
                out.append(ps if mode == "S" else pt)
    return np.concatenate(out)


def evaluate_labels(pred_labels, samples: list[vg.Sample], n_classes: int) -> mt.MetricReport:
    if len(samples) == 0:
        raise ValueError("empty test set")
    return mt.aggregate(list(pred_labels), [s.label for s in samples], range(1, n_classes))


def evaluate(state: TrainState, samples: list[vg.Sample], mode: str | None = None) -> mt.MetricReport:
    """Lesion-class metrics of the argmax of the branch-averaged full-resolution output."""
    if len(samples) == 0:
        raise ValueError("empty test set")
    probs = predict_probs(state, samples, mode or state.config.eval_mode)
    return evaluate_labels(probs.argmax(axis=1), samples, state.config.n_classes)


# ---------------------------------------------------------------------------
# full run

def csv_columns(cfg: TrainConfig) -> list[str]:
    cols = ["epoch", "step", "lr", "loss_total"] + [f"loss_{k}" for k in COMPONENTS]
    for c in range(1, cfg.n_classes):
        cols += [f"val_dice_c{c}", f"val_jaccard_c{c}", f"val_hd95_c{c}", f"val_asd_c{c}"]
    return cols + ["val_dice_mean"]


def write_csv(path, cfg: TrainConfig, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=csv_columns(cfg), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt_cell(v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_manifest(path, cfg: TrainConfig, outputs: dict, started: float, ended: float | None = None) -> None:
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "version": f"barl-{__version__}",
                "config_hash": nm.config_hash(cfg.to_dict()),
                "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
                "ended": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(ended)) if ended else None,
                "outputs": outputs}
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def run_epoch(state: TrainState, data: DataBundle) -> dict:
    cfg = state.config
    sums = dict.fromkeys(["loss_total"] + [f"loss_{k}" for k in COMPONENTS], 0.0)
    batches = epoch_batches(cfg, data, state.epoch)
    lr = 0.0
    for batch in batches:
        rep = train_step(batch, state, data)
        lr = rep.lr
        sums["loss_total"] += rep.total
        for k in COMPONENTS:
            sums[f"loss_{k}"] += rep.values[k]
    state.epoch += 1
    row = {"epoch": state.epoch, "step": state.step, "lr": lr}
    row.update({k: v / len(batches) for k, v in sums.items()})
    if state.epoch == cfg.epochs or (cfg.eval_every and state.epoch % cfg.eval_every == 0):
        row.update(evaluate(state, data.test).as_row("val"))
    state.history.append(row)
    return row


def train(cfg: TrainConfig, out_dir=None, state: TrainState | None = None,
          stop_after_epoch: int | None = None, data: DataBundle | None = None, log=None) -> TrainState:
    """Run (or resume) training; with ``out_dir`` write manifest, CSV and checkpoints."""
    started = time.time()
    data = data or build_data(cfg)
    state = state or init_state(cfg, data.prior)
    out = Path(out_dir) if out_dir else None
    outputs = {}
    if out:
        out.mkdir(parents=True, exist_ok=True)
        outputs = {"metrics": str(out / "metrics.csv"), "checkpoint": str(out / "checkpoints" / "last")}
        write_manifest(out / "manifest.json", cfg, outputs, started)
    last = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    while state.epoch < last:
        row = run_epoch(state, data)
        if log:
            log(row)
        if out:
            write_csv(out / "metrics.csv", cfg, state.history)
            if cfg.ckpt_every and state.epoch % cfg.ckpt_every == 0:
                save_state(out / "checkpoints" / f"epoch_{state.epoch:03d}", state)
    if out:
        save_state(out / "checkpoints" / "last", state)
        write_manifest(out / "manifest.json", cfg, outputs, started, time.time())
    return state
