"""Synthetic volumes with fragmented lesions, labeled/unlabeled splits and
weak/strong augmentation views.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Sample:
    id: int
    intensity: np.ndarray  # [1, D, H, W] in [0, 1]
    label: np.ndarray  # [D, H, W] ints in 0..C-1
    is_labeled: bool = False
    n_classes: int = 3


@dataclass(frozen=True)
class ViewPair:
    weak: np.ndarray
    strong: np.ndarray
    flips: tuple[bool, bool, bool]

    def transport(self, volume: np.ndarray) -> np.ndarray:
        """Bring a volume from the original frame into the views' frame."""
        return apply_flips(volume, self.flips)


@dataclass(frozen=True)
class GeneratorConfig:
    grid: int = 16
    n_classes: int = 3
    fragments: tuple[int, int] = (2, 3)
    radius: tuple[float, float] = (1.5, 3.0)
    background_level: float = 0.35
    lesion_levels: tuple[float, ...] | None = None
    level_jitter: float = 0.12  # per-volume shift of every class level
    contrast_jitter: float = 0.35  # per-volume relative scaling of lesion contrast
    texture_sigma: float = 0.10  # smoothed texture amplitude
    noise_sigma: float = 0.06  # white noise amplitude
    max_retries: int = 500

    def levels(self) -> np.ndarray:
        if self.lesion_levels is not None:
            if len(self.lesion_levels) != self.n_classes - 1:
                raise ValueError("lesion_levels needs one entry per lesion class")
            return np.array(self.lesion_levels, dtype=float)
        return np.linspace(self.background_level + 0.2, 0.9, self.n_classes - 1)


@dataclass(frozen=True)
class AugConfig:
    weak_shift: float = 0.05
    noise_sigma: float = 0.1
    jitter: tuple[float, float] | None = (0.8, 1.2)
    cutout: tuple[float, float] | None = (0.05, 0.15)
    flip: bool = True


def _ellipsoid(grid: int, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[:grid, :grid, :grid]
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r <= 1.0


def generate_sample(sample_id: int, seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> Sample:
    if cfg.grid < 8:
        raise ValueError(f"grid must be >= 8, got {cfg.grid}")
    if cfg.n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {cfg.n_classes}")
    lo, hi = cfg.fragments
    if lo < 1 or hi < lo:
        raise ValueError(f"fragment range must satisfy 1 <= lo <= hi, got {cfg.fragments}")

    rng = np.random.default_rng([seed, sample_id])
    g = cfg.grid
    label = np.zeros((g, g, g), dtype=np.int64)
    # voxels claimed by a blob or touching one (26-neighborhood) block new blobs
    blocked = np.zeros((g, g, g), dtype=bool)
    dilate = ndimage.generate_binary_structure(3, 3)
    for c in range(1, cfg.n_classes):
        k = int(rng.integers(lo, hi + 1))
        for _ in range(k):
            for _attempt in range(cfg.max_retries):
                radii = rng.uniform(*cfg.radius, size=3)
                margin = np.ceil(radii).astype(int)
                center = [rng.uniform(m, g - 1 - m) for m in margin]
                blob = _ellipsoid(g, center, radii)
                if blob.sum() >= 1 and not (blob & blocked).any():
                    break
            else:
                raise GenerationError(
                    f"sample {sample_id}: could not place a class-{c} blob without overlap "
                    f"after {cfg.max_retries} attempts")
            label[blob] = c
            blocked |= ndimage.binary_dilation(blob, structure=dilate)

    shift = rng.uniform(-cfg.level_jitter, cfg.level_jitter)
    gain = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
    bg = cfg.background_level + shift
    levels = np.concatenate([[bg], bg + gain * (cfg.levels() - cfg.background_level)])
    base = levels[label]
    texture = ndimage.gaussian_filter(rng.standard_normal((g, g, g)), sigma=1.0)
    texture *= cfg.texture_sigma / max(texture.std(), 1e-12)
    noise = rng.standard_normal((g, g, g)) * cfg.noise_sigma
    intensity = np.clip(base + texture + noise, 0.0, 1.0)[None]
    return Sample(sample_id, intensity, label, False, cfg.n_classes)


def generate_dataset(count: int, seed: int, cfg: GeneratorConfig = GeneratorConfig(),
                     start_id: int = 0) -> list[Sample]:
    return [generate_sample(start_id + i, seed, cfg) for i in range(count)]


def split_labeled(samples: list[Sample], ratio: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Flag ``floor(ratio * N)`` samples as labeled after a seeded shuffle."""
    if not 0 < ratio < 1:
        raise ValueError(f"label ratio must be in (0, 1), got {ratio}")
    n_l = int(np.floor(ratio * len(samples) + 1e-9))
    if n_l == 0:
        raise ValueError(f"ratio {ratio} of {len(samples)} samples leaves no labeled sample")
    perm = np.random.default_rng(seed).permutation(len(samples))
    chosen = set(perm[:n_l].tolist())
    labeled = [replace(s, is_labeled=True) for i, s in enumerate(samples) if i in chosen]
    unlabeled = [replace(s, is_labeled=False) for i, s in enumerate(samples) if i not in chosen]
    return labeled, unlabeled


def class_frequencies(samples: list[Sample], n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes)
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=n_classes)[:n_classes]
    return counts / counts.sum()


def apply_flips(volume: np.ndarray, flips) -> np.ndarray:
    """Flip the last three axes where ``flips`` is true. An involution."""
    axes = tuple(volume.ndim - 3 + i for i, f in enumerate(flips) if f)
    return np.flip(volume, axis=axes).copy() if axes else volume.copy()


def make_views(sample: Sample, seed: int, aug: AugConfig = AugConfig(), fill: float | None = None) -> ViewPair:
    """Weak and strong views sharing one spatial transform.

    The strong view perturbs the weak one, so with every strong perturbation
    disabled the two coincide.
    """
    rng = np.random.default_rng([seed, sample.id, 7])
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3)) if aug.flip else (False, False, False)
    base = apply_flips(sample.intensity, flips)
    weak = np.clip(base + rng.uniform(-aug.weak_shift, aug.weak_shift), 0.0, 1.0)

    strong = weak.copy()
    if aug.jitter is not None:
        strong = strong * rng.uniform(*aug.jitter)
    if aug.noise_sigma > 0:
        strong = strong + rng.standard_normal(strong.shape) * aug.noise_sigma
    strong = np.clip(strong, 0.0, 1.0)
    if aug.cutout is not None:
        spatial = strong.shape[-3:]
        frac = rng.uniform(*aug.cutout)
        # near-cubic box with the drawn volume fraction
        edge = np.clip(np.round(np.array(spatial) * frac ** (1 / 3)).astype(int), 1, spatial)
        start = [int(rng.integers(0, n - e + 1)) for n, e in zip(spatial, edge)]
        box = (...,) + tuple(slice(s, s + e) for s, e in zip(start, edge))
        strong[box] = float(sample.intensity.mean()) if fill is None else fill
    return ViewPair(weak, strong, flips)


# ---------------------------------------------------------------------------
# raw binary sample format: one JSON header line, then little-endian payload
# (intensity float64, then label int64)

def write_sample(path, sample: Sample) -> None:
    header = {"id": sample.id, "shape": list(sample.intensity.shape), "dtype": "float64",
              "label_dtype": "int64", "n_classes": sample.n_classes, "is_labeled": sample.is_labeled}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(sample.intensity, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sample.label, dtype="<i8").tobytes())


def read_sample(path) -> Sample:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    body = raw[nl + 1:]
    intensity = np.frombuffer(body[:8 * n], dtype="<f8").reshape(shape).astype(np.float64)
    label = np.frombuffer(body[8 * n:16 * n], dtype="<i8").reshape(shape[1:]).astype(np.int64)
    return Sample(header["id"], intensity, label, header["is_labeled"], header["n_classes"])


def write_dataset(out_dir, samples: list[Sample], meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for s in samples:
        name = f"sample_{s.id:04d}.bin"
        write_sample(out / name, s)
        files.append(name)
    index = out / "index.json"
    index.write_text(json.dumps({"files": files, "meta": meta or {}}, indent=1, sort_keys=True))
    return index


def read_dataset(path) -> list[Sample]:
    path = Path(path)
    index = path / "index.json" if path.is_dir() else path
    files = json.loads(index.read_text())["files"]
    return [read_sample(index.parent / f) for f in files]
