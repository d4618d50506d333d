"""Synthetic fine-grained benchmark and real/synthetic training mixtures.

Classes come in pairs sharing a coarse shape (disc, bar, cross, ring); the
fine label is carried only by a 2-pixel mark whose position is
class-specific and whose contrast is deliberately kept below the Canny
thresholds.  Coarse structure is therefore visible to contour guidance
while the class bit is not, and a classifier must read the mark.

Images are 16x16 uint8, rendered with a random integer translation,
multiplicative intensity jitter, and additive Gaussian noise.  Everything
is deterministic under the generator seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from higfa.imageio import read_pgm, write_pgm

__all__ = [
    "GeneratorSpec",
    "SyntheticDataset",
    "MixEntry",
    "MixedTrainSet",
    "BenchmarkError",
    "generate_benchmark",
    "micro_mark_rule",
    "mix",
    "dataset_split_entries",
    "save_dataset",
    "load_dataset",
    "COARSE_SHAPES",
]

COARSE_SHAPES = ("disc", "ring", "cross", "bar")

_BG = 32.0
_SHAPE = 150.0
_MARK_DELTAS = (90.0, 45.0)
# per coarse shape: the 2-pixel mark position (dy, dx from center).  The
# fine class is the mark's intensity: fine 0 sits _MARK_DELTAS[0] above the
# shape level, fine 1 _MARK_DELTAS[1].  Isolated 2-px bumps of this size
# stay far below the edge detector's thresholds, and marks sit at least one
# pixel inside the shape so they cannot perturb its boundary response.
_MARKS = {
    "disc": ((1, -1), (1, 0)),
    "bar": ((0, -1), (0, 0)),
    "cross": ((-3, 0), (-2, 0)),
    "ring": ((-1, -3), (0, -3)),
}


class BenchmarkError(ValueError):
    """Invalid benchmark parameters or mixture request."""


@dataclass(frozen=True)
class GeneratorSpec:
    classes: int = 4
    per_class: int = 64
    noise: float = 5.0
    seed: int = 0
    jitter: float = 0.03
    translate: int = 2
    image_size: int = 16


@dataclass
class SyntheticDataset:
    images: np.ndarray          # (n, size, size) uint8
    labels: np.ndarray          # (n,) int
    coarse_ids: np.ndarray      # (n,) int
    splits: dict[str, np.ndarray]
    spec: GeneratorSpec

    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class MixEntry:
    image: np.ndarray
    label: int
    origin: str                 # "real" | "synthetic"
    sample_id: str | None = None


@dataclass
class MixedTrainSet:
    entries: list[MixEntry]
    ratio: float

    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.entries])

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries])


def _coarse_mask(shape: str, size: int, cy: int, cx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    d2 = dy * dy + dx * dx
    if shape == "disc":
        return d2 <= 16
    if shape == "bar":
        return (np.abs(dy) <= 2) & (np.abs(dx) <= 4)
    if shape == "cross":
        return ((np.abs(dy) <= 2) & (np.abs(dx) <= 4)) | ((np.abs(dx) <= 2) & (np.abs(dy) <= 4))
    if shape == "ring":
        return (d2 >= 4) & (d2 <= 20)
    raise BenchmarkError(f"unknown coarse shape {shape!r}")


def _render_clean(class_id: int, size: int, cy: int, cx: int,
                  shape_level: float = _SHAPE) -> np.ndarray:
    shape = COARSE_SHAPES[(class_id // 2) % len(COARSE_SHAPES)]
    delta = _MARK_DELTAS[class_id % 2]
    img = np.full((size, size), _BG)
    img[_coarse_mask(shape, size, cy, cx)] = shape_level
    for oy, ox in _MARKS[shape]:
        img[cy + oy, cx + ox] = shape_level + delta
    return img


def generate_benchmark(classes: int = 4, per_class: int = 64, noise: float = 5.0,
                       seed: int = 0, *, jitter: float = 0.03, translate: int = 2,
                       image_size: int = 16) -> SyntheticDataset:
    """Render the benchmark; class = coarse shape pair x micro-mark position."""
    if classes < 2 or classes % 2 != 0:
        raise BenchmarkError(f"classes must be even and >= 2, got {classes}")
    if classes > 2 * len(COARSE_SHAPES):
        raise BenchmarkError(f"at most {2 * len(COARSE_SHAPES)} classes supported")
    if per_class < 8:
        raise BenchmarkError(f"per_class must be >= 8, got {per_class}")
    spec = GeneratorSpec(classes=classes, per_class=per_class, noise=noise,
                         seed=seed, jitter=jitter, translate=translate,
                         image_size=image_size)
    rng = np.random.default_rng(seed)
    center = image_size // 2

    images = np.empty((classes * per_class, image_size, image_size), dtype=np.uint8)
    labels = np.empty(classes * per_class, dtype=np.int64)
    coarse = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for class_id in range(classes):
        for _ in range(per_class):
            dy, dx = rng.integers(-translate, translate + 1, size=2)
            level = _SHAPE * (1.0 + (rng.uniform(-jitter, jitter) if jitter > 0 else 0.0))
            img = _render_clean(class_id, image_size, center + dy, center + dx, level)
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
            labels[i] = class_id
            coarse[i] = class_id // 2
            i += 1

    splits = {"train": [], "val": [], "test": []}
    n_train = (per_class * 5) // 8
    n_val = per_class // 8
    for class_id in range(classes):
        base = class_id * per_class
        order = base + rng.permutation(per_class)
        splits["train"].extend(order[:n_train])
        splits["val"].extend(order[n_train:n_train + n_val])
        splits["test"].extend(order[n_train + n_val:])
    split_arrays = {k: np.array(sorted(v), dtype=np.int64) for k, v in splits.items()}
    return SyntheticDataset(images=images, labels=labels, coarse_ids=coarse,
                            splits=split_arrays, spec=spec)


def micro_mark_rule(dataset: SyntheticDataset, image: np.ndarray) -> int | None:
    """Pixel-rule oracle: match the image against every clean template.

    Classifies a noiseless, jitter-free rendering with certainty by locating
    the micro-mark; returns None when no template matches exactly.
    """
    spec = dataset.spec
    center = spec.image_size // 2
    img = np.asarray(image, dtype=np.uint8)
    for class_id in range(spec.classes):
        for dy in range(-spec.translate, spec.translate + 1):
            for dx in range(-spec.translate, spec.translate + 1):
                tpl = _render_clean(class_id, spec.image_size, center + dy, center + dx)
                if np.array_equal(img, np.clip(np.round(tpl), 0, 255).astype(np.uint8)):
                    return class_id
    return None


def dataset_split_entries(dataset: SyntheticDataset, split: str) -> list[tuple[np.ndarray, int]]:
    idx = dataset.splits[split]
    return [(dataset.images[i], int(dataset.labels[i])) for i in idx]


def mix(real, synthetic, ratio: float, seed: int = 0) -> MixedTrainSet:
    """Combine real and synthetic entries at a synthetic fraction of ``ratio``.

    Entries are (image, label) or (image, label, sample_id) tuples.  All real
    entries are kept; the synthetic count is chosen so the synthetic fraction
    matches ``ratio`` to within one element.  ratio=0 returns the real split
    unchanged; ratio=1 uses the whole synthetic pool and no real entries.
    """
    if not (0.0 <= ratio <= 1.0):
        raise BenchmarkError(f"ratio must be in [0, 1], got {ratio}")
    real = list(real)
    synthetic = list(synthetic)

    def entry(tup, origin):
        img, label = tup[0], tup[1]
        sid = tup[2] if len(tup) > 2 else None
        return MixEntry(image=np.asarray(img, dtype=np.uint8), label=int(label),
                        origin=origin, sample_id=sid)

    if ratio == 0.0:
        return MixedTrainSet(entries=[entry(t, "real") for t in real], ratio=0.0)

    rng = np.random.default_rng(seed)
    if ratio == 1.0:
        if not synthetic:
            raise BenchmarkError("ratio 1.0 requires a non-empty synthetic pool")
        chosen = [entry(t, "synthetic") for t in synthetic]
        entries = [chosen[i] for i in rng.permutation(len(chosen))]
        return MixedTrainSet(entries=entries, ratio=1.0)

    n_real = len(real)
    need = int(round(ratio * n_real / (1.0 - ratio)))
    if len(synthetic) < need:
        raise BenchmarkError(
            f"insufficient synthetic pool: need {need} for ratio {ratio} "
            f"with {n_real} real entries, have {len(synthetic)}"
        )
    take = rng.choice(len(synthetic), size=need, replace=False)
    entries = [entry(t, "real") for t in real]
    entries += [entry(synthetic[i], "synthetic") for i in take]
    entries = [entries[i] for i in rng.permutation(len(entries))]
    return MixedTrainSet(entries=entries, ratio=ratio)


def save_dataset(out_dir, dataset: SyntheticDataset) -> None:
    """Write {split}/{class}/{index}.pgm plus manifest.json."""
    out = Path(out_dir)
    labels = dataset.labels
    for split, idx in dataset.splits.items():
        for i in idx:
            d = out / split / str(int(labels[i]))
            d.mkdir(parents=True, exist_ok=True)
            write_pgm(d / f"{int(i)}.pgm", dataset.images[i])
    manifest = {
        "spec": asdict(dataset.spec),
        "labels": dataset.labels.tolist(),
        "coarse_ids": dataset.coarse_ids.tolist(),
        "splits": {k: v.tolist() for k, v in dataset.splits.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(in_dir) -> SyntheticDataset:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = GeneratorSpec(**manifest["spec"])
    labels = np.array(manifest["labels"], dtype=np.int64)
    splits = {k: np.array(v, dtype=np.int64) for k, v in manifest["splits"].items()}
    images = np.zeros((len(labels), spec.image_size, spec.image_size), dtype=np.uint8)
    for split, idx in splits.items():
        for i in idx:
            images[i] = read_pgm(root / split / str(int(labels[i])) / f"{int(i)}.pgm")
    return SyntheticDataset(images=images, labels=labels,
                            coarse_ids=np.array(manifest["coarse_ids"], dtype=np.int64),
                            splits=splits, spec=spec)
