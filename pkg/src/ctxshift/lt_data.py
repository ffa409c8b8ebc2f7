"""Long-tail dataset construction: imbalance profiles, subsampling, shot
groups, the colored CMNIST-LT benchmark and the on-disk dataset cache."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .sources import ImageSet

ShotGroup = Literal["many", "medium", "few"]
GROUPS: tuple[str, ...] = ("many", "medium", "few")

# seaborn.color_palette() with default matplotlib settings
DEFAULT_PALETTE_HEX = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


@dataclass(frozen=True)
class ClassProfile:
    counts: tuple[int, ...]
    rho: float
    profile_kind: Literal["exponential", "explicit"] = "explicit"

    def __post_init__(self):
        if len(self.counts) < 1 or min(self.counts) < 1:
            raise ValueError("every class needs at least one sample")
        if self.profile_kind == "exponential" and any(
            a < b for a, b in zip(self.counts, self.counts[1:])
        ):
            raise ValueError("exponential profile counts must be non-increasing")

    @classmethod
    def from_counts(cls, counts) -> "ClassProfile":
        counts = tuple(int(c) for c in counts)
        return cls(counts, max(counts) / min(counts), "explicit")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict:
        return {"counts": list(self.counts), "rho": self.rho, "profile_kind": self.profile_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassProfile":
        return cls(tuple(d["counts"]), float(d["rho"]), d["profile_kind"])


@dataclass(frozen=True)
class ColorPalette:
    colors: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if len(self.colors) != 10 or len(set(self.colors)) != 10:
            raise ValueError("palette needs exactly 10 distinct colors")
        if any(not 0.0 <= c <= 1.0 for rgb in self.colors for c in rgb):
            raise ValueError("palette channels must lie in [0, 1]")

    @classmethod
    def default(cls) -> "ColorPalette":
        return cls(tuple(_hex_to_rgb(h) for h in DEFAULT_PALETTE_HEX))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float32)


def _hex_to_rgb(h: str) -> tuple[float, float, float]:
    h = h.lstrip("#")
    return tuple(int(h[i : i + 2], 16) / 255.0 for i in (0, 2, 4))


@dataclass
class LongTailDataset:
    images: np.ndarray
    labels: np.ndarray
    profile: ClassProfile
    shot_groups: dict[int, str]
    seed: int
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.profile.num_classes

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]


# ---------------------------------------------------------------------------
# profiles and subsampling


def build_longtail_profile(K: int, n_max: int, rho: float) -> ClassProfile:
    """Exponentially decaying class sizes ``n_max * rho**(-k/(K-1))``."""
    if K < 2:
        raise ValueError("need at least two classes")
    if rho < 1:
        raise ValueError(f"imbalance ratio must be >= 1, got {rho}")
    if n_max / rho < 1:
        raise ValueError(f"n_max/rho = {n_max / rho:.3g} < 1 would leave the tail class empty")
    counts = [int(round(n_max * rho ** (-k / (K - 1)))) for k in range(K)]
    counts = [max(c, 1) for c in counts]
    return ClassProfile(tuple(counts), float(rho), "exponential")


def subsample_dataset(source: ImageSet, profile: ClassProfile, seed: int, name: str = "") -> LongTailDataset:
    """Pick ``profile.counts[k]`` images of every class k without replacement."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k, n in enumerate(profile.counts):
        pool = np.flatnonzero(source.labels == k)
        if len(pool) < n:
            raise ValueError(f"class {k} has {len(pool)} source samples, profile needs {n}")
        chosen.append(rng.choice(pool, size=n, replace=False))
    idx = np.concatenate(chosen)
    return LongTailDataset(
        images=source.images[idx],
        labels=source.labels[idx].copy(),
        profile=profile,
        shot_groups=assign_shot_groups(profile),
        seed=seed,
        name=name,
        metadata={"source_indices": idx.tolist(), "shot_rule": shot_group_rule(profile)},
    )


# ---------------------------------------------------------------------------
# shot groups


def _threshold_groups(counts, many_threshold, few_threshold) -> dict[int, str]:
    out = {}
    for k, n in enumerate(counts):
        if n > many_threshold:
            out[k] = "many"
        elif n < few_threshold:
            out[k] = "few"
        else:
            out[k] = "medium"
    return out


def shot_group_rule(profile: ClassProfile, many_threshold: int = 100, few_threshold: int = 20) -> str:
    """``"thresholds"`` or ``"terciles"``, whichever assign_shot_groups applies.

    Terciles are used when the counts are imbalanced but the absolute
    thresholds leave the many or the few group empty (small-K datasets).
    """
    counts = profile.counts
    if min(counts) == max(counts):
        return "thresholds"
    groups = set(_threshold_groups(counts, many_threshold, few_threshold).values())
    return "thresholds" if {"many", "few"} <= groups else "terciles"


def assign_shot_groups(profile: ClassProfile, many_threshold: int = 100, few_threshold: int = 20) -> dict[int, str]:
    if not many_threshold > few_threshold >= 1:
        raise ValueError("need many_threshold > few_threshold >= 1")
    counts = profile.counts
    if shot_group_rule(profile, many_threshold, few_threshold) == "thresholds":
        return _threshold_groups(counts, many_threshold, few_threshold)
    K = len(counts)
    order = sorted(range(K), key=lambda k: (-counts[k], k))
    n_edge = K // 3
    out = {}
    for rank, k in enumerate(order):
        if rank < n_edge:
            out[k] = "many"
        elif rank >= K - n_edge:
            out[k] = "few"
        else:
            out[k] = "medium"
    return out


# ---------------------------------------------------------------------------
# CMNIST-LT


def colorize(image: np.ndarray, color) -> np.ndarray:
    """Tint a grayscale (H, W) or (H, W, 1) image: ``out[..., c] = image * color[c]``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[..., 0]
    color = np.asarray(color, dtype=np.float32)
    if np.any(color < 0) or np.any(color > 1):
        raise ValueError("color channels must lie in [0, 1]")
    return image[..., None] * color


def _colorize_batch(images: np.ndarray, colors: np.ndarray) -> np.ndarray:
    # images (N, H, W, 1), colors (N, 3)
    return images * colors[:, None, None, :]


def head_classes(profile: ClassProfile, n_head: int = 5) -> list[int]:
    order = sorted(range(profile.num_classes), key=lambda k: (-profile.counts[k], k))
    return sorted(order[:n_head])


def build_cmnist_lt(
    base: LongTailDataset,
    flip_prob: float = 0.25,
    palette: ColorPalette | None = None,
    seed: int = 0,
) -> LongTailDataset:
    """Flip labels, then color samples: random palette color for the five head
    classes, one fixed color per tail class.

    Colors follow the (possibly flipped) training label.  The resulting
    profile is the explicit post-flip label histogram; shot groups and the
    head/tail split are inherited from ``base``.
    """
    palette = palette or ColorPalette.default()
    if base.images.ndim != 4 or base.images.shape[-1] != 1:
        raise ValueError("CMNIST-LT needs grayscale (N, H, W, 1) images")
    if base.num_classes != 10:
        raise ValueError(f"CMNIST-LT needs 10 classes, got {base.num_classes}")
    if not 0.0 <= flip_prob < 1.0:
        raise ValueError("flip_prob must lie in [0, 1)")
    K = 10
    rng = np.random.default_rng(seed)
    n = len(base)

    flipped = rng.random(n) < flip_prob
    offsets = rng.integers(1, K, size=n)
    labels = np.where(flipped, (base.labels + offsets) % K, base.labels)

    heads = head_classes(base.profile)
    tails = [k for k in range(K) if k not in heads]
    tail_colors = rng.choice(K, size=len(tails), replace=False)
    color_ids = rng.integers(0, K, size=n)
    for k, c in zip(tails, tail_colors):
        color_ids[labels == k] = c

    images = _colorize_batch(base.images, palette.as_array()[color_ids])
    flip_idx = np.flatnonzero(flipped)
    metadata = {
        "base_profile": base.profile.to_dict(),
        "flip_prob": flip_prob,
        "flips": [[int(i), int(base.labels[i]), int(labels[i])] for i in flip_idx],
        "head_classes": heads,
        "tail_colors": {int(k): int(c) for k, c in zip(tails, tail_colors)},
        "palette": [list(c) for c in palette.colors],
        "color_ids": color_ids.tolist(),
        "shot_rule": base.metadata.get("shot_rule", "inherited"),
    }
    return LongTailDataset(
        images=images.astype(np.float32),
        labels=labels.astype(np.int64),
        profile=ClassProfile.from_counts(np.bincount(labels, minlength=K)),
        shot_groups=dict(base.shot_groups),
        seed=seed,
        name="cmnist-lt",
        metadata=metadata,
    )


def colorize_test_set(test: ImageSet, palette: ColorPalette | None = None, seed: int = 0) -> ImageSet:
    """Random palette color for every test image; labels untouched."""
    palette = palette or ColorPalette.default()
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 10, size=len(test))
    return ImageSet(_colorize_batch(test.images, palette.as_array()[ids]).astype(np.float32),
                    test.labels.copy(), test.name)


# ---------------------------------------------------------------------------
# named recipes and on-disk cache

RECIPES = {
    "mnist-lt": {"source": "mnist", "n_max": 5000},
    "fashion-lt": {"source": "fashion-mnist", "n_max": 5000},
    "cmnist-lt": {"source": "mnist", "n_max": 5000},
    "cifar10-lt": {"source": "cifar10", "n_max": 5000},
    "cifar100-lt": {"source": "cifar100", "n_max": 500},
}


def build_named(name: str, rho: float, seed: int, root=None) -> tuple[LongTailDataset, ImageSet]:
    """Build a named long-tail train set and its balanced test split."""
    from .sources import load_source

    if name not in RECIPES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(RECIPES)}")
    recipe = RECIPES[name]
    train = load_source(recipe["source"], "train", root)
    test = load_source(recipe["source"], "test", root)
    profile = build_longtail_profile(train.num_classes, recipe["n_max"], rho)
    ds = subsample_dataset(train, profile, seed, name=name)
    if name == "cmnist-lt":
        ds = build_cmnist_lt(ds, 0.25, ColorPalette.default(), seed)
        test = colorize_test_set(test, ColorPalette.default(), seed)
    test.name = name
    return ds, test


def _rho_dir(rho: float) -> str:
    return str(int(rho)) if float(rho).is_integer() else f"{rho:g}"


def cache_dir(root, name: str, rho: float, seed: int) -> Path:
    return Path(root) / name / _rho_dir(rho) / str(seed)


def manifest_of(ds: LongTailDataset) -> dict:
    return {
        "name": ds.name,
        "seed": ds.seed,
        "num_samples": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "profile": ds.profile.to_dict(),
        "shot_groups": {str(k): v for k, v in sorted(ds.shot_groups.items())},
        "metadata": ds.metadata,
    }


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(ds: LongTailDataset, test: ImageSet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", ds.images)
    np.save(directory / "labels.npy", ds.labels)
    np.save(directory / "test_images.npy", test.images)
    np.save(directory / "test_labels.npy", test.labels)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest_of(ds), fh, indent=1, sort_keys=True)
    return directory


def load_dataset(directory) -> tuple[LongTailDataset, ImageSet]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        man = json.load(fh)
    ds = LongTailDataset(
        images=np.load(directory / "images.npy"),
        labels=np.load(directory / "labels.npy"),
        profile=ClassProfile.from_dict(man["profile"]),
        shot_groups={int(k): v for k, v in man["shot_groups"].items()},
        seed=man["seed"],
        name=man["name"],
        metadata=man["metadata"],
    )
    test = ImageSet(np.load(directory / "test_images.npy"), np.load(directory / "test_labels.npy"), man["name"])
    return ds, test


def ensure_dataset(name: str, rho: float, seed: int, root=None) -> tuple[Path, bool]:
    """Materialize the cache entry if absent.  Returns (directory, cache_hit)."""
    from .sources import data_root

    directory = cache_dir(data_root(root), name, rho, seed)
    if (directory / "manifest.json").exists():
        return directory, True
    ds, test = build_named(name, rho, seed, root)
    save_dataset(ds, test, directory)
    return directory, False

