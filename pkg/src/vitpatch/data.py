"""Loading, splitting, grid extraction and the synthetic two-class corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
PRESET_RATIOS = {
    "default": (0.90, 0.0, 0.10),
    "with-validation": (0.81, 0.09, 0.10),
}


class DatasetError(ValueError):
    pass


@dataclass
class LabeledPatch:
    pixels: np.ndarray  # [channels, side, side], float32 in [0, 1]
    label: int
    source_id: str = ""
    path: str = ""


@dataclass
class DatasetSplit:
    train: list[LabeledPatch]
    validation: list[LabeledPatch]
    test: list[LabeledPatch]
    seed: int = 0
    ratios: tuple[float, float, float] = PRESET_RATIOS["default"]
    class_names: list[str] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def stack(patches: Sequence[LabeledPatch]) -> tuple[np.ndarray, np.ndarray]:
    """Pixels ``[N, C, H, W]`` and labels ``[N]`` as arrays."""
    images = np.stack([p.pixels for p in patches])
    labels = np.array([p.label for p in patches], dtype=np.int64)
    return images, labels


def read_image(path: Path, channels: int = 3) -> np.ndarray:
    """Decode an 8-bit image to ``[channels, H, W]`` float32 scaled to [0, 1]."""
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise DatasetError(f"unsupported channel count {channels}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float32) / np.float32(255.0)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def read_class_map(path: Path) -> dict[str, int]:
    """Parse ``name<TAB>index`` lines (blank lines and ``#`` comments skipped)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'name<TAB>index', got {line!r}")
        mapping[parts[0]] = int(parts[1])
    return mapping


def load_dataset(
    root,
    img_size: int = 100,
    channels: int = 3,
    class_map: Optional[dict[str, int]] = None,
) -> tuple[list[LabeledPatch], list[str]]:
    """Load ``root/<class>/*.{png,jpg}``.

    Classes are indexed by sorted directory name unless ``class_map`` says
    otherwise. Returns the patches in sorted-path order and the class names
    ordered by index.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")
    names = [d.name for d in class_dirs]
    if class_map is None:
        class_map = {name: i for i, name in enumerate(names)}
    missing = [n for n in names if n not in class_map]
    if missing:
        raise DatasetError(f"class map has no entry for {missing}")

    patches = []
    for d in class_dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {d} contains no images")
        for f in files:
            pixels = read_image(f, channels)
            expected = (channels, img_size, img_size)
            if pixels.shape != expected:
                raise DatasetError(f"{f}: found {pixels.shape[1]}x{pixels.shape[2]}, expected {img_size}x{img_size}")
            patches.append(LabeledPatch(pixels, class_map[d.name], source_id=d.name, path=str(f)))

    by_index = sorted(class_map.items(), key=lambda kv: kv[1])
    return patches, [name for name, _ in by_index]


def grid_positions(height: int, width: int, side: int, limit: Optional[int] = None, rng=None) -> list[tuple[int, int]]:
    """Top-left corners of the non-overlapping grid, row-major.

    When ``limit`` is below the grid capacity a seeded sample without
    replacement is taken (returned in row-major order).
    """
    if side < 1 or height < side or width < side:
        raise DatasetError(f"image {height}x{width} is smaller than patch side {side}")
    positions = [(r * side, c * side) for r in range(height // side) for c in range(width // side)]
    if limit is not None and limit < len(positions):
        if rng is None:
            raise ValueError("sampling a subset of grid positions needs a seeded generator")
        chosen = np.sort(rng.choice(len(positions), size=limit, replace=False))
        positions = [positions[i] for i in chosen]
    return positions


def extract_patches_grid(image: np.ndarray, side: int, limit: Optional[int] = None, rng=None) -> list[np.ndarray]:
    """Cut ``[C, H, W]`` (or ``[H, W]``) into at most ``limit`` grid patches."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    return [image[..., r : r + side, c : c + side].copy() for r, c in grid_positions(h, w, side, limit, rng)]


def split_dataset(
    patches: Sequence[LabeledPatch],
    ratios: Sequence[float] = PRESET_RATIOS["default"],
    seed: int = 0,
) -> DatasetSplit:
    """Stratified, seeded train/validation/test partition.

    Each class is shuffled independently; validation and test take
    ``floor(ratio * class_count)`` items each and the remainder goes to train.
    The combined splits are then shuffled once more so classes interleave.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not any(r > 0 for r in ratios):
        raise DatasetError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)

    labels = sorted({p.label for p in patches})
    parts: tuple[list, list, list] = ([], [], [])
    for label in labels:
        members = [p for p in patches if p.label == label]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        n_val = math.floor(ratios[1] * len(members) + 1e-9)
        n_test = math.floor(ratios[2] * len(members) + 1e-9)
        parts[2].extend(members[:n_test])
        parts[1].extend(members[n_test : n_test + n_val])
        parts[0].extend(members[n_test + n_val :])

    for name, part, ratio in zip(("train", "validation", "test"), parts, ratios):
        if ratio > 0 and patches and not part:
            raise DatasetError(f"{name} split rounds to zero items ({len(patches)} patches, ratio {ratio})")

    shuffled = [[part[i] for i in rng.permutation(len(part))] for part in parts]
    return DatasetSplit(*shuffled, seed=seed, ratios=ratios)


def write_split_manifest(split: DatasetSplit, path) -> None:
    """Audit file with one ``path<TAB>label<TAB>split`` line per patch."""
    lines = []
    for name, part in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        lines += [f"{p.path}\t{p.label}\t{name}" for p in part]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def generate_synthetic_dataset(n_per_class: int, side: int = 100, seed: int = 0, channels: int = 3) -> list[LabeledPatch]:
    """Two separable texture classes standing in for real slide patches.

    Class 0 is a diagonal sinusoid ``0.5 + 0.3 sin(2 pi 8 (x + y) / side)``;
    class 1 a horizontal ramp ``0.2 + 0.6 x / side``. Both get uniform
    +-0.15 pixel noise, are clipped to [0, 1], then copied to every channel
    with a per-channel offset drawn uniformly from +-0.05 and clipped again.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    bases = (
        0.5 + 0.3 * np.sin(2.0 * np.pi * 8.0 * (x + y) / side),
        0.2 + 0.6 * (x / side),
    )
    patches = []
    for label, base in enumerate(bases):
        noise = rng.uniform(-0.15, 0.15, size=(n_per_class, side, side))
        jitter = rng.uniform(-0.05, 0.05, size=(n_per_class, channels))
        gray = np.clip(base + noise, 0.0, 1.0)
        images = np.clip(gray[:, None, :, :] + jitter[:, :, None, None], 0.0, 1.0).astype(np.float32)
        for i in range(n_per_class):
            patches.append(LabeledPatch(images[i], label, source_id=f"synthetic-{label}", path=f"synthetic/{label}/{i:05d}"))
    return patches
