"""Dataset manifests, stratified splitting, and synthetic imbalanced data.

The synthetic generator stands in for a private clinical archive: each class
renders one parametric shape family (or a structureless texture for class 0)
with randomized pose and multiplicative speckle noise, written as binary PPM
files under ``<root>/<class_name>/<image_id>.ppm``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import RasterImage, bilinear_resize, encode_netpbm

__all__ = [
    "DatasetError",
    "ManifestEntry",
    "DatasetManifest",
    "SynthSpec",
    "read_manifest",
    "write_manifest",
    "infer_class_names",
    "class_counts",
    "stratified_split",
    "synth_profile",
    "synth_generate",
    "SHAPE_KINDS",
    "PROFILE_NAMES",
]

MANIFEST_HEADER = ["image_id", "path", "label"]


class DatasetError(ValueError):
    """Raised for malformed manifests or unusable synthesis specs."""


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DatasetError(f"duplicate image_id {e.image_id!r} in manifest")
            seen.add(e.image_id)
            if not 0 <= e.label < len(self.class_names):
                raise DatasetError(
                    f"label {e.label} of {e.image_id!r} outside 0..{len(self.class_names) - 1}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


def read_manifest(path: str | Path, class_names=None) -> DatasetManifest:
    """Read a ``image_id,path,label`` CSV; relative paths resolve against it."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DatasetError(
            f"manifest {path} must start with header {','.join(MANIFEST_HEADER)!r}"
        )
    entries = []
    max_label = -1
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DatasetError(f"manifest {path} line {lineno}: expected 3 fields")
        image_id, rel, label_text = row
        try:
            label = int(label_text)
        except ValueError as exc:
            raise DatasetError(
                f"manifest {path} line {lineno}: bad label {label_text!r}"
            ) from exc
        p = Path(rel)
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(image_id, str(p), label))
        max_label = max(max_label, label)
    if class_names is None:
        class_names = tuple(f"class_{k}" for k in range(max_label + 1))
    return DatasetManifest(tuple(entries), tuple(class_names))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest CSV, storing paths relative to it when possible."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            p = Path(e.path)
            try:
                rel = p.relative_to(path.parent)
            except ValueError:
                rel = p
            writer.writerow([e.image_id, str(rel), e.label])


def infer_class_names(manifest: DatasetManifest) -> tuple[str, ...]:
    """Recover class names from parent directory names when consistent.

    Falls back to the manifest's stored names whenever labels map to zero or
    multiple directory names.
    """
    by_label: dict[int, set[str]] = {}
    for e in manifest.entries:
        by_label.setdefault(e.label, set()).add(Path(e.path).parent.name)
    names = list(manifest.class_names)
    for label, dirs in by_label.items():
        if len(dirs) == 1:
            names[label] = next(iter(dirs))
    if len(set(names)) != len(names):
        return manifest.class_names
    return tuple(names)


def class_counts(manifest: DatasetManifest) -> np.ndarray:
    """Per-class item counts n_j; sums to the manifest size."""
    counts = np.zeros(len(manifest.class_names), dtype=np.int64)
    for e in manifest.entries:
        counts[e.label] += 1
    return counts


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` by ``weights``, every share >= 1."""
    weights = np.asarray(weights, dtype=np.float64)
    if total < len(weights):
        raise DatasetError(f"total {total} is below one item per class")
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(np.int64)
    remainder = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    while counts.min() < 1:
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def stratified_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Split per class in proportion to ``ratios`` (train, val, test).

    Within each class the split counts deviate from the exact proportion by
    at most one item.  Classes with fewer items than splits go entirely to
    train, with a warning.  Assignment is a pure function of ``seed``.
    """
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios):
        raise DatasetError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must sum to 1, got {sum(ratios)}")

    per_split: list[list[ManifestEntry]] = [[], [], []]
    n_classes = len(manifest.class_names)
    for k in range(n_classes):
        members = [e for e in manifest.entries if e.label == k]
        if not members:
            continue
        if len(members) < 3:
            warnings.warn(
                f"class {manifest.class_names[k]!r} has {len(members)} item(s), "
                "fewer than splits; assigning all to train"
            )
            per_split[0].extend(members)
            continue
        rng = np.random.default_rng([seed, 104729, k])
        order = rng.permutation(len(members))
        n = len(members)
        cum = np.cumsum(ratios)
        bounds = [0] + [int(np.floor(n * c + 1e-9)) for c in cum]
        bounds[-1] = n
        for s in range(3):
            for idx in sorted(order[bounds[s] : bounds[s + 1]]):
                per_split[s].append(members[idx])

    def build(entries: list[ManifestEntry]) -> DatasetManifest:
        order = {e.image_id: i for i, e in enumerate(manifest.entries)}
        entries = sorted(entries, key=lambda e: order[e.image_id])
        return DatasetManifest(tuple(entries), manifest.class_names)

    return build(per_split[0]), build(per_split[1]), build(per_split[2])


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

SHAPE_KINDS = (
    "other",
    "ellipse",
    "rectangle",
    "cross",
    "ring",
    "bar",
    "two_blob",
    "arc",
    "speckle_disc",
)

# 16-class clinical-style imbalance profile (majority:minority about 13:1).
CLINIC16_NAMES = (
    "Other",
    "Head (PPP, quadrigeminal plate)",
    "Four-chamber heart section",
    "Section through three vessels",
    "Kidneys",
    "Stomach",
    "Head (sagittal)",
    "Head (cerebellum)",
    "Umbilical cord (placenta)",
    "Spine",
    "Femur",
    "Nasolabial triangle",
    "Humerus",
    "Umbilical cord (anterior abdominal wall)",
    "Cervix",
    "Bladder (CDC)",
)
CLINIC16_COUNTS = (1798, 534, 181, 272, 294, 272, 276, 260, 249, 192, 208, 170, 173, 149, 143, 138)

DEMO6_NAMES = ("other", "oval", "box", "cross", "bar", "ring")
DEMO6_WEIGHTS = (13, 6, 4, 3, 2, 1)

PROFILE_NAMES = ("clinic16", "demo6")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic imbalanced dataset."""

    class_names: tuple[str, ...]
    class_counts: tuple[int, ...]
    shape_kinds: tuple[str, ...]
    image_size: tuple[int, int] = (64, 64)
    speckle: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not (len(self.class_names) == len(self.class_counts) == len(self.shape_kinds)):
            raise DatasetError("class_names, class_counts, shape_kinds must align")
        if any(n < 1 for n in self.class_counts):
            raise DatasetError("every class count must be >= 1")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise DatasetError(f"unknown shape kinds {sorted(unknown)}")
        if self.image_size[0] < 8 or self.image_size[1] < 8:
            raise DatasetError("image_size must be at least 8x8")
        if not 0.0 <= self.speckle < 1.0:
            raise DatasetError("speckle amplitude must lie in [0, 1)")


def synth_profile(
    name: str,
    total: int | None = None,
    seed: int = 0,
    image_size: tuple[int, int] = (64, 64),
    speckle: float = 0.15,
) -> SynthSpec:
    """Named imbalance profiles: ``clinic16`` (16-way) or ``demo6`` (6-way)."""
    if name == "clinic16":
        names = CLINIC16_NAMES
        weights = np.array(CLINIC16_COUNTS, dtype=np.float64)
        if total is None:
            total = int(sum(CLINIC16_COUNTS))
        kinds = tuple(SHAPE_KINDS[k % len(SHAPE_KINDS)] for k in range(len(names)))
    elif name == "demo6":
        names = DEMO6_NAMES
        weights = np.array(DEMO6_WEIGHTS, dtype=np.float64)
        if total is None:
            total = 1600
        kinds = ("other", "ellipse", "rectangle", "cross", "bar", "ring")
    else:
        raise DatasetError(f"unknown profile {name!r}; known: {PROFILE_NAMES}")
    counts = tuple(int(c) for c in _apportion(int(total), weights))
    return SynthSpec(names, counts, kinds, image_size=image_size, speckle=speckle, seed=seed)


def _pose(rng: np.random.Generator, h: int, w: int):
    """Rotated, shifted unit coordinates plus foreground/background levels."""
    yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij"
    )
    cy, cx = rng.uniform(-0.22, 0.22, size=2)
    theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (xx - cx) + st * (yy - cy)
    v = -st * (xx - cx) + ct * (yy - cy)
    size = rng.uniform(0.45, 0.75)
    fg = rng.uniform(0.62, 0.95)
    bg = rng.uniform(0.06, 0.22)
    return u, v, size, fg, bg


def _shape_mask(kind: str, u, v, size, rng: np.random.Generator) -> np.ndarray:
    if kind == "ellipse":
        e = rng.uniform(0.5, 0.75)
        return (u / size) ** 2 + (v / (size * e)) ** 2 <= 1.0
    if kind == "ring":
        e = rng.uniform(0.8, 1.0)
        r2 = (u / size) ** 2 + (v / (size * e)) ** 2
        inner = rng.uniform(0.45, 0.6)
        return (r2 <= 1.0) & (r2 >= inner**2)
    if kind == "rectangle":
        e = rng.uniform(0.5, 0.8)
        return (np.abs(u) <= size) & (np.abs(v) <= size * e)
    if kind == "bar":
        return (np.abs(u) <= size) & (np.abs(v) <= size * rng.uniform(0.1, 0.18))
    if kind == "cross":
        t = size * rng.uniform(0.16, 0.26)
        return ((np.abs(u) <= size) & (np.abs(v) <= t)) | (
            (np.abs(v) <= size) & (np.abs(u) <= t)
        )
    if kind == "two_blob":
        r = size * rng.uniform(0.34, 0.45)
        d = size * rng.uniform(0.5, 0.62)
        return ((u - d) ** 2 + v**2 <= r**2) | ((u + d) ** 2 + v**2 <= r**2)
    if kind == "arc":
        r2 = (u / size) ** 2 + (v / size) ** 2
        inner = rng.uniform(0.6, 0.75)
        span = rng.uniform(1.6, 2.3)
        return (r2 <= 1.0) & (r2 >= inner**2) & (np.abs(np.arctan2(v, u)) <= span)
    if kind == "speckle_disc":
        r2 = (u / size) ** 2 + (v / size) ** 2
        return r2 <= 1.0
    raise DatasetError(f"unknown shape kind {kind!r}")


def _render(kind: str, rng: np.random.Generator, h: int, w: int, speckle: float) -> RasterImage:
    if kind == "other":
        # Structureless texture: a smoothed low-frequency random field.
        coarse = rng.uniform(0.05, 0.6, size=(6, 6, 1))
        img = bilinear_resize(coarse, h, w)[:, :, 0]
    else:
        u, v, size, fg, bg = _pose(rng, h, w)
        mask = _shape_mask(kind, u, v, size, rng)
        img = np.where(mask, fg, bg)
        if kind == "speckle_disc":
            # Heavy internal texture is the identifying feature.
            img = np.where(mask, img * (1.0 + 0.6 * rng.uniform(-1, 1, size=img.shape)), img)
    noise = rng.uniform(-1.0, 1.0, size=img.shape)
    img = np.clip(img * (1.0 + speckle * noise), 0.0, 1.0)
    return RasterImage(np.repeat(img[:, :, None], 3, axis=2))


def _slug(name: str) -> str:
    out = [(c.lower() if c.isalnum() else "_") for c in name]
    slug = "".join(out).strip("_")
    while "__" in slug:
        slug = slug.replace("__", "_")
    return slug or "class"


def synth_generate(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Render the dataset under ``out_dir`` and return its manifest.

    Identical specs produce byte-identical image files.  Also writes
    ``manifest.csv`` beside the class directories.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"output directory {out_dir} is not writable: {exc}") from exc

    h, w = spec.image_size
    entries = []
    for k, (name, count, kind) in enumerate(
        zip(spec.class_names, spec.class_counts, spec.shape_kinds)
    ):
        class_dir = out_dir / name
        class_dir.mkdir(parents=True, exist_ok=True)
        slug = _slug(name)
        for idx in range(count):
            image_id = f"{slug}_{idx:05d}"
            rng = np.random.default_rng([spec.seed, 700001, k, idx])
            img = _render(kind, rng, h, w, spec.speckle)
            path = class_dir / f"{image_id}.ppm"
            path.write_bytes(encode_netpbm(img))
            entries.append(ManifestEntry(image_id, str(path), k))
    manifest = DatasetManifest(tuple(entries), spec.class_names)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
