"""Datasets: manifests with train/test splits, bilinear resampling of raw
samples, and a seeded synthetic generator producing irregular blobs whose
size ratios are driven to sampled targets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .netpbm import image_bytes, read_image, read_mask
from .tensor import interp_matrix

__all__ = [
    "Sample",
    "ManifestEntry",
    "DatasetManifest",
    "SyntheticSpec",
    "split_assignments",
    "bilinear_resize",
    "resize_batch",
    "resize_sample",
    "generate_synthetic",
    "load_split",
]


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0,1]
    mask: np.ndarray   # (1, H, W) float32 binary

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"sample {self.id}: image/mask extents differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError(f"sample {self.id}: mask is not binary")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    split: str
    size_ratio: float


class DatasetManifest:
    """Ordered image/mask pairs with split tags, stored as a TSV file whose
    paths are relative to the manifest's directory."""

    def __init__(self, entries: list[ManifestEntry], root: str = "."):
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        self.entries = list(entries)
        self.root = root

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def save(self, path) -> None:
        lines = [f"{e.id}\t{e.image_path}\t{e.mask_path}\t{e.split}\t{e.size_ratio!r}\n"
                 for e in self.entries]
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.writelines(lines)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        root = os.path.dirname(os.path.abspath(path))
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
                sid, img, msk, split, ratio = parts
                if split not in ("train", "test"):
                    raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
                for rel in (img, msk):
                    if not os.path.exists(os.path.join(root, rel)):
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {rel}")
                entries.append(ManifestEntry(sid, img, msk, split, float(ratio)))
        return cls(entries, root)


def split_assignments(n: int, train_fraction: float, seed: int) -> list[str]:
    """Seeded shuffle assigning floor(fraction*n) samples to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    tags = ["test"] * n
    for i in order[:n_train]:
        tags[int(i)] = "train"
    return tags


# ---------------------------------------------------------------------------
# resampling


def bilinear_resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-convention bilinear resample (either direction) over the
    trailing two axes."""
    h, w = arr.shape[-2], arr.shape[-1]
    th, tw = size
    if (h, w) == (th, tw):
        return arr.astype(np.float32, copy=True)
    mh = interp_matrix(h, th)
    mw = interp_matrix(w, tw)
    out = np.matmul(np.matmul(mh, arr.astype(np.float64)), mw.T)
    return out.astype(np.float32)


def resize_batch(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return bilinear_resize(arr, size)


def resize_sample(sample: Sample, size: tuple[int, int]) -> Sample:
    """Bilinear image resize; the mask is resampled then re-binarized at 0.5."""
    th, tw = size
    if th % 16 or tw % 16:
        raise ValueError(f"target extent {size} must be divisible by 16")
    image = bilinear_resize(sample.image, size)
    mask = (bilinear_resize(sample.mask, size) >= 0.5).astype(np.float32)
    return Sample(sample.id, image, mask)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 375
    extent: tuple[int, int] = (64, 64)
    ratio_range: tuple[float, float] = (0.005, 0.05)
    blobs_per_image: tuple[int, int] = (1, 3)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.ratio_range
        h, w = self.extent
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"invalid ratio_range {self.ratio_range}")
        if lo * h * w < 1.0:
            raise ValueError(f"ratio {lo} unreachable at extent {self.extent} (< 1 pixel)")
        bl, bh = self.blobs_per_image
        if not 1 <= bl <= bh:
            raise ValueError(f"invalid blobs_per_image {self.blobs_per_image}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _blob_distance_field(rng: np.random.Generator, extent: tuple[int, int],
                         n_blobs: int) -> np.ndarray:
    """Min over blobs of distance normalized by an irregular polar contour;
    thresholding this field at s gives the blob union at radius scale s."""
    h, w = extent
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.full((h, w), np.inf)
    for _ in range(n_blobs):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        base_r = rng.uniform(0.06, 0.22) * min(h, w)
        amps = rng.uniform(0.0, 0.45, size=4) / np.arange(1, 5)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
        theta = np.arctan2(yy - cy, xx - cx)
        rho = 1.0 + sum(a * np.cos((k + 1) * theta + p)
                        for k, (a, p) in enumerate(zip(amps, phases)))
        rho = np.maximum(rho, 0.3)
        dist = np.hypot(yy - cy, xx - cx)
        field = np.minimum(field, dist / (base_r * rho))
    return field


def _mask_for_ratio(field: np.ndarray, target: float) -> np.ndarray:
    """Threshold the distance field so the union covers round(target*N)
    pixels exactly (one pixel floor)."""
    n = field.size
    want = max(1, int(round(target * n)))
    thresh = np.partition(field.ravel(), want - 1)[want - 1]
    return (field <= thresh).astype(np.float32)


def _smooth_field(rng: np.random.Generator, extent: tuple[int, int],
                  coarse: int, amp: float) -> np.ndarray:
    grid = rng.normal(0.0, amp, size=(coarse, coarse))
    return bilinear_resize(grid, extent).astype(np.float64)


def _render_sample(rng: np.random.Generator, spec: SyntheticSpec) -> Sample:
    h, w = spec.extent
    n_blobs = int(rng.integers(spec.blobs_per_image[0], spec.blobs_per_image[1] + 1))
    target = rng.uniform(*spec.ratio_range)
    field = _blob_distance_field(rng, spec.extent, n_blobs)
    mask = _mask_for_ratio(field, target)[None]

    base = rng.uniform(0.18, 0.30)
    texture = _smooth_field(rng, spec.extent, 8, 2.0 * spec.noise)
    # low-contrast distractor bumps: plausible-looking but not foreground
    decoys = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        r = rng.uniform(0.05, 0.2) * min(h, w)
        amp = rng.uniform(0.03, 0.10) * rng.choice([-1.0, 1.0])
        decoys += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    lift = rng.uniform(0.45, 0.60) * (1.0 + 0.1 * _smooth_field(rng, spec.extent, 8, 1.0))
    gray = base + texture + decoys + lift * mask[0]
    image = np.stack([
        np.clip(gray + rng.normal(0.0, spec.noise, size=(h, w)) + rng.uniform(-0.02, 0.02), 0.0, 1.0)
        for _ in range(3)
    ]).astype(np.float32)
    return Sample("", image, mask)


def generate_synthetic(spec: SyntheticSpec, out_dir, train_fraction: float = 0.8):
    """Write PPM images + PGM masks + manifest under out_dir, deterministically.

    Existing byte-identical files are left untouched. Returns the manifest
    and the number of files that were already up to date.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    tags = split_assignments(spec.n_samples, train_fraction, spec.seed)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_samples)
    entries = []
    unchanged = 0
    for i in range(spec.n_samples):
        rng = np.random.default_rng(seeds[i])
        sample = _render_sample(rng, spec)
        sid = f"s{i:05d}"
        img_rel = os.path.join("images", sid + ".ppm")
        msk_rel = os.path.join("masks", sid + ".pgm")
        ratio = float(sample.mask.sum()) / sample.mask[0].size
        entries.append(ManifestEntry(sid, img_rel, msk_rel, tags[i], ratio))
        for rel, arr in ((img_rel, sample.image), (msk_rel, sample.mask)):
            path = os.path.join(out_dir, rel)
            blob = image_bytes(arr)
            if os.path.exists(path):
                with open(path, "rb") as f:
                    if f.read() == blob:
                        unchanged += 1
                        continue
            with open(path, "wb") as f:
                f.write(blob)
    manifest = DatasetManifest(entries, root=str(out_dir))
    mpath = os.path.join(out_dir, "manifest.tsv")
    mblob = "".join(f"{e.id}\t{e.image_path}\t{e.mask_path}\t{e.split}\t{e.size_ratio!r}\n"
                    for e in entries).encode("utf-8")
    if os.path.exists(mpath):
        with open(mpath, "rb") as f:
            if f.read() == mblob:
                unchanged += 1
                return manifest, unchanged
    with open(mpath, "wb") as f:
        f.write(mblob)
    return manifest, unchanged


def load_split(manifest: DatasetManifest, tag: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Load one split into stacked arrays (ids, Nx3xHxW images, Nx1xHxW masks)."""
    entries = manifest.split(tag)
    if not entries:
        raise ValueError(f"manifest has no {tag!r} samples")
    images, masks, ids = [], [], []
    for e in entries:
        images.append(read_image(manifest.resolve(e.image_path)))
        masks.append(read_mask(manifest.resolve(e.mask_path)))
        ids.append(e.id)
    return ids, np.stack(images), np.stack(masks)
