"""Dataset loading, synthetic generators, label-regime splits, augmentation.

The synthetic generators double as verification oracles: they return the
ground-truth parameters (cluster centroids, covariance eigenpairs, exact
masks) alongside the samples, so convergence claims can be checked against
quantities computed independently of any training code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .ops import FLOAT

MASK_SUFFIX = "_mask"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Label regimes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeSpec:
    """An r percent regime: the labeled fraction used for supervision."""

    r: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r <= 100:
            raise DataError(f"regime percentage must be in (0, 100], got {self.r}")

    def labeled_count(self, pool_size: int) -> int:
        return max(1, int(np.floor(self.r / 100.0 * pool_size)))


def split_regime(pool: list, spec: RegimeSpec) -> tuple[list, list]:
    """Seeded shuffle then prefix selection; the two parts are disjoint."""
    if not pool:
        raise DataError("cannot split an empty pool")
    n_labeled = spec.labeled_count(len(pool))
    order = np.random.default_rng(spec.seed).permutation(len(pool))
    labeled = [pool[i] for i in order[:n_labeled]]
    unlabeled = [pool[i] for i in order[n_labeled:]]
    return labeled, unlabeled


def train_val_split(pool: list, val_frac: float, seed: int) -> tuple[list, list]:
    """Seeded train/validation split of a labeled pool."""
    if not pool:
        raise DataError("cannot split an empty pool")
    if not 0 < val_frac < 1:
        raise DataError(f"val_frac must be in (0, 1), got {val_frac}")
    n_val = max(1, int(round(val_frac * len(pool))))
    if n_val >= len(pool):
        raise DataError(f"validation fraction {val_frac} leaves no training items")
    order = np.random.default_rng(seed).permutation(len(pool))
    val = [pool[i] for i in order[:n_val]]
    train = [pool[i] for i in order[n_val:]]
    return train, val


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianClustersSpec:
    k: int
    dim: int
    separation: float
    sigma: float
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.dim < 2 or self.count < 1:
            raise DataError(f"invalid cluster spec {self}")
        if self.sigma <= 0 or self.separation <= 0:
            raise DataError(f"invalid cluster spec {self}")


@dataclass(frozen=True)
class CovarianceSpec:
    dim: int
    spectrum: tuple
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or len(self.spectrum) != self.dim or self.count < 1:
            raise DataError(f"invalid covariance spec {self}")
        if any(v <= 0 for v in self.spectrum):
            raise DataError("eigenvalue spectrum must be positive")


@dataclass(frozen=True)
class BlobSpec:
    """Blob-segmentation task: foreground may differ from background in
    mean intensity (``contrast``), in noise scale (``fg_noise_sigma``), or
    both."""

    size: int
    count: int
    blob_range: tuple = (1, 3)
    contrast: float = 0.5
    noise_sigma: float = 0.08
    fg_noise_sigma: float | None = None
    background: float = 0.25
    clip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.count < 1:
            raise DataError(f"invalid blob spec {self}")
        lo, hi = self.blob_range
        if lo < 1 or hi < lo:
            raise DataError(f"invalid blob count range {self.blob_range}")
        if not 0 <= self.contrast <= 1 or self.noise_sigma < 0:
            raise DataError(f"invalid blob spec {self}")
        if self.contrast == 0 and self.fg_noise_sigma is None:
            raise DataError("blobs need intensity or texture contrast")


@dataclass
class ClusterData:
    samples: np.ndarray     # [count, dim]
    centroids: np.ndarray   # [k, dim]
    labels: np.ndarray      # [count]


@dataclass
class CovarianceData:
    samples: np.ndarray       # [count, dim], zero population mean
    eigenvalues: np.ndarray   # [dim], descending
    eigenvectors: np.ndarray  # [dim, dim], column j pairs with eigenvalue j


@dataclass
class BlobData:
    images: np.ndarray  # [count, 1, size, size] in [0, 1]
    masks: np.ndarray   # [count, size, size] in {0, 1}


def _cluster_centroids(k: int, dim: int, separation: float) -> np.ndarray:
    if k == 1:
        return np.zeros((1, dim), dtype=np.float64)
    # equally spaced on a circle in the first two axes; the chord between
    # neighbours equals the requested separation
    radius = separation / (2.0 * np.sin(np.pi / k))
    angles = 2.0 * np.pi * np.arange(k) / k
    c = np.zeros((k, dim), dtype=np.float64)
    c[:, 0] = radius * np.cos(angles)
    c[:, 1] = radius * np.sin(angles)
    return c


def gen_gaussian_clusters(spec: GaussianClustersSpec) -> ClusterData:
    rng = np.random.default_rng(spec.seed)
    centroids = _cluster_centroids(spec.k, spec.dim, spec.separation)
    labels = rng.integers(0, spec.k, spec.count)
    noise = rng.standard_normal((spec.count, spec.dim)) * spec.sigma
    samples = centroids[labels] + noise
    return ClusterData(
        samples=samples.astype(FLOAT),
        centroids=centroids.astype(FLOAT),
        labels=labels,
    )


def gen_covariance_data(spec: CovarianceSpec) -> CovarianceData:
    rng = np.random.default_rng(spec.seed)
    lams = np.sort(np.asarray(spec.spectrum, dtype=np.float64))[::-1]
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    z = rng.standard_normal((spec.count, spec.dim))
    samples = (z * np.sqrt(lams)) @ q.T
    return CovarianceData(
        samples=samples.astype(FLOAT),
        eigenvalues=lams.copy(),
        eigenvectors=q,
    )


def gen_blobs(spec: BlobSpec) -> BlobData:
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s]
    images = np.empty((spec.count, 1, s, s), dtype=FLOAT)
    masks = np.zeros((spec.count, s, s), dtype=np.uint8)
    r_lo, r_hi = max(2.0, s / 12.0), s / 5.0
    for i in range(spec.count):
        n_blobs = int(rng.integers(spec.blob_range[0], spec.blob_range[1] + 1))
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(n_blobs):
            rx = rng.uniform(r_lo, r_hi)
            ry = rng.uniform(r_lo, r_hi)
            cx = rng.uniform(r_hi, s - r_hi)
            cy = rng.uniform(r_hi, s - r_hi)
            theta = rng.uniform(0, np.pi)
            dx, dy = xx - cx, yy - cy
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        img = spec.background + spec.contrast * mask.astype(np.float64)
        sigma = np.full((s, s), spec.noise_sigma)
        if spec.fg_noise_sigma is not None:
            sigma[mask] = spec.fg_noise_sigma
        img += rng.standard_normal((s, s)) * sigma
        if spec.clip:
            img = np.clip(img, 0.0, 1.0)
        images[i, 0] = img.astype(FLOAT)
        masks[i] = mask.astype(np.uint8)
    return BlobData(images=images, masks=masks)


def gen_synthetic(spec):
    """Dispatch a synthetic task spec to its generator."""
    if isinstance(spec, GaussianClustersSpec):
        return gen_gaussian_clusters(spec)
    if isinstance(spec, CovarianceSpec):
        return gen_covariance_data(spec)
    if isinstance(spec, BlobSpec):
        return gen_blobs(spec)
    raise DataError(f"unknown synthetic spec type {type(spec).__name__}")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, mask: np.ndarray | None, seed) -> tuple:
    """Random flips plus a rotation by a multiple of 90 degrees.

    ``image`` is [C, H, W]; the identical transform is applied to the mask.
    ``seed`` may be an int or a Generator (handy inside training loops).
    """
    rng = np.random.default_rng(seed) if not isinstance(
        seed, np.random.Generator) else seed
    if mask is not None and mask.shape != image.shape[1:]:
        raise DataError(
            f"mask shape {mask.shape} does not match image {image.shape[1:]}"
        )
    img = image
    m = mask
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
        m = m[::-1, :] if m is not None else None
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
        m = m[:, ::-1] if m is not None else None
    k = int(rng.integers(0, 4))
    if k:
        img = np.rot90(img, k, axes=(1, 2))
        m = np.rot90(m, k) if m is not None else None
    img = np.ascontiguousarray(img)
    m = np.ascontiguousarray(m) if m is not None else None
    return img, m


# ---------------------------------------------------------------------------
# Image directory loading
# ---------------------------------------------------------------------------

@dataclass
class DatasetItem:
    image_id: str
    image: np.ndarray            # [C, H, W] float32 in [0, 1]
    mask: np.ndarray | None      # [H, W] uint8 in {0, 1}, None when unlabeled
    path: str = ""
    mask_path: str = ""


@dataclass
class Dataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def labeled(self):
        return [it for it in self.items if it.mask is not None]

    @property
    def unlabeled(self):
        return [it for it in self.items if it.mask is None]

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])


def _is_mask_file(path: Path) -> bool:
    return path.stem.endswith(MASK_SUFFIX)


def _open_image(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    return img


def load_mask_file(path: Path, expected_size: int | None = None) -> np.ndarray:
    """Load a mask image as a binary [H, W] array (nonzero means foreground)."""
    img = _open_image(Path(path)).convert("L")
    if expected_size is not None and img.size != (expected_size, expected_size):
        img = img.resize((expected_size, expected_size), Image.NEAREST)
    return (np.asarray(img) > 0).astype(np.uint8)


def load_images(directory, expected_size: int) -> Dataset:
    """Load an image directory with optional paired ``*_mask`` files.

    Images are scaled to [0, 1] and resized bilinearly to
    ``expected_size`` square; masks are resized nearest-neighbour and
    re-binarized. Files sort lexicographically for deterministic order.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    paths = sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in (".png", ".pgm") and not _is_mask_file(p)
    )
    if not paths:
        raise DataError(f"no images found in {directory}")
    items = []
    for path in paths:
        img = _open_image(path)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode in ("RGBA", "P") else "L")
        mask_path = path.with_name(path.stem + MASK_SUFFIX + path.suffix)
        mask = None
        if mask_path.exists():
            m_img = _open_image(mask_path).convert("L")
            if m_img.size != img.size:
                raise DataError(
                    f"mask {mask_path} size {m_img.size} does not match "
                    f"image {path} size {img.size}"
                )
            m_img = m_img.resize((expected_size, expected_size), Image.NEAREST)
            mask = (np.asarray(m_img) > 0).astype(np.uint8)
        img = img.resize((expected_size, expected_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=FLOAT) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        items.append(
            DatasetItem(
                image_id=path.stem,
                image=np.ascontiguousarray(arr),
                mask=mask,
                path=str(path),
                mask_path=str(mask_path) if mask is not None else "",
            )
        )
    channels = {it.image.shape[0] for it in items}
    if len(channels) > 1:
        raise DataError(f"mixed channel counts in {directory}: {sorted(channels)}")
    return Dataset(items=items)


def save_image(path, array: np.ndarray) -> None:
    """Write a [H, W] float image in [0, 1] as an 8-bit PNG/PGM."""
    arr = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary [H, W] mask as an 8-bit image (foreground = 255)."""
    arr = ((np.asarray(mask) > 0) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path)


def write_manifest(path, entries: list) -> None:
    Path(path).write_text(json.dumps({"items": entries}, indent=2, sort_keys=True))


def read_manifest(path) -> list:
    return json.loads(Path(path).read_text())["items"]
