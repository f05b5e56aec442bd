"""Synthetic multi-domain segmentation data, preprocessing and on-disk layout.

Every domain renders the same underlying anatomy (soft-edged ellipse
"brain" plus a bright rim) through its own acquisition transform, so masks
are shared across domains while intensities shift.

On disk::

    <root>/manifest.txt                    one line per domain: "<domain_id> <role>"
    <root>/<domain_id>/manifest.txt        "# key=value" spec lines, then "<sample_id> <split>"
    <root>/<domain_id>/<split>/<sample_id>.clra   entries "image" [1,H,W] f32, "mask" [H,W] i32
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .checkpoint import load_checkpoint, save_checkpoint

BLACK_THRESHOLD = 1e-6


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    gamma: float = 1.0
    intensity_scale: float = 1.0
    additive_noise_std: float = 0.0
    bias_field_strength: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.additive_noise_std < 0 or self.blur_sigma < 0 or self.intensity_scale <= 0:
            raise ValueError(f"invalid domain spec {self}")


# Fixed presets; changing them moves the acceptance thresholds.
PRESET_VERSION = 1
SOURCE = DomainSpec("source", gamma=1.0, additive_noise_std=0.02)
TARGETS = (
    DomainSpec("mild", gamma=0.8, intensity_scale=0.9, additive_noise_std=0.03, bias_field_strength=0.1, blur_sigma=0.3),
    DomainSpec("moderate", gamma=1.5, intensity_scale=1.2, additive_noise_std=0.03, bias_field_strength=0.2, blur_sigma=0.5),
    DomainSpec("strong", gamma=0.6, intensity_scale=0.8, additive_noise_std=0.05, bias_field_strength=0.25, blur_sigma=0.6),
    DomainSpec("severe", gamma=2.2, intensity_scale=1.5, additive_noise_std=0.05, bias_field_strength=0.3, blur_sigma=0.8),
    DomainSpec("extreme", gamma=0.4, intensity_scale=0.7, additive_noise_std=0.07, bias_field_strength=0.4, blur_sigma=1.0),
)
HARDEST = TARGETS[-1].domain_id


@dataclass
class SegmentationSample:
    image: np.ndarray
    mask: np.ndarray
    domain_id: str
    sample_id: str


def render_anatomy(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free base image in [0, 1] and its binary brain mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    membership = np.zeros((size, size))
    c = size / 2
    for _ in range(rng.integers(1, 4)):
        cy, cx = c + rng.uniform(-0.1, 0.1, 2) * size
        ay, ax = rng.uniform(0.16, 0.3, 2) * size
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / ax
        v = (-dx * np.sin(th) + dy * np.cos(th)) / ay
        r = np.sqrt(u * u + v * v)
        soft = 1.0 / (1.0 + np.exp(-(1.0 - r) * min(ax, ay) / 1.5))
        membership = np.maximum(membership, soft)
    mask = membership > 0.5

    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 16)
    texture /= np.abs(texture).max() + 1e-12
    brain = 0.45 + 0.12 * texture

    outside = ndimage.distance_transform_edt(~mask)
    scale = size / 64
    rim = ((outside > 1.5 * scale) & (outside < 3.5 * scale)).astype(np.float64)
    rim = ndimage.gaussian_filter(rim, 0.6 * scale)

    background = 0.04
    image = background + membership * (brain - background) + 0.85 * rim
    return np.clip(image, 0.0, 1.0), mask


def apply_domain(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Acquisition transform of one domain. Applied to images only."""
    size = image.shape[-1]
    out = np.clip(image, 0.0, None) ** spec.gamma * spec.intensity_scale
    if spec.bias_field_strength:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
        field = (xx * np.cos(theta) + yy * np.sin(theta)) / np.sqrt(2)
        out = out * (1.0 + spec.bias_field_strength * field)
    if spec.blur_sigma:
        out = ndimage.gaussian_filter(out, spec.blur_sigma * size / 64)
    if spec.additive_noise_std:
        out = out + rng.normal(0.0, spec.additive_noise_std, out.shape)
    return out


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D array with half-pixel centres and edge clamping."""
    h, w = image.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, size)
    x0, x1, fx = axis(w, size)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[ys][:, xs]


def preprocess(raw_image, size: int | None = None):
    """Min-max scale to [0, 1] and resize; ``None`` for black slices."""
    img = np.asarray(raw_image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.max() <= BLACK_THRESHOLD:
        return None
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    if size is not None and img.shape != (size, size):
        img = np.clip(resize_bilinear(img, size), 0.0, 1.0)
    return img[None].astype(np.float32)


def generate_domain_suite(seed: int = 0, n_train: int = 48, n_test: int = 16, image_size: int = 64, specs=None):
    """One source and several target domains sharing the same anatomies.

    ``specs`` is a sequence of DomainSpec with the source first; it defaults
    to the fixed presets. Returns ``{domain_id: {split: [SegmentationSample,
    ...]}}`` in spec order. The source pool of ``n_train + n_test`` anatomies
    is split 80:10:10 into train/val/test; targets use the first ``n_train``
    for train and the rest for test.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    specs = tuple(specs) if specs is not None else (SOURCE,) + TARGETS
    if len({s.domain_id for s in specs}) != len(specs):
        raise ValueError("domain ids must be unique")
    pool = n_train + n_test
    anatomies = [render_anatomy(np.random.default_rng([seed, i]), image_size) for i in range(pool)]
    perm = np.random.default_rng([seed, 10**6]).permutation(pool)
    n_tr = int(round(0.8 * pool))
    n_va = max(1, int(round(0.1 * pool)))
    source_split = {"train": sorted(perm[:n_tr]), "val": sorted(perm[n_tr : n_tr + n_va]), "test": sorted(perm[n_tr + n_va :])}
    target_split = {"train": list(range(n_train)), "test": list(range(n_train, pool))}

    suite = {}
    for d, spec in enumerate(specs):
        split = source_split if d == 0 else target_split
        suite[spec.domain_id] = {}
        for name, ids in split.items():
            samples = []
            for i in ids:
                base, mask = anatomies[i]
                rng = np.random.default_rng([seed, int(i), d + 1])
                img = preprocess(apply_domain(base, spec, rng), image_size)
                if img is None:
                    continue
                samples.append(SegmentationSample(img, mask.astype(np.int32), spec.domain_id, f"s{i:05d}"))
            suite[spec.domain_id][name] = samples
    return suite


def domain_specs() -> dict[str, DomainSpec]:
    return {s.domain_id: s for s in (SOURCE,) + TARGETS}


def stack(samples):
    """Batch arrays ``(images [N,1,H,W], masks [N,H,W])``."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# -- on-disk layout -----------------------------------------------------


def write_suite(root, suite, specs: dict[str, DomainSpec] | None = None) -> None:
    """The first domain of ``suite`` is recorded as the source."""
    root = Path(root)
    specs = specs or domain_specs()
    root_lines = []
    for i, (domain_id, splits) in enumerate(suite.items()):
        role = "source" if i == 0 else "target"
        root_lines.append(f"{domain_id} {role}")
        ddir = root / domain_id
        lines = []
        if domain_id in specs:
            for k, v in asdict(specs[domain_id]).items():
                lines.append(f"# {k}={v}")
        lines.append(f"# preset_version={PRESET_VERSION}")
        for split, samples in splits.items():
            for s in samples:
                save_checkpoint(ddir / split / f"{s.sample_id}.clra", {"image": s.image, "mask": s.mask})
                lines.append(f"{s.sample_id} {split}")
        (ddir).mkdir(parents=True, exist_ok=True)
        (ddir / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "manifest.txt").write_text("\n".join(root_lines) + "\n")


def read_domain(root, domain_id: str) -> dict[str, list[SegmentationSample]]:
    ddir = Path(root) / domain_id
    splits: dict[str, list[SegmentationSample]] = {}
    for line in (ddir / "manifest.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sample_id, split = line.split()
        entries, _ = load_checkpoint(ddir / split / f"{sample_id}.clra")
        splits.setdefault(split, []).append(
            SegmentationSample(entries["image"], entries["mask"], domain_id, sample_id)
        )
    return splits


def read_domain_spec(root, domain_id: str) -> DomainSpec | None:
    values = {}
    for line in (Path(root) / domain_id / "manifest.txt").read_text().splitlines():
        if line.startswith("# ") and "=" in line:
            k, v = line[2:].split("=", 1)
            values[k] = v
    names = {f.name: f.type for f in fields(DomainSpec)}
    if "domain_id" not in values:
        return None
    return DomainSpec(**{k: (v if k == "domain_id" else float(v)) for k, v in values.items() if k in names})


def list_domains(root) -> list[tuple[str, str]]:
    out = []
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if line.strip():
            domain_id, role = line.split()
            out.append((domain_id, role))
    return out


def read_suite(root):
    return {d: read_domain(root, d) for d, _ in list_domains(root)}


def load_external_slices(directory, size: int = 256, domain_id: str | None = None) -> list[SegmentationSample]:
    """Read 2-D slices from ``<dir>/images/<id>.{npy,png}`` and ``<dir>/masks/<id>.{npy,png}``.

    Black slices are dropped; images are min-max scaled and resized
    bilinearly, masks by nearest neighbour.
    """
    directory = Path(directory)
    domain_id = domain_id or directory.name

    def read(path):
        if path.suffix == ".npy":
            return np.load(path)
        from PIL import Image

        return np.asarray(Image.open(path))

    samples = []
    for img_path in sorted((directory / "images").iterdir()):
        if img_path.suffix not in (".npy", ".png"):
            continue
        mask_path = next(
            (p for p in (directory / "masks" / f"{img_path.stem}{ext}" for ext in (".npy", ".png")) if p.exists()),
            None,
        )
        if mask_path is None:
            raise FileNotFoundError(f"no mask for slice {img_path.name}")
        image = preprocess(read(img_path).astype(np.float64), size)
        if image is None:
            continue
        mask = (np.asarray(read(mask_path)) > 0).astype(np.int32)
        if mask.shape != (size, size):
            mask = resize_nearest(mask, size)
        samples.append(SegmentationSample(image, mask, domain_id, img_path.stem))
    return samples
