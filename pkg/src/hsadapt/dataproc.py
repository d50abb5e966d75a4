"""Synthetic data: channel expansion, degradations, and toy image generation.

A k-channel "hyperspectral" stand-in is manufactured from RGB by mapping
each pixel to its Gaussian response around k reference colors fitted with
k-means: channel i is exp(-squared distance to center i).  That mapping
is invertible by trilateration when at least 4 centers span color space,
which the inversion routine exploits.  Degradation transforms (channel
permutation, grayscale, low resolution) probe what a pretrained network
actually relies on.  The procedural toy dataset draws a centered colored
shape over textured backgrounds littered with smaller palette-colored
clutter; classes are (shape, color) pairs of the central subject, so the
label depends on both color and shape but not on global color statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor


# -- k-means color centers ------------------------------------------------

@dataclass
class ColorCenters:
    """Fitted cluster centers plus the recipe that produced them."""

    centers: np.ndarray
    seed: int
    iterations: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ValueError(f"centers must be [k, d], got shape {self.centers.shape}")


def _assign(pixels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_objective(pixels: np.ndarray, centers: np.ndarray) -> float:
    d2 = ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def _lloyd_once(pixels: np.ndarray, k: int, rng, max_iter: int,
                seeding: str = "d2"):
    m = pixels.shape[0]
    if seeding == "uniform":
        centers = pixels[rng.choice(m, k, replace=False)].copy()
    else:
        centers = np.empty((k, pixels.shape[1]))
        centers[0] = pixels[rng.integers(m)]
        d2 = ((pixels - centers[0]) ** 2).sum(axis=1)
        for i in range(1, k):
            total = d2.sum()
            if total <= 0.0:  # all remaining mass on chosen points; pick any new one
                centers[i] = pixels[rng.integers(m)]
            else:
                centers[i] = pixels[rng.choice(m, p=d2 / total)]
            d2 = np.minimum(d2, ((pixels - centers[i]) ** 2).sum(axis=1))

    assign = _assign(pixels, centers)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = pixels[mask].mean(axis=0)
            else:
                dist = ((pixels - centers[assign]) ** 2).sum(axis=1)
                centers[j] = pixels[dist.argmax()]
        new_assign = _assign(pixels, centers)
        if (new_assign == assign).all():
            break
        assign = new_assign
    return centers, iterations


def kmeans(pixels: np.ndarray, k: int, seed: int, max_iter: int = 100,
           restarts: int = 20) -> ColorCenters:
    """Lloyd's algorithm, best of several differently seeded restarts.

    Deterministic per seed.  Restarts alternate between distance-weighted
    seeding (centers drawn with probability proportional to squared
    distance from those chosen so far, strong on well-separated data) and
    plain uniform seeding (a better explorer when the data has no cluster
    structure).  A cluster that empties during iteration is re-seeded to
    the point farthest from its assigned center.  Each run converges when
    assignments stop changing; the lowest-objective run wins.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValueError(f"pixels must be [M, d], got shape {pixels.shape}")
    m = pixels.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} pixels, got {m}")
    if np.unique(pixels, axis=0).shape[0] < k:
        raise ValueError(f"need at least k={k} distinct pixels")
    rng = np.random.default_rng(seed)

    best = None
    best_obj = np.inf
    for r in range(restarts):
        seeding = "d2" if r % 2 == 0 else "uniform"
        centers, iterations = _lloyd_once(pixels, k, rng, max_iter, seeding)
        obj = kmeans_objective(pixels, centers)
        if obj < best_obj:
            best, best_obj = (centers, iterations), obj
    return ColorCenters(centers=best[0], seed=int(seed), iterations=best[1])


# -- channel expansion and its inverse ------------------------------------

def expand_channels(rgb: np.ndarray, centers: ColorCenters) -> np.ndarray:
    """Map a [3,H,W] image in [0,1] to [k,H,W] Gaussian color responses.

    Channel i holds exp(-squared distance from the pixel color to center
    i), so values lie in (0, 1] and equal 1 exactly on the center itself.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got shape {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    c = centers.centers  # [k,3]
    diff = rgb[None, :, :, :] - c[:, :, None, None]
    return np.exp(-(diff ** 2).sum(axis=1)).astype(np.float32)


def invert_expansion(h: np.ndarray, centers: ColorCenters) -> np.ndarray:
    """Recover the RGB image behind an expanded one by trilateration.

    Squared distances fall out of each channel as -log(channel); pairs of
    distance equations subtract to a linear system in the pixel color,
    solved least-squares across all k centers.  Needs k >= 4 centers that
    span color space (3 centers leave a mirror ambiguity).
    """
    h = np.asarray(h, dtype=np.float64)
    c = centers.centers
    k = c.shape[0]
    if h.ndim != 3 or h.shape[0] != k:
        raise ValueError(f"expected [{k},H,W] channels for {k} centers, got {h.shape}")
    if k < 4:
        raise ValueError(f"inversion needs k >= 4 centers, got {k}")
    a = 2.0 * (c[1:] - c[0])
    if np.linalg.matrix_rank(a, tol=1e-9) < 3:
        raise ValueError("degenerate center configuration: centers do not span color space")
    d2 = -np.log(np.maximum(h, 1e-300))
    norms = (c ** 2).sum(axis=1)
    b = (d2[0] - d2[1:]).reshape(k - 1, -1) + (norms[1:] - norms[0])[:, None]
    sol = np.linalg.pinv(a) @ b
    return sol.reshape(3, h.shape[1], h.shape[2])


# -- degradations ---------------------------------------------------------

def permute_channels(img: np.ndarray, perm) -> np.ndarray:
    perm = [int(i) for i in perm]
    k = img.shape[0]
    if sorted(perm) != list(range(k)):
        raise ValueError(f"{perm} is not a permutation of 0..{k - 1}")
    return np.ascontiguousarray(img[perm])


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luminance-weighted mix (0.299, 0.587, 0.114) replicated to 3 channels."""
    if img.shape[0] != 3:
        raise ValueError(f"grayscale needs 3 channels, got {img.shape[0]}")
    y = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.ascontiguousarray(np.stack([y, y, y]).astype(img.dtype))


def low_resolution(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Box-filter downsample by ``factor``, then nearest-neighbor upsample."""
    k, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by factor {factor}")
    coarse = img.reshape(k, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    out = np.repeat(np.repeat(coarse, factor, axis=1), factor, axis=2)
    return np.ascontiguousarray(out.astype(img.dtype))


# -- per-image record -----------------------------------------------------

@dataclass
class HyperImage:
    """One k-channel image with its label and provenance."""

    data: np.ndarray
    label: int
    source: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"data must be [k,H,W] with k >= 1, got {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")


# -- procedural toy shapes ------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross")

PALETTE = (
    ("red", (0.85, 0.15, 0.15)),
    ("blue", (0.15, 0.25, 0.85)),
    ("green", (0.15, 0.75, 0.20)),
    ("yellow", (0.85, 0.80, 0.10)),
)


def _shape_mask(shape: str, h: int, cx, cy, r, theta, ss: int = 4) -> np.ndarray:
    """Antialiased [h,h] mask in [0,1] via ss x ss supersampling."""
    n = h * ss
    ys, xs = np.mgrid[0:n, 0:n]
    x = (xs + 0.5) / ss - cx
    y = (ys + 0.5) / ss - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * x + st * y
    v = -st * x + ct * y
    if shape == "disk":
        m = u * u + v * v <= r * r
    elif shape == "square":
        s = r * 0.82
        m = (np.abs(u) <= s) & (np.abs(v) <= s)
    elif shape == "triangle":
        ri = r * 0.55
        m = np.ones_like(u, dtype=bool)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            m &= np.cos(ang) * u + np.sin(ang) * v <= ri
    elif shape == "cross":
        arm = r * 0.34
        m = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float64).reshape(h, ss, h, ss).mean(axis=(1, 3))


def _textured_background(rng, h: int) -> np.ndarray:
    """Smooth gray texture with a faint color tint."""
    coarse = rng.random((3, 4, 4))
    tex = np.repeat(np.repeat(coarse, h // 4, axis=1), h // 4, axis=2)
    gray = tex.mean(axis=0, keepdims=True)
    tinted = 0.85 * gray + 0.15 * tex  # mostly luminance, slight tint
    return 0.25 + 0.5 * tinted


def _render_toy_image(rng, shape: str, color, h: int) -> np.ndarray:
    img = _textured_background(rng, h)

    # palette-colored clutter behind the subject: strictly smaller and
    # off-center, so global color pooling cannot identify the class and
    # the subject stays unambiguous (largest, central, drawn on top)
    for _ in range(int(rng.integers(2, 5))):
        d_shape = SHAPES[rng.integers(len(SHAPES))]
        mask = _shape_mask(
            d_shape, h,
            cx=rng.uniform(0.15 * h, 0.85 * h), cy=rng.uniform(0.15 * h, 0.85 * h),
            r=rng.uniform(0.08 * h, 0.14 * h), theta=rng.uniform(0, 2 * np.pi),
        )
        d_fill = np.asarray(PALETTE[rng.integers(len(PALETTE))][1])[:, None, None]
        img = img * (1 - mask) + d_fill * rng.uniform(0.55, 1.0) * mask

    mask = _shape_mask(
        shape, h,
        cx=rng.uniform(0.38 * h, 0.62 * h), cy=rng.uniform(0.38 * h, 0.62 * h),
        r=rng.uniform(0.17 * h, 0.28 * h), theta=rng.uniform(0, 2 * np.pi),
    )
    brightness = rng.uniform(0.60, 1.0)
    fill = np.asarray(color)[:, None, None] * brightness
    img = img * (1 - mask) + fill * mask

    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def toy_class_names(num_classes: int) -> list[str]:
    if not 1 <= num_classes <= len(SHAPES) * len(PALETTE):
        raise ValueError(
            f"classes must be in [1, {len(SHAPES) * len(PALETTE)}], got {num_classes}"
        )
    return [f"{PALETTE[c // len(SHAPES)][0]}_{SHAPES[c % len(SHAPES)]}"
            for c in range(num_classes)]


def gen_toy_images(seed: int, classes: int, per_class: int, h: int = 32,
                   salt: int = 0) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Procedural colored-shape images; class = (shape, color) pair.

    Deterministic per (seed, salt, index): every image draws from its own
    derived generator, so a dataset regenerates bit for bit and distinct
    salts give disjoint splits.
    """
    names = toy_class_names(classes)
    images = np.empty((classes * per_class, 3, h, h), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    idx = 0
    for c in range(classes):
        shape = SHAPES[c % len(SHAPES)]
        color = PALETTE[c // len(SHAPES)][1]
        for _ in range(per_class):
            rng = np.random.default_rng([seed, salt, idx])
            images[idx] = _render_toy_image(rng, shape, color, h)
            labels[idx] = c
            idx += 1
    return images, labels, names


# -- manifests and files --------------------------------------------------

@dataclass
class DatasetManifest:
    """Plain-text index of a dataset directory."""

    name: str
    classes: list[str]
    channels: int
    splits: dict[str, list[tuple[str, int]]]
    generation: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "name": self.name, "classes": self.classes, "channels": self.channels,
            "splits": {s: [[p, int(l)] for p, l in e] for s, e in self.splits.items()},
            "generation": self.generation,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return DatasetManifest(
            name=raw["name"], classes=raw["classes"], channels=raw["channels"],
            splits={s: [(p, int(l)) for p, l in e] for s, e in raw["splits"].items()},
            generation=raw.get("generation", {}),
        )


def save_split_dataset(out_dir, name: str, splits: dict, class_names: list[str],
                       generation: dict) -> DatasetManifest:
    """Write per-sample tensor files plus manifest.json.

    ``splits`` maps split name to (images [N,k,H,W], labels [N]).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    channels = None
    entries: dict[str, list[tuple[str, int]]] = {}
    for split, (images, labels) in splits.items():
        (out / split).mkdir(exist_ok=True)
        channels = int(images.shape[1])
        entries[split] = []
        for i in range(images.shape[0]):
            rel = f"{split}/{i:05d}.spat"
            save_tensor(out / rel, images[i])
            entries[split].append((rel, int(labels[i])))
    manifest = DatasetManifest(name=name, classes=list(class_names),
                               channels=channels, splits=entries,
                               generation=generation)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_split_dataset(in_dir) -> tuple[DatasetManifest, dict]:
    """Read a dataset directory back into arrays, validating every file."""
    root = Path(in_dir)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    splits = {}
    for split, entries in manifest.splits.items():
        images, labels = [], []
        for rel, label in entries:
            path = root / rel
            if not path.exists():
                raise FileNotFoundError(f"manifest references missing file {rel}")
            if not 0 <= label < len(manifest.classes):
                raise ValueError(f"label {label} out of range in {rel}")
            images.append(load_tensor(path))
            labels.append(label)
        splits[split] = (np.stack(images), np.asarray(labels, dtype=np.int64))
    return manifest, splits


# -- dataset descriptors (harness entry point) ----------------------------

@dataclass
class SplitData:
    """In-memory train/test arrays plus provenance."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_names: list[str]
    channels: int
    centers: ColorCenters | None = None
    descriptor: dict = field(default_factory=dict)


def _apply_transform(images: np.ndarray, transform: dict) -> np.ndarray:
    out = images
    if "permute" in transform:
        out = np.stack([permute_channels(im, transform["permute"]) for im in out])
    if transform.get("grayscale"):
        out = np.stack([to_grayscale(im) for im in out])
    if "lowres" in transform:
        out = np.stack([low_resolution(im, int(transform["lowres"])) for im in out])
    return out


_dataset_cache: dict = {}


def build_dataset(descriptor: dict) -> SplitData:
    """Materialize the dataset a config refers to.

    type "toy": procedural 3-channel shapes; fields seed, classes,
    per_class, test_per_class, h, transform.
    type "expanded": Gaussian channel expansion of a toy base; fields
    base (a toy descriptor), k, centers_seed, center_sample.

    Builds are deterministic in the descriptor, so results are cached
    for the life of the process; callers must treat them as read-only.
    """
    key = json.dumps(descriptor, sort_keys=True, default=str)
    if key in _dataset_cache:
        return _dataset_cache[key]
    data = _build_dataset(descriptor)
    _dataset_cache[key] = data
    return data


def _build_dataset(descriptor: dict) -> SplitData:
    kind = descriptor.get("type")
    if kind == "toy":
        seed = int(descriptor.get("seed", 0))
        classes = int(descriptor.get("classes", 8))
        per_class = int(descriptor.get("per_class", 100))
        test_per_class = int(descriptor.get("test_per_class", 25))
        h = int(descriptor.get("h", 32))
        train_x, train_y, names = gen_toy_images(seed, classes, per_class, h, salt=0)
        test_x, test_y, _ = gen_toy_images(seed, classes, test_per_class, h, salt=1)
        transform = descriptor.get("transform", {})
        if transform:
            train_x = _apply_transform(train_x, transform)
            test_x = _apply_transform(test_x, transform)
        return SplitData(train_x, train_y, test_x, test_y, names,
                         channels=int(train_x.shape[1]), descriptor=dict(descriptor))
    if kind == "expanded":
        base = build_dataset({**descriptor["base"], "type": "toy"})  # cached too
        k = int(descriptor["k"])
        centers_seed = int(descriptor.get("centers_seed", 0))
        sample = int(descriptor.get("center_sample", 4096))
        rng = np.random.default_rng(centers_seed)
        pix = base.train_x.transpose(0, 2, 3, 1).reshape(-1, 3)
        chosen = pix[rng.choice(pix.shape[0], size=min(sample, pix.shape[0]),
                                replace=False)]
        centers = kmeans(chosen, k, seed=centers_seed)
        train_x = np.stack([expand_channels(im, centers) for im in base.train_x])
        test_x = np.stack([expand_channels(im, centers) for im in base.test_x])
        return SplitData(train_x, base.train_y, test_x, base.test_y,
                         base.class_names, channels=k, centers=centers,
                         descriptor=dict(descriptor))
    raise ValueError(f"unknown dataset type {kind!r}")
