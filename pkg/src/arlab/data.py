"""Dataset ingestion: the IDX image/label format and synthetic corpora.

Loaders validate and reject malformed files rather than truncating.
All inputs are float64 in [0,1]; labels are integer class ids.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, replace

import numpy as np

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class IdxBadMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Inputs in [0,1] with integer labels; immutable by convention."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    num_classes: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError(
                f"inputs must lie in [0,1], got range "
                f"[{self.inputs.min()}, {self.inputs.max()}]")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, n: int) -> "Dataset":
        return replace(self, inputs=self.inputs[:n], labels=self.labels[:n],
                       num_classes=self.num_classes)

    def shuffled(self, seed: int) -> "Dataset":
        order = np.random.default_rng(seed).permutation(len(self))
        return replace(self, inputs=self.inputs[order], labels=self.labels[order],
                       num_classes=self.num_classes)


def _read_idx(path, expected_magic: int):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the 4-byte magic")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IdxBadMagicError(
            f"{path}: magic {magic} (0x{magic:08x}), expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: dimension header cut short")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if dims else 0
    if len(raw) != header + count:
        raise IdxTruncatedError(
            f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return data


def load_mnist_idx(images_path, labels_path, name: str = "mnist",
                   split: str = "test") -> Dataset:
    """Parse an IDX image/label pair (big-endian magic 2051/2049,
    unsigned-byte pixels) and scale pixels by 1/255 into [0,1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected N x H x W images, got "
                             f"{images.ndim} dimensions")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a label vector")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images.astype(np.float64)[..., None] / 255.0
    return Dataset(inputs, labels.astype(np.int64), name=name, split=split,
                   num_classes=10)


# ---------------------------------------------------------------------------
# synthetic corpora


def _gaussian_pair(n: int, d: int, rng, separation: float) -> tuple[np.ndarray, np.ndarray]:
    direction = np.ones(d) / math.sqrt(d)
    labels = np.arange(n) % 2
    signs = 2.0 * labels - 1.0
    raw = rng.normal(size=(n, d)) + signs[:, None] * (separation / 2) * direction
    scale = 0.5 / (separation / 2 + 3.0)
    return np.clip(0.5 + raw * scale, 0.0, 1.0), labels


def _ring(n: int, d: int, rng, r_inner: float, r_outer: float,
          noise: float) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n) % 2
    radii = np.where(labels == 0, r_inner, r_outer) + rng.normal(0, noise, n)
    dirs = rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    scale = 0.5 / (r_outer + 4 * noise)
    return np.clip(0.5 + radii[:, None] * dirs * scale, 0.0, 1.0), labels


@functools.lru_cache(maxsize=8)
def _digit_font(size: int):
    from PIL import ImageFont
    from matplotlib import font_manager
    path = font_manager.findfont("DejaVu Sans")
    return ImageFont.truetype(path, size)


def _render_digit(digit: int, rng) -> np.ndarray:
    """One 28x28 grayscale digit with random affine distortion and noise."""
    from PIL import Image, ImageDraw

    size = int(rng.integers(17, 23))
    img = Image.new("L", (28, 28), 0)
    draw = ImageDraw.Draw(img)
    font = _digit_font(size)
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
    ox = (28 - (right - left)) / 2 - left
    oy = (28 - (bottom - top)) / 2 - top
    draw.text((ox, oy), str(digit), fill=255, font=font)

    angle = rng.uniform(-14, 14) * math.pi / 180
    shear = rng.uniform(-0.18, 0.18)
    sx = rng.uniform(0.88, 1.12)
    sy = rng.uniform(0.88, 1.12)
    tx, ty = rng.uniform(-2.2, 2.2, 2)
    c, s = math.cos(angle), math.sin(angle)
    fwd = np.array([[sx * c, -sy * (s - shear * c)],
                    [sx * s, sy * (c + shear * s)]])
    inv = np.linalg.inv(fwd)
    cx = cy = 13.5
    # PIL's AFFINE coefficients map output pixels back to input pixels
    a, b = inv[0]
    d_, e = inv[1]
    coeffs = (a, b, cx - a * (cx + tx) - b * (cy + ty),
              d_, e, cy - d_ * (cx + tx) - e * (cy + ty))
    img = img.transform((28, 28), Image.AFFINE, coeffs, resample=Image.BILINEAR)

    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = arr + rng.normal(0.0, 0.04, arr.shape)
    return np.clip(arr, 0.0, 1.0)


def _digits(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.permutation(np.arange(n) % 10)
    inputs = np.stack([_render_digit(int(y), rng) for y in labels])[..., None]
    return inputs, labels


def synth_dataset(kind: str, n: int, d: int = 2, seed: int = 0,
                  **kwargs) -> Dataset:
    """Deterministic synthetic datasets.

    gaussian_pair: two isotropic clusters at +/- mu along the diagonal,
    linearly separable at the default separation.  ring: two concentric
    shells, not linearly separable.  digits: rendered 28x28 grayscale
    digits (10 classes) with affine distortions and pixel noise, a
    stand-in corpus for image-scale pipelines when no IDX files are
    available.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian_pair":
        inputs, labels = _gaussian_pair(n, d, rng, kwargs.pop("separation", 6.0))
        classes = 2
    elif kind == "ring":
        inputs, labels = _ring(n, d, rng, kwargs.pop("r_inner", 0.5),
                               kwargs.pop("r_outer", 1.0), kwargs.pop("noise", 0.05))
        classes = 2
    elif kind == "digits":
        inputs, labels = _digits(n, rng)
        classes = 10
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if kwargs:
        raise TypeError(f"unexpected options for {kind}: {sorted(kwargs)}")
    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], name=f"synth-{kind}",
                   split="train", num_classes=classes)


def find_mnist(root=None) -> dict | None:
    """Locate MNIST IDX files under ``root`` (or $ARLAB_MNIST, ./data).

    Returns {"train": (images, labels), "test": (images, labels)} paths
    or None when not present.
    """
    candidates = [root] if root else []
    if os.environ.get("ARLAB_MNIST"):
        candidates.append(os.environ["ARLAB_MNIST"])
    candidates += ["data", os.path.join(os.path.expanduser("~"), "data", "mnist")]
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    for base in candidates:
        if not base or not os.path.isdir(base):
            continue
        found = {}
        for split, (im, lb) in names.items():
            ip, lp = os.path.join(base, im), os.path.join(base, lb)
            if os.path.isfile(ip) and os.path.isfile(lp):
                found[split] = (ip, lp)
        if len(found) == 2:
            return found
    return None
