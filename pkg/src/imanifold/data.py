"""Deterministic synthetic datasets.

* 2-D point sets (Swiss roll, circle, moons, S curve) for diffusion
  likelihood experiments.
* A two-factor glyph dataset: 16x16 images whose left and right 8-column
  halves each show one of six seven-segment glyphs, giving 36 classes.
* A two-class patch dataset (small rings vs pluses) for attack/purification.

Every generator is a pure function of its arguments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core.rng import Rng

POINT_KINDS = ("swiss_roll", "circle", "moon", "s_curve")
N_GLYPHS = 6
IMAGE_SIZE = 16
MIN_PER_CLASS = 50
# patch rectangle (row, col, height, width): 4x8 pixels centred on the top rows
DEFAULT_PATCH = (0, 4, 4, 8)
PATCH_CONTRAST = (0.5, 0.8)
CUE_CONTRAST = (0.1, 0.25)
SHAPE_CENTRE = (9.5, 7.5)


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray
    kind: str
    seed: int

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class GlyphDataset:
    images: np.ndarray  # (N, 1, 16, 16) in [0, 1]
    factors: np.ndarray  # (N, 2) ints in [0, 5]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    @property
    def class_ids(self) -> np.ndarray:
        return self.factors[:, 0] * N_GLYPHS + self.factors[:, 1]


@dataclass(frozen=True)
class PatchImageSet:
    images: np.ndarray  # (N, 1, 16, 16) in [0, 1]
    labels: np.ndarray  # (N,) in {0, 1}
    patch: tuple[int, int, int, int] = DEFAULT_PATCH

    def __len__(self) -> int:
        return len(self.images)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


# -- point sets ---------------------------------------------------------------

def standardize(points: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per axis."""
    points = np.asarray(points, dtype=np.float64)
    mu = points.mean(axis=0)
    sd = points.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (points - mu) / sd


def raw_curve(kind: str, n: int, rng: Rng) -> np.ndarray:
    """Noise-free curve points at unit-order scale."""
    if kind == "swiss_roll":
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
        return np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 10.0
    if kind == "circle":
        theta = 2.0 * np.pi * rng.uniform(size=n)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if kind == "moon":
        n_outer = n // 2
        theta = np.pi * rng.uniform(size=n)
        outer = np.stack([np.cos(theta[:n_outer]), np.sin(theta[:n_outer])], axis=1)
        inner = np.stack([1.0 - np.cos(theta[n_outer:]), 0.5 - np.sin(theta[n_outer:])], axis=1)
        return np.concatenate([outer, inner])[rng.permutation(n)]
    if kind == "s_curve":
        t = 3.0 * np.pi * (rng.uniform(size=n) - 0.5)
        return np.stack([np.sin(t), np.sign(t) * (np.cos(t) - 1.0)], axis=1)
    raise ValueError(f"unknown point-set kind {kind!r}; expected one of {POINT_KINDS}")


def make_point_set(kind: str, n: int, noise: float = 0.05, seed: int = 0, normalize: bool = True) -> PointSet:
    if kind not in POINT_KINDS:
        raise ValueError(f"unknown point-set kind {kind!r}; expected one of {POINT_KINDS}")
    if n < 1:
        raise ValueError("n must be at least 1")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = Rng(seed).spawn(f"points/{kind}")
    pts = raw_curve(kind, n, rng)
    if noise > 0:
        pts = pts + noise * rng.normal(size=pts.shape)
    if normalize:
        pts = standardize(pts)
    return PointSet(pts, kind, seed)


def write_points_csv(path, points: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in np.asarray(points):
            w.writerow([repr(float(x)), repr(float(y))])
    return path


def read_points_csv(path) -> np.ndarray:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["x", "y"]:
            raise ValueError("point CSV must have header x,y")
        return np.array([[float(a), float(b)] for a, b in reader], dtype=np.float64).reshape(-1, 2)


# -- glyphs -------------------------------------------------------------------

# seven-segment layout inside a 16x8 half: (row slice, col slice)
_SEGMENTS = {
    "a": (slice(1, 3), slice(1, 7)),
    "b": (slice(1, 9), slice(5, 7)),
    "c": (slice(7, 15), slice(5, 7)),
    "d": (slice(13, 15), slice(1, 7)),
    "e": (slice(7, 15), slice(1, 3)),
    "f": (slice(1, 9), slice(1, 3)),
    "g": (slice(7, 9), slice(1, 7)),
}
_DIGITS = ("abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd")


def glyph_template(index: int) -> np.ndarray:
    """Binary 16x8 template for glyph ``index`` (seven-segment digit)."""
    if not 0 <= index < N_GLYPHS:
        raise ValueError("glyph index out of range")
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE // 2))
    for seg in _DIGITS[index]:
        rows, cols = _SEGMENTS[seg]
        img[rows, cols] = 1.0
    return img


def glyph_image(left: int, right: int) -> np.ndarray:
    """Noise-free 16x16 composition of two glyph halves."""
    return np.concatenate([glyph_template(left), glyph_template(right)], axis=1)


def _balanced_labels(n: int, n_classes: int, rng: Rng) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return labels[rng.permutation(n)]


def make_glyph_dataset(n: int, seed: int = 0, noise: float = 0.05) -> GlyphDataset:
    """``n`` glyph images, classes balanced as evenly as ``n`` allows.

    Jitter: stroke intensity per half drawn from U(0.8, 1.0) plus additive
    Gaussian pixel noise of scale ``noise``, clipped to [0, 1].
    """
    n_classes = N_GLYPHS * N_GLYPHS
    if n < n_classes * MIN_PER_CLASS:
        raise ValueError(f"need at least {n_classes * MIN_PER_CLASS} samples for {n_classes} classes")
    rng = Rng(seed).spawn("glyphs")
    cls = _balanced_labels(n, n_classes, rng)
    factors = np.stack([cls // N_GLYPHS, cls % N_GLYPHS], axis=1)
    templates = np.stack([glyph_template(i) for i in range(N_GLYPHS)])
    strength = rng.uniform(0.8, 1.0, size=(n, 2))
    left = templates[factors[:, 0]] * strength[:, :1, None]
    right = templates[factors[:, 1]] * strength[:, 1:, None]
    images = np.concatenate([left, right], axis=2)
    images = np.clip(images + noise * rng.normal(size=images.shape), 0.0, 1.0)
    return GlyphDataset(images[:, None], factors.astype(np.int64))


# -- patch dataset --------------------------------------------------------------

def _ring(radius: float, cy: float, cx: float, width: float = 1.2) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    r = np.hypot(yy - cy, xx - cx)
    return np.clip(1.0 - np.abs(r - radius) / width, 0.0, 1.0)


def _plus(arm: float, cy: float, cx: float, width: float = 1.2) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    d = np.minimum(np.where(dy <= arm, dx, np.inf), np.where(dx <= arm, dy, np.inf))
    return np.clip(1.0 - d / width, 0.0, 1.0)


def patch_cue(label: int, patch=DEFAULT_PATCH) -> np.ndarray:
    """Faint class-correlated texture inside the patch rectangle.

    Class 0 carries horizontal lines on alternate rows, class 1 vertical
    lines on alternate columns.
    """
    r, c, h, w = patch
    cue = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    if label == 0:
        cue[r:r + h:2, c:c + w] = 1.0
    elif label == 1:
        cue[r:r + h, c:c + w:2] = 1.0
    else:
        raise ValueError("label must be 0 or 1")
    return cue


def patch_class_template(label: int) -> np.ndarray:
    """Noise-free class shape at its mean size and position: ring (0) or plus (1)."""
    if label == 0:
        return _ring(2.6, SHAPE_CENTRE[0], SHAPE_CENTRE[1])
    if label == 1:
        return _plus(2.6, SHAPE_CENTRE[0], SHAPE_CENTRE[1])
    raise ValueError("label must be 0 or 1")


def make_patch_dataset(n: int, seed: int = 0, noise: float = 0.05,
                       contrast: tuple[float, float] = PATCH_CONTRAST,
                       cue_contrast: tuple[float, float] = CUE_CONTRAST) -> PatchImageSet:
    """Small rings (class 0) and pluses (class 1) below a faint class cue in the patch region.

    Shape size ~ U(2.2, 3.0), centre jitter ~ U(-1, 1) per axis, stroke
    intensity ~ U(*contrast), cue intensity ~ U(*cue_contrast), then
    Gaussian pixel noise of scale ``noise``, clipped to [0, 1].
    """
    if n < 2 * MIN_PER_CLASS:
        raise ValueError(f"need at least {2 * MIN_PER_CLASS} samples")
    rng = Rng(seed).spawn("patches")
    labels = _balanced_labels(n, 2, rng).astype(np.int64)
    shift = rng.uniform(-1.0, 1.0, size=(n, 2))
    size = rng.uniform(2.2, 3.0, size=n)
    strength = rng.uniform(*contrast, size=n)
    cue_strength = rng.uniform(*cue_contrast, size=n)
    cues = np.stack([patch_cue(0), patch_cue(1)])
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE))
    for i in range(n):
        cy, cx = SHAPE_CENTRE[0] + shift[i, 0], SHAPE_CENTRE[1] + shift[i, 1]
        shape = _ring(size[i], cy, cx) if labels[i] == 0 else _plus(size[i], cy, cx)
        images[i] = strength[i] * shape + cue_strength[i] * cues[labels[i]]
    images = np.clip(images + noise * rng.normal(size=images.shape), 0.0, 1.0)
    return PatchImageSet(images[:, None], labels)


def template_overlap(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of two thresholded templates."""
    ma, mb = a > threshold, b > threshold
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


# -- portable graymap -----------------------------------------------------------

def tile_images(images: np.ndarray, cols: int = 10, pad: int = 1) -> np.ndarray:
    """Arrange (N, [1,] H, W) images into a single 2-D mosaic."""
    images = np.asarray(images).reshape(len(images), *np.asarray(images).shape[-2:])
    n, h, w = images.shape
    rows = -(-n // cols)
    out = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        out[pad + r * (h + pad): pad + r * (h + pad) + h, pad + c * (w + pad): pad + c * (w + pad) + w] = img
    return out


def write_pgm(path, image: np.ndarray, binary: bool = True) -> Path:
    """Write a 2-D [0, 1] array as an 8-bit P5 (binary) or P2 (ASCII) graymap."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D image")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    else:
        lines = [" ".join(str(v) for v in row) for row in pix]
        path.write_text(f"P2\n{w} {h}\n255\n" + "\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError("not a P2/P5 graymap")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if magic == b"P5":
        pix = np.frombuffer(raw[pos + 1: pos + 1 + w * h], dtype=np.uint8)
    else:
        pix = np.array(raw[pos:].split(), dtype=np.int64)
    return pix.reshape(h, w).astype(np.float64) / maxval
