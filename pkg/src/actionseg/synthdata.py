"""Synthetic class-imbalanced segmentation scenes, augmentation and file I/O.

A scene is a randomly placed stack of concentric ellipses: class 1 is the
outer ring, class ``C-1`` the innermost disk, everything else background.
Ring areas are sized so the expected pixel frequencies match the configured
targets.  Each class has its own mean intensity (jittered per image), the
image carries additive Gaussian noise, and a per-scan gain and offset mimic
acquisition differences between scans.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_NAME = "ACTNDATA"
FORMAT_VERSION = 1


class SceneConfigError(ValueError):
    pass


class DatasetError(Exception):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    frequencies: tuple[float, ...] = (0.85, 0.09, 0.04, 0.02)
    intensities: tuple[float, ...] = (0.15, 0.55, 0.35, 0.75)
    intensity_jitter: float = 0.08
    noise: float = 0.12
    size_jitter: float = 0.2
    max_eccentricity: float = 0.3
    scan_gain: float = 0.0
    scan_offset: float = 0.0
    labeled_fraction: float = 0.05

    def validate(self) -> "SceneConfig":
        C = self.num_classes
        if C < 2:
            raise SceneConfigError("need at least two classes")
        if len(self.frequencies) != C or len(self.intensities) != C:
            raise SceneConfigError("frequencies and intensities need one entry per class")
        if abs(sum(self.frequencies) - 1.0) > 1e-9 or min(self.frequencies) < 0:
            raise SceneConfigError("frequencies must be non-negative and sum to 1")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise SceneConfigError("labeled_fraction must be in (0, 1]")
        if not 0.0 <= self.size_jitter < 1.0 or not 0.0 <= self.max_eccentricity < 1.0:
            raise SceneConfigError("jitter and eccentricity must be in [0, 1)")
        if self.noise < 0:
            raise SceneConfigError("noise must be non-negative")
        if not 0.0 <= self.scan_gain < 1.0 or self.scan_offset < 0:
            raise SceneConfigError("scan_gain must be in [0, 1) and scan_offset non-negative")
        r_max = self.outer_radius() * np.sqrt(1.0 + self.size_jitter) * (1.0 + self.max_eccentricity)
        if 2 * r_max + 2 > min(self.height, self.width):
            raise SceneConfigError(
                f"structures of radius up to {r_max:.1f}px do not fit a "
                f"{self.height}x{self.width} image")
        return self

    def radii(self) -> np.ndarray:
        """Nominal outer radius of each structure class 1..C-1 (outer to inner)."""
        hw = self.height * self.width
        tail = np.cumsum(np.asarray(self.frequencies[1:])[::-1])[::-1]
        return np.sqrt(tail * hw / np.pi)

    def outer_radius(self) -> float:
        return float(self.radii()[0]) if self.num_classes > 1 else 0.0


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    is_labeled: bool = True

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError("image and label shapes differ")

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.is_labeled == other.is_labeled
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.label, other.label))


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int
    height: int = 0
    width: int = 0

    def __post_init__(self):
        if self.samples and not self.height:
            self.height, self.width = self.samples[0].image.shape

    def __len__(self):
        return len(self.samples)

    @property
    def labeled(self) -> list[Sample]:
        return [s for s in self.samples if s.is_labeled]

    def unlabeled_images(self) -> list[np.ndarray]:
        """Images of the unlabeled pool; their ground truth is not exposed."""
        return [s.image for s in self.samples if not s.is_labeled]


def sample_seed(base: int, index: int) -> int:
    return int(base) ^ int(index)


def generate_scene(cfg: SceneConfig, seed: int, is_labeled: bool = True) -> Sample:
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W, C = cfg.height, cfg.width, cfg.num_classes
    # area scale with unit mean keeps expected frequencies on target
    scale = np.sqrt(rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter))
    ecc = rng.uniform(0.0, cfg.max_eccentricity)
    angle = rng.uniform(0.0, np.pi)
    radii = cfg.radii() * scale
    a_fac, b_fac = 1.0 + ecc, 1.0 / (1.0 + ecc)
    reach = radii[0] * a_fac + 1.0
    cy = rng.uniform(reach, H - reach)
    cx = rng.uniform(reach, W - reach)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    rho = np.sqrt((u / a_fac) ** 2 + (v / b_fac) ** 2)

    label = np.zeros((H, W), dtype=np.uint8)
    for c, r in enumerate(radii, start=1):
        label[rho < r] = c

    means = np.asarray(cfg.intensities, dtype=np.float64)
    means = means + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter, size=C)
    image = means[label] + rng.normal(0.0, cfg.noise, size=(H, W)) * (cfg.noise > 0)
    # per-scan acquisition shift
    gain = 1.0 + rng.uniform(-cfg.scan_gain, cfg.scan_gain)
    offset = rng.uniform(-cfg.scan_offset, cfg.scan_offset)
    image = image * gain + offset
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, label, is_labeled)


def generate_dataset(cfg: SceneConfig, count: int, seed: int,
                     labeled_fraction: float | None = None) -> Dataset:
    """``count`` scenes with per-sample seeds ``seed ^ index``.

    The first ``round(count * labeled_fraction)`` scenes (at least one) are
    marked labeled.
    """
    frac = cfg.labeled_fraction if labeled_fraction is None else labeled_fraction
    n_lab = max(1, int(round(count * frac))) if count else 0
    samples = [generate_scene(cfg, sample_seed(seed, i), i < n_lab) for i in range(count)]
    return Dataset(samples, cfg.num_classes, cfg.height, cfg.width)


# -- augmentation ------------------------------------------------------------------

STRONG_CONTRAST = 0.1
STRONG_BRIGHTNESS = 0.05
STRONG_NOISE = 0.05


@dataclass(frozen=True)
class AugParams:
    rot90: int = 0
    flip_h: bool = False
    flip_v: bool = False
    crop: tuple[int, int, int, int] | None = None  # y0, x0, h, w
    contrast: float = 1.0
    brightness: float = 0.0
    noise_std: float = 0.0
    noise_seed: int = 0

    @property
    def geometric(self) -> "AugParams":
        return replace(self, contrast=1.0, brightness=0.0, noise_std=0.0, noise_seed=0)


def draw_augmentation(policy: str, rng, shape: tuple[int, int],
                      crop_prob: float = 0.5, min_crop: float = 0.8) -> AugParams:
    """Sample transform parameters for the ``weak`` or ``strong`` policy."""
    if policy not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation policy {policy!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    H, W = shape
    rot = int(rng.integers(4))
    fh, fv = bool(rng.integers(2)), bool(rng.integers(2))
    crop = None
    if rng.random() < crop_prob:
        s = rng.uniform(min_crop, 1.0)
        ch, cw = max(1, int(round(H * s))), max(1, int(round(W * s)))
        crop = (int(rng.integers(H - ch + 1)), int(rng.integers(W - cw + 1)), ch, cw)
    if policy == "weak":
        return AugParams(rot, fh, fv, crop)
    # kept well inside the spacing between class intensities
    contrast = float(rng.uniform(1.0 - STRONG_CONTRAST, 1.0 + STRONG_CONTRAST))
    brightness = float(rng.uniform(-STRONG_BRIGHTNESS, STRONG_BRIGHTNESS))
    noise = float(rng.uniform(0.0, STRONG_NOISE))
    return AugParams(rot, fh, fv, crop, contrast, brightness, noise, int(rng.integers(2**31)))


def _crop_resize(a: np.ndarray, crop) -> np.ndarray:
    y0, x0, ch, cw = crop
    H, W = a.shape
    rows = y0 + np.minimum((np.arange(H) + 0.5) * ch / H, ch - 1).astype(np.int64)
    cols = x0 + np.minimum((np.arange(W) + 0.5) * cw / W, cw - 1).astype(np.int64)
    return a[np.ix_(rows, cols)]


def apply_geometry(a: np.ndarray, p: AugParams) -> np.ndarray:
    """Crop-resize (nearest), rotate, flip.  Same map for images and labels."""
    out = a
    if p.crop is not None:
        out = _crop_resize(out, p.crop)
    if p.rot90:
        out = np.rot90(out, p.rot90)
    if p.flip_h:
        out = out[:, ::-1]
    if p.flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def apply_photometric(image: np.ndarray, p: AugParams) -> np.ndarray:
    if p.contrast == 1.0 and p.brightness == 0.0 and p.noise_std == 0.0:
        return image
    img = image.astype(np.float64)
    mu = img.mean()
    out = (img - mu) * p.contrast + mu + p.brightness
    if p.noise_std > 0:
        out = out + np.random.default_rng(p.noise_seed).normal(0.0, p.noise_std, img.shape)
    out = np.clip(out, 0.0, 1.0)
    return out.astype(image.dtype)


def apply_augmentation(sample: Sample, p: AugParams) -> Sample:
    img = apply_photometric(apply_geometry(sample.image, p), p)
    return Sample(img, apply_geometry(sample.label, p), sample.is_labeled)


def augment(sample: Sample, policy: str, seed) -> Sample:
    p = draw_augmentation(policy, seed, sample.image.shape)
    return apply_augmentation(sample, p)


# -- file I/O ------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path) -> None:
    """Text header followed by little-endian float32 images and uint8 labels."""
    H, W, C = dataset.height, dataset.width, dataset.num_classes
    flags = "".join("1" if s.is_labeled else "0" for s in dataset.samples) or "-"
    header = (f"{FORMAT_NAME}\nversion {FORMAT_VERSION}\nshape {H} {W} {C}\n"
              f"count {len(dataset)}\nlabeled {flags}\n")
    buf = io.BytesIO()
    buf.write(header.encode("ascii"))
    for s in dataset.samples:
        if s.image.shape != (H, W):
            raise ValueError("all samples must share one shape")
        buf.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def _header_line(f, key: str) -> list[str]:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise TruncatedFileError(f"file ends inside the header ({key})")
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError as e:
        raise CorruptHeaderError(f"non-ascii header line for {key}") from e
    if not parts or parts[0] != key:
        raise CorruptHeaderError(f"expected header field {key!r}, got {line[:40]!r}")
    return parts[1:]


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.readline()
        if magic.rstrip(b"\n") != FORMAT_NAME.encode():
            if FORMAT_NAME.encode().startswith(magic) and not magic.endswith(b"\n"):
                raise TruncatedFileError("file ends inside the header")
            raise CorruptHeaderError("not an ACTNDATA file")
        try:
            (ver,) = _header_line(f, "version")
            version = int(ver)
            H, W, C = (int(x) for x in _header_line(f, "shape"))
            (cnt,) = _header_line(f, "count")
            count = int(cnt)
            (flags,) = _header_line(f, "labeled")
        except ValueError as e:
            raise CorruptHeaderError(f"malformed header: {e}") from e
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"file version {version}, reader supports {FORMAT_VERSION}")
        if flags == "-":
            flags = ""
        if len(flags) != count or set(flags) - {"0", "1"}:
            raise CorruptHeaderError("labeled flags disagree with record count")
        n_img, n_lab = H * W * 4, H * W
        samples = []
        for i in range(count):
            raw = f.read(n_img + n_lab)
            if len(raw) != n_img + n_lab:
                raise TruncatedFileError(f"record {i} of {count} is truncated")
            img = np.frombuffer(raw[:n_img], dtype="<f4").reshape(H, W).astype(np.float32)
            lab = np.frombuffer(raw[n_img:], dtype=np.uint8).reshape(H, W).copy()
            samples.append(Sample(img, lab, flags[i] == "1"))
        if f.read(1):
            raise CorruptHeaderError("trailing bytes after the last record")
    return Dataset(samples, C, H, W)
