"""Specklegram dataset handling.

Covers on-disk ingestion (PGM images + CSV manifest), the preprocessing
pipeline (bilinear resize, Sobel gradient magnitude, local binary
patterns, min-max normalization, channel replication), deterministic
splitting, and a synthetic modal-interference generator for end-to-end
tests without the physical dataset.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError
from .pgmio import read_pgm

TEMPERATURE_STEP = 0.2
TEMPERATURE_COUNT = 601
MANIFEST_HEADER = ("filename", "temperature_C")


@dataclass
class SpecklegramSample:
    """One specklegram image (H, W, C) in [0, 1] with its temperature."""

    image: np.ndarray
    temperature: float
    source_id: str = ""


@dataclass
class DatasetManifest:
    """Ordered (filename, temperature) records backing a dataset."""

    records: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        names = [name for name, _ in self.records]
        if len(set(names)) != len(names):
            raise DataError("manifest filenames are not unique")
        for name, temp in self.records:
            if not np.isfinite(temp):
                raise DataError(f"manifest temperature for {name!r} is not finite")

    def __len__(self) -> int:
        return len(self.records)


def temperature_of_index(i: int) -> float:
    """Temperature of the i-th grid point: 0.2 degC increments from 0."""
    if not 0 <= i <= TEMPERATURE_COUNT - 1:
        raise ContractError(f"index {i} outside [0, {TEMPERATURE_COUNT - 1}]")
    return i / 5.0


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse a ``filename,temperature_C`` CSV; an empty temperature cell
    falls back to the temperature grid at the record's index."""
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: manifest header must be "
                        f"{','.join(MANIFEST_HEADER)}")
    records: list[tuple[str, float]] = []
    for i, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) != 2 or not row[0]:
            raise DataError(f"{path}: malformed manifest row {i + 2}: {row!r}")
        name, raw_temp = row
        if raw_temp == "":
            temp = temperature_of_index(i)
        else:
            try:
                temp = float(raw_temp)
            except ValueError:
                raise DataError(f"{path}: bad temperature {raw_temp!r} "
                                f"for {name!r}") from None
        records.append((name, temp))
    return DatasetManifest(records)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        for name, temp in manifest.records:
            fh.write(f"{name},{temp!r}\n")


def load_dataset(manifest_path: str | os.PathLike, *,
                 replicate_channels: bool = False) -> list[SpecklegramSample]:
    """Load every manifest record as a sample, pixel values scaled to
    [0, 1]. All images must share one size; errors name the offending
    file. Image paths resolve relative to the manifest."""
    manifest_path = os.fspath(manifest_path)
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(manifest_path)
    samples: list[SpecklegramSample] = []
    expected_shape: tuple[int, int] | None = None
    for name, temp in manifest.records:
        img_path = os.path.join(base, name)
        raw = read_pgm(img_path)
        if expected_shape is None:
            expected_shape = raw.shape
        elif raw.shape != expected_shape:
            raise DataError(f"{img_path}: size {raw.shape} differs from "
                            f"first image {expected_shape}")
        img = raw.astype(np.float64) / 255.0
        img = img[:, :, None]
        if replicate_channels:
            img = np.repeat(img, 3, axis=2)
        samples.append(SpecklegramSample(image=img, temperature=temp,
                                         source_id=name))
    return samples


# -- preprocessing -------------------------------------------------------


@dataclass
class PreprocessConfig:
    """Pipeline order: resize -> (Sobel | LBP) -> normalize -> replicate."""

    target_size: tuple[int, int] | None = None
    apply_gradient: bool = False
    apply_lbp: bool = False
    normalize: bool = True
    replicate_channels: bool = True

    def __post_init__(self):
        if self.apply_gradient and self.apply_lbp:
            raise ConfigError("gradient and LBP are mutually exclusive "
                              "in one preprocessing pass")
        if self.target_size is not None:
            h, w = self.target_size
            if h < 1 or w < 1:
                raise ConfigError(f"target_size must be positive, got "
                                  f"{self.target_size}")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of (H, W) or (H, W, C)."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_coords(h, out_h)
    c0, c1, fc = axis_coords(w, out_w)
    fr = fr.reshape(-1, 1) if image.ndim == 2 else fr.reshape(-1, 1, 1)
    fc = fc.reshape(1, -1) if image.ndim == 2 else fc.reshape(1, -1, 1)
    top = image[np.ix_(r0, c0)] * (1 - fc) + image[np.ix_(r0, c1)] * fc
    bot = image[np.ix_(r1, c0)] * (1 - fc) + image[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _correlate3(padded: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k != 0.0:
                out += k * padded[i:i + h, j:j + w]
    return out


def sobel_gradient(image: np.ndarray, *, rescale: bool = True) -> np.ndarray:
    """Sobel gradient magnitude with replicate-border padding.

    With ``rescale`` the magnitude is min-max mapped to [0, 1]
    (all-constant output maps to zeros); otherwise raw magnitudes are
    returned, e.g. 4*s across a step edge of height s.
    """
    if image.ndim != 2:
        raise ShapeError(f"sobel_gradient needs a 2-D image, got {image.shape}")
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise ShapeError(f"image {image.shape} smaller than the 3x3 kernel")
    padded = np.pad(image, 1, mode="edge")
    gx = _correlate3(padded, _SOBEL_X)
    gy = _correlate3(padded, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    return minmax_normalize(mag) if rescale else mag


# LBP neighbor ring: top-left first, then clockwise. The first neighbor
# holds the most significant bit.
_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1),
                (1, 1), (1, 0), (1, -1), (0, -1))


def lbp(image: np.ndarray) -> np.ndarray:
    """8-neighbor local binary patterns at radius 1 (replicate borders).

    A neighbor >= center contributes a 1 bit; codes land in [0, 255].
    """
    if image.ndim != 2:
        raise ShapeError(f"lbp needs a 2-D image, got {image.shape}")
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise ShapeError(f"image {image.shape} smaller than the 3x3 neighborhood")
    h, w = image.shape
    padded = np.pad(image, 1, mode="edge")
    center = image
    codes = np.zeros((h, w), dtype=np.int64)
    for bit, (di, dj) in enumerate(_LBP_OFFSETS):
        neighbor = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        codes |= (neighbor >= center).astype(np.int64) << (7 - bit)
    return codes.astype(np.uint8)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant input maps to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo)


def preprocess(sample: SpecklegramSample, config: PreprocessConfig) -> np.ndarray:
    """Run the configured pipeline on one sample; deterministic.

    Returns an (H', W', C') float64 array; C' is 3 when
    ``replicate_channels`` is set and the working image is single-channel.
    """
    img = np.asarray(sample.image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if config.target_size is not None:
        img = resize_bilinear(img, *config.target_size)
    if config.apply_gradient or config.apply_lbp:
        gray = img[:, :, 0] if img.shape[2] == 1 else img.mean(axis=2)
        if config.apply_gradient:
            img = sobel_gradient(gray)[:, :, None]
        else:
            img = lbp(gray).astype(np.float64)[:, :, None]
    if config.normalize:
        img = minmax_normalize(img)
    if config.replicate_channels and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img.copy()


# -- splitting -----------------------------------------------------------


def split(samples: list, ratios: tuple[int, int, int] = (70, 20, 10),
          seed: int = 0) -> tuple[list, list, list]:
    """Deterministic shuffled train/val/test partition.

    Sizes follow floor(ratio * n / 100) for train and val; test takes
    the remainder. The three parts are disjoint and cover the input.
    """
    if any(r <= 0 for r in ratios) or sum(ratios) != 100:
        raise ConfigError(f"ratios must be positive and sum to 100, got {ratios}")
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = n * ratios[0] // 100
    n_val = n * ratios[1] // 100
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


# -- synthetic generator ---------------------------------------------------


@dataclass
class SyntheticConfig:
    """Multimode interference generator settings.

    Each dataset superposes ``mode_count`` fixed sinusoidal mode
    profiles with random orientations and complex amplitudes; mode m
    accumulates phase ``(beta_m + c_m * T) * fiber_length`` so the
    interference pattern drifts smoothly with temperature. ``c_m`` are
    drawn up to ``thermo_coeff_max`` rad/degC.
    """

    image_size: int = 64
    mode_count: int = 12
    amplitude_seed: int = 0
    thermo_coeff_max: float = 0.04
    fiber_length: float = 1.0
    temp_start: float = 0.0
    temp_stop: float = 120.0
    temp_step: float = 0.4
    noise_level: float = 0.0

    def __post_init__(self):
        if self.mode_count < 1:
            raise ConfigError(f"mode_count must be >= 1, got {self.mode_count}")
        if self.temp_step <= 0:
            raise ConfigError(f"temp_step must be positive, got {self.temp_step}")
        if self.image_size < 2:
            raise ConfigError(f"image_size must be >= 2, got {self.image_size}")


def temperature_grid(config: SyntheticConfig) -> np.ndarray:
    count = int(round((config.temp_stop - config.temp_start) / config.temp_step)) + 1
    return np.linspace(config.temp_start, config.temp_stop, count)


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> list[SpecklegramSample]:
    """Render one sample per temperature grid point.

    The mode basis (profiles, amplitudes, propagation constants, thermal
    coefficients) derives from ``config.amplitude_seed``; additive noise
    derives from ``seed``. Intensities are min-max normalized per image
    and, after optional noise, clipped to [0, 1].
    """
    rng = np.random.default_rng(config.amplitude_seed)
    size = config.image_size
    m = config.mode_count

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    profiles = np.zeros((m, size, size))
    for k in range(m):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        freq = rng.uniform(2.0, 10.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        profiles[k] = np.sin(2.0 * np.pi * freq *
                             (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    amps = rng.normal(size=m) + 1j * rng.normal(size=m)
    betas = rng.uniform(0.0, 2.0 * np.pi, size=m)
    thermo = rng.uniform(0.125, 1.0, size=m) * config.thermo_coeff_max

    noise_rng = np.random.default_rng(seed)
    samples: list[SpecklegramSample] = []
    for idx, temp in enumerate(temperature_grid(config)):
        phases = (betas + thermo * temp) * config.fiber_length
        field = np.tensordot(amps * np.exp(1j * phases), profiles, axes=1)
        intensity = minmax_normalize(np.abs(field) ** 2)
        if config.noise_level > 0.0:
            intensity = intensity + noise_rng.normal(0.0, config.noise_level,
                                                     size=intensity.shape)
            intensity = np.clip(intensity, 0.0, 1.0)
        samples.append(SpecklegramSample(image=intensity[:, :, None],
                                         temperature=float(temp),
                                         source_id=f"synthetic_{idx:04d}"))
    return samples


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-size images."""
    av = a.astype(np.float64).ravel()
    bv = b.astype(np.float64).ravel()
    av = av - av.mean()
    bv = bv - bv.mean()
    denom = np.sqrt((av * av).sum() * (bv * bv).sum())
    if denom == 0.0:
        return 0.0
    return float((av * bv).sum() / denom)
