"""Dataset containers, IDX import, scarcity subsampling, batch iteration and synthetic data."""

from __future__ import annotations

import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from jade.latent import N_CLASSES

log = logging.getLogger(__name__)

CONTAINER_MAGIC = b"JADC"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHBB4IB")
_U32_MAX = 2**32 - 1
_MAX_ELEMENTS = 2**40

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "test")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class DimensionOverflowError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class MissingClassError(ValueError):
    def __init__(self, label: int, message: str):
        super().__init__(message)
        self.label = label


@dataclass(frozen=True, eq=False)
class DatasetContainer:
    """Labelled images stored as uint8 NHWC with labels 0..9."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels).reshape(-1)
        if images.dtype != np.uint8 or images.ndim != 4:
            raise ValueError(f"images must be a uint8 (N, H, W, C) array, got {images.dtype} {images.shape}")
        if labels.shape[0] != images.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES})")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    def __len__(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetContainer):
            return NotImplemented
        return (
            self.name == other.name
            and self.split == other.split
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalized(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def subset(self, indices, name: str | None = None) -> "DatasetContainer":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetContainer(self.images[indices], self.labels[indices], name or self.name, self.split)


# --- container files ---------------------------------------------------------


def _atomic_write(path: Path, chunks) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)


def container_bytes(container: DatasetContainer) -> list[bytes]:
    n, h, w, c = container.images.shape
    if max(n, h, w, c) > _U32_MAX:
        raise DimensionOverflowError(f"dimension exceeds u32: {container.images.shape}")
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, 0, 4, n, h, w, c, 0)
    return [header, np.ascontiguousarray(container.images).tobytes(), container.labels.tobytes()]


def save_container(container: DatasetContainer, path) -> Path:
    path = Path(path)
    _atomic_write(path, container_bytes(container))
    return path


def load_container(path, name: str | None = None, split: str = "train") -> DatasetContainer:
    """Read a JADC file. ``name`` defaults to the file stem."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != CONTAINER_MAGIC:
        raise BadMagicError(f"{path}: not a JADC container")
    if len(raw) < _HEADER.size:
        raise TruncatedContainerError(f"{path}: header truncated")
    magic, version, dtype, ndim, n, h, w, c, label_dtype = _HEADER.unpack_from(raw)
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    if dtype != 0 or label_dtype != 0 or ndim != 4:
        raise ContainerError(f"{path}: unsupported dtype/ndim ({dtype}, {label_dtype}, {ndim})")
    n_pixels = n * h * w * c
    if n_pixels > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: {n}x{h}x{w}x{c} exceeds the supported size")
    expected = _HEADER.size + n_pixels + n
    if len(raw) < expected:
        raise TruncatedContainerError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise ContainerError(f"{path}: {len(raw) - expected} trailing bytes")
    images = np.frombuffer(raw, np.uint8, n_pixels, _HEADER.size).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, np.uint8, n, _HEADER.size + n_pixels).copy()
    return DatasetContainer(images, labels, name if name is not None else path.stem, split)


class ManifestEntry(NamedTuple):
    name: str
    split: str
    path: Path


def write_manifest(entries, path) -> Path:
    """One ``name=<n> split=<s> path=<p>`` line per container, paths relative to the manifest."""
    path = Path(path)
    lines = []
    for e in sorted(entries, key=lambda e: (e.name, e.split)):
        rel = os.path.relpath(Path(e.path).resolve(), path.resolve().parent)
        lines.append(f"name={e.name} split={e.split} path={rel}\n")
    _atomic_write(path, [("".join(lines)).encode()])
    return path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        missing = {"name", "split", "path"} - fields.keys()
        if missing:
            raise ValueError(f"{path}:{lineno}: missing {sorted(missing)}")
        entries.append(ManifestEntry(fields["name"], fields["split"], path.parent / fields["path"]))
    return entries


def merge_manifest(path, new_entries) -> Path:
    path = Path(path)
    current = {(e.name, e.split): e for e in (read_manifest(path) if path.exists() else [])}
    for e in new_entries:
        current[(e.name, e.split)] = e
    return write_manifest(current.values(), path)


def load_from_manifest(manifest, name: str, split: str) -> DatasetContainer:
    for e in read_manifest(manifest):
        if e.name == name and e.split == split:
            return load_container(e.path, name=name, split=split)
    raise KeyError(f"{manifest}: no entry for name={name} split={split}")


# --- MNIST IDX ---------------------------------------------------------------


def _read_maybe_gzip(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (EOFError, OSError) as err:
            raise IdxTruncatedError(f"{path}: corrupt gzip stream ({err})") from err
    return raw


def _parse_idx(path: Path, magic: int) -> np.ndarray:
    raw = _read_maybe_gzip(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, np.uint8, size, header).reshape(dims).copy()


def import_mnist_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> DatasetContainer:
    """Big-endian IDX image/label pair (optionally gzipped) -> container of shape (N, H, W, 1)."""
    images = _parse_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _parse_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    return DatasetContainer(images[..., None], labels, name, split)


def write_idx(array: np.ndarray, path, compress: bool = False) -> Path:
    """Write a uint8 array in IDX format; used to build fixtures."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path = Path(path)
    path.write_bytes(payload)
    return path


# --- sampling and iteration --------------------------------------------------


def subsample_per_class(container: DatasetContainer, n_per_class: int, seed: int) -> DatasetContainer:
    """Exactly ``n_per_class`` examples of each class, drawn without replacement, shuffled."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(N_CLASSES):
        pool = np.flatnonzero(container.labels == k)
        if pool.size < n_per_class:
            raise MissingClassError(k, f"class {k} has {pool.size} examples, {n_per_class} requested")
        chosen.append(rng.choice(pool, n_per_class, replace=False))
    order = rng.permutation(np.concatenate(chosen))
    return container.subset(order)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


class PairedBatch(NamedTuple):
    """Class-matched primary/auxiliary examples; row i of each side forms one pair."""

    x_images: np.ndarray
    x_labels: np.ndarray
    y_images: np.ndarray
    y_labels: np.ndarray
    x_indices: np.ndarray
    y_indices: np.ndarray

    @property
    def pair_map(self) -> list[tuple[int, int]]:
        return [(i, i) for i in range(len(self.x_labels))]


def batch_iterator(container: DatasetContainer, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """One epoch in an order fixed by (seed, epoch); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(container), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(container.images[idx], container.labels[idx], idx)


def paired_class_matched_iterator(
    primary: DatasetContainer, auxiliary: DatasetContainer, batch_size: int, seed: int, epoch: int
) -> Iterator[PairedBatch]:
    """One epoch over ``primary``; each example gets a uniformly drawn same-class auxiliary partner.

    The primary order matches :func:`batch_iterator` for the same (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(primary), seed, epoch)
    x_labels = primary.labels[order]
    partners = np.empty(len(order), dtype=np.int64)
    rng = np.random.default_rng([seed, epoch, 1])
    for k in range(N_CLASSES):
        slots = np.flatnonzero(x_labels == k)
        if slots.size == 0:
            continue
        pool = np.flatnonzero(auxiliary.labels == k)
        if pool.size == 0:
            raise MissingClassError(k, f"class {k} is absent from the auxiliary dataset {auxiliary.name!r}")
        partners[slots] = pool[rng.integers(0, pool.size, size=slots.size)]
    for start in range(0, len(order), batch_size):
        xi = order[start:start + batch_size]
        yi = partners[start:start + batch_size]
        yield PairedBatch(
            primary.images[xi], primary.labels[xi], auxiliary.images[yi], auxiliary.labels[yi], xi, yi
        )


# --- synthetic two-domain data -------------------------------------------------

_GLYPH_GRID = 4


def glyph_templates(size: int = 16, cell: int = 3) -> np.ndarray:
    """Ten binary (size x size) glyphs with pairwise Hamming distance >= 8 cells.

    Each glyph is a non-constant affine Boolean function on the 4x4 cell grid
    (a first-order Reed-Muller codeword), drawn as ``cell``-pixel squares.
    """
    coeffs = [(1, 0, 0, 1), (0, 1, 1, 0), (1, 1, 0, 0), (0, 0, 1, 1), (1, 0, 1, 0),
              (0, 1, 0, 1), (1, 1, 1, 0), (0, 1, 1, 1), (1, 0, 1, 1), (1, 1, 0, 1)]
    offsets = [0, 1, 0, 1, 1, 0, 0, 1, 1, 0]
    rows, cols = np.divmod(np.arange(_GLYPH_GRID**2), _GLYPH_GRID)
    bits = np.stack([rows >> 1, rows & 1, cols >> 1, cols & 1], axis=1)
    margin = (size - _GLYPH_GRID * cell) // 2
    out = np.zeros((N_CLASSES, size, size), dtype=np.uint8)
    for k, (a, b) in enumerate(zip(coeffs, offsets)):
        cells = ((bits @ np.array(a)) + b) % 2
        pattern = np.kron(cells.reshape(_GLYPH_GRID, _GLYPH_GRID), np.ones((cell, cell), dtype=np.uint8))
        out[k, margin:margin + pattern.shape[0], margin:margin + pattern.shape[1]] = pattern
    return out


@dataclass(frozen=True)
class DomainStyle:
    """Nuisance factors used to render one domain."""

    color: bool
    rotation_deg: float
    shift_px: float
    scale_range: tuple[float, float]
    brightness: tuple[float, float]
    background: tuple[float, float]
    contrast_min: float
    noise_std: float
    invert_prob: float = 0.0


PRIMARY_STYLE = DomainStyle(
    color=True, rotation_deg=25.0, shift_px=1.5, scale_range=(0.85, 1.15), brightness=(-0.15, 0.15),
    background=(0.0, 1.0), contrast_min=0.3, noise_std=0.08, invert_prob=0.0,
)
AUXILIARY_STYLE = DomainStyle(
    color=False, rotation_deg=10.0, shift_px=1.0, scale_range=(0.95, 1.05), brightness=(0.0, 0.0),
    background=(0.0, 0.1), contrast_min=0.6, noise_std=0.03,
)


@dataclass(frozen=True)
class SynthConfig:
    n_per_class_primary: int = 1000
    n_per_class_auxiliary: int = 5000
    primary_shape: tuple[int, int, int] = (16, 16, 3)
    auxiliary_shape: tuple[int, int, int] = (16, 16, 1)
    primary_style: DomainStyle = PRIMARY_STYLE
    auxiliary_style: DomainStyle = AUXILIARY_STYLE
    seed: int = 0
    classes: int = N_CLASSES

    def __post_init__(self):
        if self.n_per_class_primary < 1 or self.n_per_class_auxiliary < 1:
            raise ValueError("per-class counts must be >= 1")
        if self.classes != N_CLASSES:
            raise ValueError(f"synthetic data always has {N_CLASSES} classes")
        if self.primary_shape[:2] != self.auxiliary_shape[:2] or self.primary_shape[2] != 3 \
                or self.auxiliary_shape[2] != 1:
            raise ValueError("synthetic shapes are (S, S, 3) for the primary and (S, S, 1) for the auxiliary domain")


def _warp_explicit(templates, labels, theta, scale, shift) -> np.ndarray:
    """Rotate/scale/shift each label's template with bilinear sampling -> float masks in [0, 1]."""
    n = labels.shape[0]
    size = templates.shape[1]
    centre = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size) - centre, np.arange(size) - centre, indexing="ij")
    cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    # inverse map: output pixel -> template coordinate
    u = yy[None] - shift[:, 0, None, None]
    v = xx[None] - shift[:, 1, None, None]
    src_y = (cos * u + sin * v) / scale[:, None, None] + centre
    src_x = (-sin * u + cos * v) / scale[:, None, None] + centre
    y0, x0 = np.floor(src_y).astype(np.int64), np.floor(src_x).astype(np.int64)
    fy, fx = src_y - y0, src_x - x0
    padded = np.pad(templates.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    t = padded[labels]
    batch = np.arange(n)[:, None, None]

    def at(y, x):
        return t[batch, np.clip(y + 1, 0, size + 1), np.clip(x + 1, 0, size + 1)]

    return (at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx
            + at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx)


def _warp(templates: np.ndarray, labels: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    theta = np.deg2rad(rng.uniform(-style.rotation_deg, style.rotation_deg, n))
    scale = rng.uniform(*style.scale_range, n)
    shift = rng.uniform(-style.shift_px, style.shift_px, (n, 2))
    return _warp_explicit(templates, labels, theta, scale, shift)


def _colours(n: int, style: DomainStyle, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    channels = 3 if style.color else 1
    lo, hi = style.background
    bg = rng.uniform(lo, hi, (n, channels))
    if style.color:
        fg = rng.uniform(0.0, 1.0, (n, channels))
        luma = np.array([0.299, 0.587, 0.114])
        # push the glyph away from the background until the luminance gap is large enough
        gap = (fg - bg) @ luma
        need = np.abs(gap) < style.contrast_min
        direction = np.where(gap >= 0, 1.0, -1.0)
        fg[need] = np.clip(bg[need] + direction[need, None] * style.contrast_min * 1.2
                           + rng.uniform(-0.1, 0.1, (need.sum(), channels)), 0.0, 1.0)
    else:
        fg = rng.uniform(max(lo + style.contrast_min, 0.0), 1.0, (n, channels))
    return fg, bg


def _render(labels: np.ndarray, templates: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    mask = _warp(templates, labels, style, rng)[..., None]
    fg, bg = _colours(labels.shape[0], style, rng)
    if style.invert_prob:
        flip = rng.random(labels.shape[0]) < style.invert_prob
        fg[flip], bg[flip] = bg[flip].copy(), fg[flip].copy()
    img = bg[:, None, None, :] * (1.0 - mask) + fg[:, None, None, :] * mask
    img = img + rng.uniform(*style.brightness, labels.shape[0])[:, None, None, None]
    img = img + rng.normal(0.0, style.noise_std, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


class SyntheticPair(NamedTuple):
    primary_train: DatasetContainer
    primary_test: DatasetContainer
    auxiliary_train: DatasetContainer
    auxiliary_test: DatasetContainer

    def containers(self) -> list[DatasetContainer]:
        return list(self)


def _balanced_labels(n_per_class: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(N_CLASSES, dtype=np.uint8), n_per_class))


def generate_synthetic_pair(config: SynthConfig = SynthConfig()) -> SyntheticPair:
    """Render both domains from the shared glyph templates, train and test splits each.

    Class identity (the glyph) is shared content; colour, brightness, background,
    geometry and noise are domain-specific style.
    """
    size = config.primary_shape[0]
    templates = glyph_templates(size)
    out = []
    for domain, (style, n_per_class, stream) in {
        "synth-primary": (config.primary_style, config.n_per_class_primary, 0),
        "synth-auxiliary": (config.auxiliary_style, config.n_per_class_auxiliary, 1),
    }.items():
        for split_id, split in enumerate(SPLITS):
            rng = np.random.default_rng([config.seed, stream, split_id])
            labels = _balanced_labels(n_per_class, rng)
            out.append(DatasetContainer(_render(labels, templates, style, rng), labels, domain, split))
    return SyntheticPair(*out)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=1, keepdims=True)
    return a / (np.linalg.norm(a, axis=1, keepdims=True) + 1e-12)


def nearest_template_predict(
    container: DatasetContainer, max_rotation_deg: float = 25.0, step_deg: float = 5.0, max_shift: int = 1
) -> np.ndarray:
    """Template-matching oracle that knows the glyphs but not the style.

    Each image is projected onto its principal colour axis, then scored by the
    largest absolute correlation with any template over a grid of rotations
    and integer shifts.
    """
    n = len(container)
    size = container.image_shape[0]
    templates = glyph_templates(size)
    pixels = container.normalized().reshape(n, -1, container.image_shape[2])
    pixels = pixels - pixels.mean(axis=1, keepdims=True)
    if pixels.shape[2] > 1:
        _, vecs = np.linalg.eigh(np.einsum("npi,npj->nij", pixels, pixels))
        gray = np.einsum("npi,ni->np", pixels, vecs[:, :, -1])
    else:
        gray = pixels[..., 0]
    gray = _unit_rows(gray)
    angles = np.deg2rad(np.arange(-max_rotation_deg, max_rotation_deg + 1e-9, step_deg))
    shifts = [(dy, dx) for dy in range(-max_shift, max_shift + 1) for dx in range(-max_shift, max_shift + 1)]
    labels = np.tile(np.arange(N_CLASSES), len(angles) * len(shifts))
    theta = np.repeat(np.tile(angles, len(shifts)), N_CLASSES)
    shift = np.repeat(np.repeat(np.array(shifts, dtype=np.float64), len(angles), axis=0), N_CLASSES, axis=0)
    bank = _warp_explicit(templates, labels, theta, np.ones_like(theta), shift).reshape(len(labels), -1)
    scores = np.abs(gray @ _unit_rows(bank).T).reshape(n, -1, N_CLASSES).max(axis=1)
    return np.argmax(scores, axis=1)


def nearest_template_error(container: DatasetContainer) -> float:
    return float(np.mean(nearest_template_predict(container) != container.labels))
