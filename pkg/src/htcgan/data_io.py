"""Volume/slice ingestion: minimal NIfTI-1 I/O, normalization, slice
extraction, bbox cropping, and synthetic phantom generation.

The raw dataset format used throughout is a directory with ``meta.json``
plus per-image little-endian float32 ``img_XXXX.raw`` and uint8
``lbl_XXXX.raw`` files (C row-major order).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CorruptFileError,
    DegenerateVolumeError,
    ShapeError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
)

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_SINGLE = b"n+1\x00"
NIFTI_MAGIC_PAIR = b"ni1\x00"
DTYPE_INT16 = 4
DTYPE_FLOAT32 = 16


class Modality(str, Enum):
    FLAIR = "FLAIR"
    T1 = "T1"
    T1C = "T1c"
    T2 = "T2"
    PHANTOM = "PHANTOM"
    HTC = "HTC"


@dataclass
class Volume:
    """3D intensity volume with voxel spacing and nonzero (brain) mask."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality = Modality.PHANTOM
    brain_mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got {self.data.ndim}D")
        if self.brain_mask is None:
            self.brain_mask = self.data != 0
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.brain_mask.shape != self.data.shape:
            raise ShapeError("brain_mask shape differs from data shape")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


@dataclass
class LabeledSlice:
    """2D image + integer label map; the unit of training and evaluation."""

    image: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    modality: Modality = Modality.PHANTOM

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.image.shape != self.labels.shape:
            raise ShapeError(
                f"image {self.image.shape} and labels {self.labels.shape} differ"
            )
        if self.image.ndim != 2:
            raise ShapeError("slices must be 2D")


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounds of a rectangular region."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate bbox {self}")

    def expanded(self, margin: int, shape: tuple[int, int]) -> "BBox":
        """Grow by `margin` pixels on all sides, clipped to `shape`."""
        return BBox(
            max(0, self.row_min - margin),
            max(0, self.col_min - margin),
            min(shape[0] - 1, self.row_max + margin),
            min(shape[1] - 1, self.col_max + margin),
        )

    @property
    def center(self) -> tuple[int, int]:
        return ((self.row_min + self.row_max) // 2, (self.col_min + self.col_max) // 2)


@dataclass(frozen=True)
class CropWindow:
    """Square output window; origin may be negative when the source image
    is smaller than the window (zero padding)."""

    row0: int
    col0: int
    size: int

    def to_global(self, row: int, col: int) -> tuple[int, int]:
        return (row + self.row0, col + self.col0)

    def to_local(self, row: int, col: int) -> tuple[int, int]:
        return (row - self.row0, col - self.col0)


@dataclass
class PhantomSpec:
    """Recipe for a deterministic nested-ellipse phantom dataset.

    `source_means`/`source_stds` give the per-class intensity Normal
    parameters, index 0 = background, index k = k-th nested region.
    """

    count: int
    size: int
    num_regions: int
    source_means: Sequence[float]
    source_stds: Sequence[float]
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.num_regions < 1:
            raise ValueError("num_regions must be >= 1")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if len(self.source_means) != self.num_regions + 1:
            raise ValueError(
                f"need {self.num_regions + 1} class means, got {len(self.source_means)}"
            )
        if len(self.source_stds) != self.num_regions + 1:
            raise ValueError(
                f"need {self.num_regions + 1} class stds, got {len(self.source_stds)}"
            )
        if any(s <= 0 for s in self.source_stds):
            raise ValueError("source_stds must be positive")


# ---------------------------------------------------------------------------
# NIfTI-1 (minimal: single-file, float32/int16, <=3 significant dims)
# ---------------------------------------------------------------------------

def _parse_header(raw: bytes):
    """Return (byte order char, dim, datatype, bitpix, pixdim, vox_offset,
    scl_slope, scl_inter)."""
    magic = raw[344:348]
    if magic == NIFTI_MAGIC_PAIR:
        raise UnsupportedFormatError("two-file NIfTI (magic 'ni1') is not supported")
    if magic != NIFTI_MAGIC_SINGLE:
        raise UnsupportedFormatError(f"not a NIfTI-1 file (magic {magic!r})")
    for order in ("<", ">"):
        dim = struct.unpack(order + "8h", raw[40:56])
        if 1 <= dim[0] <= 7:
            break
    else:
        raise CorruptFileError("implausible dim[0] under either byte order")
    (datatype, bitpix) = struct.unpack(order + "2h", raw[70:74])
    pixdim = struct.unpack(order + "8f", raw[76:108])
    (vox_offset, scl_slope, scl_inter) = struct.unpack(order + "3f", raw[108:120])
    return order, dim, datatype, bitpix, pixdim, vox_offset, scl_slope, scl_inter


def load_nifti(path: str | Path, modality: Modality = Modality.FLAIR) -> Volume:
    """Read a single-file NIfTI-1 volume (float32 or int16 payload).

    Applies the scl_slope/scl_inter scaling rule and builds the brain
    mask from nonzero voxels.
    """
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise CorruptFileError(f"{path}: file shorter than the 348-byte header")
    order, dim, datatype, bitpix, pixdim, vox_offset, slope, inter = _parse_header(raw)
    if datatype not in (DTYPE_INT16, DTYPE_FLOAT32):
        raise UnsupportedDatatypeError(f"datatype {datatype} not supported")
    ndim = dim[0]
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormatError(f"more than 3 significant dims: {dim[: ndim + 1]}")
    shape = tuple(max(1, d) for d in dim[1:4])
    np_dtype = np.dtype(order + ("i2" if datatype == DTYPE_INT16 else "f4"))
    offset = int(round(vox_offset))
    if offset < NIFTI_HEADER_SIZE:
        offset = NIFTI_HEADER_SIZE
    count = int(np.prod(shape))
    if len(raw) < offset + count * np_dtype.itemsize:
        raise CorruptFileError(f"{path}: payload truncated")
    data = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = (np.float32(slope) * data + np.float32(inter)).astype(np.float32)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(data=data, spacing=spacing, modality=modality)


def save_nifti(path: str | Path, vol: Volume) -> None:
    """Write a little-endian float32 single-file NIfTI-1 image."""
    header = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *vol.data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, DTYPE_FLOAT32, 32)
    struct.pack_into("<8f", header, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", header, 108, 352.0, 1.0, 0.0)  # vox_offset, slope, inter
    descrip = f"htcgan {vol.modality.value}".encode()[:79]
    header[148 : 148 + len(descrip)] = descrip
    header[344:348] = NIFTI_MAGIC_SINGLE
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")  # no extensions, pad to vox_offset 352
        fh.write(np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes())


# ---------------------------------------------------------------------------
# Normalization and slicing
# ---------------------------------------------------------------------------

def normalize_volume(vol: Volume) -> Volume:
    """Standardize intensities over the brain region (mean 0, std 1);
    voxels outside the mask are set to zero."""
    mask = vol.brain_mask
    if not mask.any():
        raise DegenerateVolumeError("empty brain mask")
    values = vol.data[mask].astype(np.float64)
    mu = values.mean()
    sd = values.std()
    if sd <= 0:
        raise DegenerateVolumeError("zero intensity variance over brain region")
    out = np.zeros_like(vol.data, dtype=np.float32)
    out[mask] = ((vol.data[mask] - mu) / sd).astype(np.float32)
    return Volume(out, vol.spacing, vol.modality, mask.copy())


def to_unit_range(image: np.ndarray) -> np.ndarray:
    """Affinely map a slice to [0, 1] (network input range); constant
    slices map to zero."""
    image = np.asarray(image, dtype=np.float32)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def _center_origin(extent: int, out_size: int) -> int:
    # (extent - out) // 2 also yields the symmetric negative origin when
    # the image is smaller than the window
    return (extent - out_size) // 2


def _extract_window(arr: np.ndarray, win: CropWindow, fill=0) -> np.ndarray:
    out = np.full((win.size, win.size), fill, dtype=arr.dtype)
    r0, c0 = win.row0, win.col0
    src_r = slice(max(0, r0), min(arr.shape[0], r0 + win.size))
    src_c = slice(max(0, c0), min(arr.shape[1], c0 + win.size))
    dst_r = slice(src_r.start - r0, src_r.stop - r0)
    dst_c = slice(src_c.start - c0, src_c.stop - c0)
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def compute_crop_window(
    shape: tuple[int, int], bbox: BBox, out_size: int, margin: int
) -> CropWindow:
    """Window of out_size**2 centered on the margin-expanded bbox, shifted
    to stay in bounds (or symmetric when the image is smaller)."""
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    box = bbox.expanded(margin, shape)
    origins = []
    for center, extent in zip(box.center, shape):
        start = center - out_size // 2
        if extent >= out_size:
            start = max(0, min(start, extent - out_size))
        else:
            start = _center_origin(extent, out_size)
        origins.append(start)
    return CropWindow(origins[0], origins[1], out_size)


def crop_to_bbox(
    slc: LabeledSlice, bbox: BBox, out_size: int, margin: int = 0
) -> LabeledSlice:
    """Crop image and labels identically around a bounding box.

    Output is exactly out_size x out_size, zero-padded where the window
    leaves the image.
    """
    shape = slc.image.shape
    if not (0 <= bbox.row_min and bbox.row_max < shape[0]
            and 0 <= bbox.col_min and bbox.col_max < shape[1]):
        raise ValueError(f"bbox {bbox} exceeds image shape {shape}")
    win = compute_crop_window(shape, bbox, out_size, margin)
    return LabeledSlice(
        image=_extract_window(slc.image, win),
        labels=_extract_window(slc.labels, win),
        spacing=slc.spacing,
        modality=slc.modality,
    )


def extract_slices(
    vol: Volume,
    labels: Volume,
    min_nonzero_frac: float,
    patch_size: int,
) -> list[LabeledSlice]:
    """Axial slices whose nonzero fraction (on the full slice, before
    cropping) reaches min_nonzero_frac, center-cropped/padded to
    patch_size."""
    if vol.data.shape != labels.data.shape:
        raise ShapeError("intensity and label volumes differ in shape")
    if not 0.0 <= min_nonzero_frac <= 1.0:
        raise ValueError("min_nonzero_frac must lie in [0, 1]")
    out = []
    for z in range(vol.data.shape[2]):
        img = vol.data[:, :, z]
        frac = np.count_nonzero(img) / img.size
        if frac < min_nonzero_frac:
            continue
        win = CropWindow(
            _center_origin(img.shape[0], patch_size),
            _center_origin(img.shape[1], patch_size),
            patch_size,
        )
        out.append(
            LabeledSlice(
                image=_extract_window(img, win),
                labels=_extract_window(labels.data[:, :, z].astype(np.int32), win),
                spacing=(vol.spacing[0], vol.spacing[1]),
                modality=vol.modality,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

def _ellipse_mask(size, center, axes):
    rr, cc = np.mgrid[0:size, 0:size]
    return ((rr - center[0]) / axes[0]) ** 2 + ((cc - center[1]) / axes[1]) ** 2 <= 1.0


def _nested_region_masks(rng: np.random.Generator, size: int, num_regions: int):
    center = size / 2 + rng.uniform(-0.06, 0.06, size=2) * size
    axes = rng.uniform(0.26, 0.36, size=2) * size
    masks = [_ellipse_mask(size, center, axes)]
    for _ in range(num_regions - 1):
        center = center + rng.uniform(-0.08, 0.08, size=2) * axes
        axes = axes * rng.uniform(0.50, 0.65)
        inner = _ellipse_mask(size, center, axes) & masks[-1]
        if not inner.any():  # jitter pushed the ellipse out; fall back concentric
            rows, cols = masks[-1].nonzero()
            center = np.array([rows.mean(), cols.mean()])
            inner = _ellipse_mask(size, center, axes) & masks[-1]
        masks.append(inner)
    return masks


def generate_phantom(spec: PhantomSpec) -> list[tuple[LabeledSlice, int]]:
    """Deterministic nested-ellipse phantom set.

    Returns (slice, target_index) pairs; target_index points at another
    image whose labels supply the unpaired HTC target, never the image
    itself (except in the degenerate count=1 case).
    """
    shift = max(1, spec.count // 2)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        masks = _nested_region_masks(rng, spec.size, spec.num_regions)
        labels = np.zeros((spec.size, spec.size), dtype=np.int32)
        for k, m in enumerate(masks, start=1):
            labels[m] = k
        image = np.empty((spec.size, spec.size), dtype=np.float64)
        for c in range(spec.num_regions + 1):
            sel = labels == c
            image[sel] = rng.normal(spec.source_means[c], spec.source_stds[c], sel.sum())
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        target = (i + shift) % spec.count
        out.append((LabeledSlice(image=image, labels=labels), target))
    return out


# ---------------------------------------------------------------------------
# Raw dataset directory format
# ---------------------------------------------------------------------------

def save_slices(
    out_dir: str | Path,
    slices: Sequence[LabeledSlice],
    seed: int | None = None,
    spec: dict | None = None,
) -> dict:
    """Write slices as meta.json + img_XXXX.raw (LE float32) + lbl_XXXX.raw
    (uint8). Returns the meta dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not slices:
        raise ValueError("no slices to save")
    shape = slices[0].image.shape
    label_set = sorted({int(v) for s in slices for v in np.unique(s.labels)})
    meta = {
        "count": len(slices),
        "shape": list(shape),
        "spacing": list(slices[0].spacing),
        "modality": slices[0].modality.value,
        "label_set": label_set,
        "seed": seed,
        "spec": spec,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i, s in enumerate(slices):
        if s.image.shape != shape:
            raise ShapeError("all slices in a dataset must share one shape")
        (out_dir / f"img_{i:04d}.raw").write_bytes(
            np.asarray(s.image, dtype="<f4").tobytes()
        )
        (out_dir / f"lbl_{i:04d}.raw").write_bytes(
            np.asarray(s.labels, dtype=np.uint8).tobytes()
        )
    return meta


def load_slices(in_dir: str | Path) -> tuple[list[LabeledSlice], dict]:
    """Read a raw dataset directory written by save_slices."""
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "meta.json").read_text())
    shape = tuple(meta["shape"])
    spacing = tuple(meta["spacing"])
    modality = Modality(meta["modality"])
    slices = []
    for i in range(meta["count"]):
        img = np.frombuffer(
            (in_dir / f"img_{i:04d}.raw").read_bytes(), dtype="<f4"
        ).reshape(shape)
        lbl = np.frombuffer(
            (in_dir / f"lbl_{i:04d}.raw").read_bytes(), dtype=np.uint8
        ).reshape(shape)
        slices.append(
            LabeledSlice(
                image=img.astype(np.float32),
                labels=lbl.astype(np.int32),
                spacing=spacing,
                modality=modality,
            )
        )
    return slices, meta
