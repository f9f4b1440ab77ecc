"""Dataset ingestion: the sprites archive, its conditioned derivative, and
MNIST IDX files, plus seeded batch iteration.

The sprites archive is a zip of .npy members holding 737280 binary 64x64
images and their integer factor indices. The image member is streamed in
chunks rather than loaded whole (3 GB raw) -- rows are binarized, optionally
2x2 max-pooled down to 32x32, and only then retained, so peak memory stays
near the size of the kept subset.
"""

from __future__ import annotations

import csv
import gzip
import struct
import zipfile
from dataclasses import dataclass

import numpy as np

from discondvae import checkpoint as ckpt

DSPRITES_N = 737280
DSPRITES_FACTOR_NAMES = ("shape", "scale", "orientation", "posX", "posY")
DSPRITES_CARDINALITIES = (3, 6, 40, 32, 32)

_SHAPE_SQUARE, _SHAPE_ELLIPSE, _SHAPE_HEART = 0, 1, 2
_FIXED_POSITION_INDEX = 16


class DataError(ValueError):
    pass


@dataclass
class FactorTable:
    indices: np.ndarray        # [N, F] ints
    cardinalities: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if self.indices.ndim != 2 or self.indices.shape[1] != len(self.cardinalities):
            raise DataError(
                f"factor table shape {self.indices.shape} does not match "
                f"{len(self.cardinalities)} cardinalities"
            )
        if len(self.names) != len(self.cardinalities):
            raise DataError("factor names and cardinalities differ in length")
        for col, card in enumerate(self.cardinalities):
            cmax = self.indices[:, col].max(initial=0)
            if cmax >= card:
                raise DataError(
                    f"factor {self.names[col]} has index {cmax} >= cardinality {card}"
                )

    def subset(self, mask_or_idx) -> "FactorTable":
        return FactorTable(self.indices[mask_or_idx], self.cardinalities, self.names)


@dataclass
class ImageDataset:
    images: np.ndarray                 # [N, 1, H, W]; {0,1} uint8 or [0,1] float32
    factors: FactorTable | None = None
    labels: np.ndarray | None = None   # [N] ints

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"images must be [N, 1, H, W], got {self.images.shape}")
        if self.images.shape[0] == 0:
            raise DataError("empty dataset")
        if self.factors is not None and self.factors.indices.shape[0] != self.images.shape[0]:
            raise DataError("factor row count does not match image count")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise DataError("label count does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def extent(self) -> int:
        return self.images.shape[2]


def _pool2(block: np.ndarray) -> np.ndarray:
    """2x2 max-pool on [..., H, W] with even H, W."""
    h, w = block.shape[-2], block.shape[-1]
    return block.reshape(block.shape[:-2] + (h // 2, 2, w // 2, 2)).max(axis=(-3, -1))


def _npy_header(fh):
    version = np.lib.format.read_magic(fh)
    if version == (1, 0):
        return np.lib.format.read_array_header_1_0(fh)
    if version == (2, 0):
        return np.lib.format.read_array_header_2_0(fh)
    raise DataError(f"unsupported .npy version {version}")


def _find_member(zf: zipfile.ZipFile, stem: str) -> str:
    for name in zf.namelist():
        base = name.rsplit("/", 1)[-1]
        if base == stem or base == f"{stem}.npy":
            return name
    raise DataError(f"archive has no member named {stem!r} (members: {zf.namelist()})")


def load_dsprites(path, image_extent: int = 32, keep: np.ndarray | None = None,
                  chunk: int = 8192) -> ImageDataset:
    """Stream the sprites archive into memory.

    keep: optional boolean mask [737280] selecting rows to retain (the
    factor table is still validated against the full archive).
    """
    if image_extent not in (32, 64):
        raise DataError(f"image_extent must be 32 or 64, got {image_extent}")
    with zipfile.ZipFile(path) as zf:
        with zf.open(_find_member(zf, "latents_classes")) as fh:
            classes = np.lib.format.read_array(fh)
        if classes.shape != (DSPRITES_N, 6):
            raise DataError(
                f"latents_classes has shape {classes.shape}, expected ({DSPRITES_N}, 6)"
            )
        factors = classes[:, 1:].astype(np.int64)  # drop the constant color column

        if keep is None:
            keep = np.ones(DSPRITES_N, dtype=bool)
        elif keep.shape != (DSPRITES_N,):
            raise DataError(f"keep mask has shape {keep.shape}, expected ({DSPRITES_N},)")
        n_keep = int(keep.sum())
        out = np.empty((n_keep, 1, image_extent, image_extent), dtype=np.uint8)

        with zf.open(_find_member(zf, "imgs")) as fh:
            shape, fortran, dtype = _npy_header(fh)
            if shape != (DSPRITES_N, 64, 64):
                raise DataError(f"imgs has shape {shape}, expected ({DSPRITES_N}, 64, 64)")
            if fortran:
                raise DataError("imgs member is Fortran-ordered")
            row_bytes = 64 * 64 * dtype.itemsize
            write = 0
            for start in range(0, DSPRITES_N, chunk):
                count = min(chunk, DSPRITES_N - start)
                raw = fh.read(count * row_bytes)
                if len(raw) != count * row_bytes:
                    raise DataError(f"imgs member truncated at row {start}")
                mask = keep[start : start + count]
                if not mask.any():
                    continue
                block = np.frombuffer(raw, dtype=dtype).reshape(count, 64, 64)[mask]
                block = (block > 0.5).astype(np.uint8)
                if image_extent == 32:
                    block = _pool2(block)
                out[write : write + block.shape[0], 0] = block
                write += block.shape[0]

    table = FactorTable(factors[keep], DSPRITES_CARDINALITIES, DSPRITES_FACTOR_NAMES)
    return ImageDataset(images=out, factors=table, labels=factors[keep, 0])


def condsprites_mask(factors: np.ndarray) -> np.ndarray:
    """Row filter: squares pinned in y, ellipses pinned in x, no hearts."""
    shape, pos_x, pos_y = factors[:, 0], factors[:, 3], factors[:, 4]
    squares = (shape == _SHAPE_SQUARE) & (pos_y == _FIXED_POSITION_INDEX)
    ellipses = (shape == _SHAPE_ELLIPSE) & (pos_x == _FIXED_POSITION_INDEX)
    return squares | ellipses


def build_condsprites(dsprites: ImageDataset) -> ImageDataset:
    """Conditioned two-class subset: 7680 squares + 7680 ellipses."""
    if dsprites.factors is None or len(dsprites) != DSPRITES_N:
        raise DataError(
            f"build_condsprites needs the full archive ({DSPRITES_N} rows), got {len(dsprites)}"
        )
    mask = condsprites_mask(dsprites.factors.indices)
    shape_col = dsprites.factors.indices[:, 0]
    # squares block first, then ellipses, each in original archive order
    idx = np.concatenate([
        np.flatnonzero(mask & (shape_col == _SHAPE_SQUARE)),
        np.flatnonzero(mask & (shape_col == _SHAPE_ELLIPSE)),
    ])
    return ImageDataset(
        images=dsprites.images[idx],
        factors=dsprites.factors.subset(idx),
        labels=shape_col[idx].astype(np.int64),
    )


def load_condsprites(archive_path, image_extent: int = 32) -> ImageDataset:
    """Filter while streaming so the 3 GB image member never materializes."""
    with zipfile.ZipFile(archive_path) as zf:
        with zf.open(_find_member(zf, "latents_classes")) as fh:
            classes = np.lib.format.read_array(fh)
    if classes.shape != (DSPRITES_N, 6):
        raise DataError(
            f"latents_classes has shape {classes.shape}, expected ({DSPRITES_N}, 6)"
        )
    factors = classes[:, 1:].astype(np.int64)
    mask = condsprites_mask(factors)
    kept = load_dsprites(archive_path, image_extent=image_extent, keep=mask)
    # reorder the streamed (archive-order) rows into squares-then-ellipses
    shape_col = kept.factors.indices[:, 0]
    order = np.concatenate([
        np.flatnonzero(shape_col == _SHAPE_SQUARE),
        np.flatnonzero(shape_col == _SHAPE_ELLIPSE),
    ])
    return ImageDataset(
        images=kept.images[order],
        factors=kept.factors.subset(order),
        labels=shape_col[order].astype(np.int64),
    )


# -- MNIST ------------------------------------------------------------

_IDX_MAGIC_IMAGES = 0x00000803
_IDX_MAGIC_LABELS = 0x00000801


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        (magic,) = struct.unpack(">I", fh.read(4))
        if magic != expected_magic:
            raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
        rank = magic & 0xFF
        dims = struct.unpack(f">{rank}I", fh.read(4 * rank))
        n = 1
        for d in dims:
            n *= d
        raw = fh.read(n)
        if len(raw) != n:
            raise DataError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_mnist(directory, split: str = "train") -> ImageDataset:
    """Digits scaled to [0,1] and zero-padded 28 -> 32. Files may be gzipped."""
    if split not in ("train", "test"):
        raise DataError(f"split must be train or test, got {split!r}")
    stem = "train" if split == "train" else "t10k"
    import os

    def find(name):
        for suffix in ("", ".gz"):
            p = os.path.join(directory, name + suffix)
            if os.path.exists(p):
                return p
        raise DataError(f"missing MNIST file {name}[.gz] in {directory}")

    images = _read_idx(find(f"{stem}-images-idx3-ubyte"), _IDX_MAGIC_IMAGES)
    labels = _read_idx(find(f"{stem}-labels-idx1-ubyte"), _IDX_MAGIC_LABELS)
    if images.shape[1:] != (28, 28):
        raise DataError(f"expected 28x28 digits, got {images.shape[1:]}")
    if images.shape[0] != labels.shape[0]:
        raise DataError("image/label counts differ")
    x = (images.astype(np.float32) / 255.0)[:, None]
    x = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    return ImageDataset(images=x, labels=labels.astype(np.int64))


# -- batching ---------------------------------------------------------

def batches(images: np.ndarray, batch_size: int, rng):
    """One epoch of float32 batches in a seeded random order.

    The final short batch is included. Deterministic given the rng state.
    """
    n = images.shape[0]
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield np.ascontiguousarray(images[idx], dtype=np.float32)


# -- derived-dataset cache ---------------------------------------------

def save_condsprites_cache(dataset: ImageDataset, container_path, csv_path) -> None:
    entries = {
        "images": dataset.images[:, 0].astype(np.float32),
        "labels": dataset.labels.astype(np.float32),
        "factors": dataset.factors.indices.astype(np.float32),
        "meta.extent": ckpt.encode_u64(dataset.extent),
    }
    ckpt.save_checkpoint(container_path, entries)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", *dataset.factors.names])
        for i in range(len(dataset)):
            writer.writerow([i, int(dataset.labels[i]), *map(int, dataset.factors.indices[i])])


def load_condsprites_cache(container_path) -> ImageDataset:
    entries = ckpt.load_checkpoint(container_path)
    images = entries["images"].astype(np.uint8)[:, None]
    return ImageDataset(
        images=images,
        factors=FactorTable(
            entries["factors"].astype(np.int64),
            DSPRITES_CARDINALITIES,
            DSPRITES_FACTOR_NAMES,
        ),
        labels=entries["labels"].astype(np.int64),
    )
