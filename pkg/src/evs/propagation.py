"""Backward-lookup mappings from flow and tiled nearest-neighbour remapping.

A destination pixel ``(x, y)`` gathers from ``(x - dx(x, y), y - dy(x, y))``,
clamped to the image, rounded half away from zero. Tiles partition the
destination image; each tile is gathered independently with read-only access
to the source, so the output does not depend on the grid or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from ._validation import check_finite, check_same_shape, effective_n_jobs, readonly
from .exceptions import DimensionMismatchError, ValidationError
from .imagery import FeatureMap, LabelMap, ProbabilityMap, resize_flow


@dataclass(frozen=True, eq=False)
class MappingField:
    """Per-destination-pixel source coordinates, already clamped to the image."""

    src_x: np.ndarray
    src_y: np.ndarray

    def __post_init__(self):
        sx = np.asarray(self.src_x, dtype=np.float64)
        sy = np.asarray(self.src_y, dtype=np.float64)
        if sx.ndim != 2 or sx.shape != sy.shape:
            raise ValidationError("mapping coordinates must be equal 2-D arrays")
        check_finite(sx, "src_x")
        check_finite(sy, "src_y")
        h, w = sx.shape
        sx = np.clip(sx, 0.0, w - 1.0)
        sy = np.clip(sy, 0.0, h - 1.0)
        object.__setattr__(self, "src_x", readonly(sx))
        object.__setattr__(self, "src_y", readonly(sy))

    @property
    def width(self):
        return self.src_x.shape[1]

    @property
    def height(self):
        return self.src_x.shape[0]

    @classmethod
    def identity(cls, width, height):
        ys, xs = np.mgrid[0:height, 0:width]
        return cls(xs.astype(np.float64), ys.astype(np.float64))

    @cached_property
    def flat_index(self):
        """Row-major source index of every destination pixel."""
        # coordinates are clamped nonnegative, so floor(c + 0.5) is half-away-from-zero
        dtype = np.int32 if self.width * self.height < 2 ** 31 else np.int64
        ix = np.floor(self.src_x + 0.5).astype(dtype)
        iy = np.floor(self.src_y + 0.5).astype(dtype)
        return readonly(iy * dtype(self.width) + ix)


def mapping_from_flow(flow):
    """``src = (x - dx, y - dy)``, clamped to the image bounds."""
    ys, xs = np.mgrid[0:flow.height, 0:flow.width]
    return MappingField(xs - flow.dx.astype(np.float64), ys - flow.dy.astype(np.float64))


def mapping_at(flow, width, height):
    """Mapping for a consumer at another resolution (flow resampled nearest, rescaled)."""
    return mapping_from_flow(resize_flow(flow, width, height))


@dataclass(frozen=True)
class TileGrid:
    rows: int = 4
    cols: int = 4

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"tile grid must be at least 1x1, got {self.rows}x{self.cols}")

    def tiles(self, width, height):
        """Near-equal ``(y0, y1, x0, x1)`` rectangles covering the image exactly once."""
        ry = np.linspace(0, height, min(self.rows, height) + 1).astype(int)
        rx = np.linspace(0, width, min(self.cols, width) + 1).astype(int)
        return [(int(ry[i]), int(ry[i + 1]), int(rx[j]), int(rx[j + 1]))
                for i in range(ry.size - 1) for j in range(rx.size - 1)]


DEFAULT_TILES = TileGrid(4, 4)


@numba.njit(cache=True, nogil=True)
def _gather_tile_2d(flat, index, out, y0, y1, x0, x1):
    for y in range(y0, y1):
        for x in range(x0, x1):
            out[y, x] = flat[index[y, x]]


@numba.njit(cache=True, nogil=True)
def _gather_tile(flat, index, out, y0, y1, x0, x1):
    k = flat.shape[1]
    for y in range(y0, y1):
        for x in range(x0, x1):
            s = index[y, x]
            for c in range(k):
                out[y, x, c] = flat[s, c]


def _gather(source, mapping, tiles, n_jobs):
    """out[y, x] = source[flat_index[y, x]] over the leading two axes."""
    h, w = source.shape[:2]
    if (w, h) != (mapping.width, mapping.height):
        raise DimensionMismatchError(
            f"source is {w}x{h} but mapping is {mapping.width}x{mapping.height}")
    index = mapping.flat_index
    if source.ndim == 2:
        flat = np.ascontiguousarray(source).ravel()
        out = np.empty((h, w), dtype=source.dtype)
        kernel = _gather_tile_2d
    else:
        flat = np.ascontiguousarray(source).reshape(h * w, -1)
        out = np.empty((h, w, flat.shape[1]), dtype=source.dtype)
        kernel = _gather_tile

    def run(tile):
        y0, y1, x0, x1 = tile
        kernel(flat, index, out, y0, y1, x0, x1)

    rects = (tiles or DEFAULT_TILES).tiles(w, h)
    n_jobs = effective_n_jobs(n_jobs)
    if n_jobs == 1 or len(rects) == 1:
        for r in rects:
            run(r)
    else:
        with ThreadPoolExecutor(max_workers=min(n_jobs, len(rects))) as pool:
            list(pool.map(run, rects))
    return out.reshape(source.shape)


def remap_labels(labels, mapping, tiles=None, n_jobs=1):
    # a gather cannot introduce new values, so the result needs no re-validation
    return LabelMap._trusted(_gather(labels.labels, mapping, tiles, n_jobs),
                             labels.num_classes, labels.ignore_id)


def remap_probabilities(probs, mapping, tiles=None, n_jobs=1):
    # whole class vectors are copied, so normalisation is preserved exactly
    return ProbabilityMap(_gather(probs.values, mapping, tiles, n_jobs), validate=False)


def remap_features(features, mapping, tiles=None, n_jobs=1):
    return FeatureMap(_gather(features.values, mapping, tiles, n_jobs))


def warp_labels_by_flow(labels, flow, tiles=None, n_jobs=1):
    check_same_shape(labels, flow, what="labels and flow")
    return remap_labels(labels, mapping_from_flow(flow), tiles, n_jobs)
