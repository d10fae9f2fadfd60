"""Raster value types and lossless file I/O.

All rasters are row-major with a top-left origin and y increasing downward.
Arrays held by these types are marked read-only on construction; new values
are produced by building new objects.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._validation import check_finite, check_size, readonly
from .exceptions import FormatError, FrameSequenceError, ValidationError

DEFAULT_IGNORE_ID = 255
NORMALIZATION_TOL = 1e-5

FLO_MAGIC = b"PIEH"
PROB_MAGIC = b"EVSP"
FEAT_MAGIC = b"EVSF"
_CONTAINER_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class Frame:
    """An 8-bit RGB image, ``pixels`` shaped ``(height, width, 3)``."""

    pixels: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValidationError(f"frame samples must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"frame must be HxWx3, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValidationError("frame dimensions must be positive")
        if self.frame_index < 0:
            raise ValidationError("frame_index must be nonnegative")
        object.__setattr__(self, "pixels", readonly(px))

    @classmethod
    def from_buffer(cls, samples, width, height, frame_index=0):
        if isinstance(samples, (bytes, bytearray, memoryview)):
            buf = np.frombuffer(bytes(samples), dtype=np.uint8)
        else:
            buf = np.asarray(samples, dtype=np.uint8).ravel()
        if buf.size != width * height * 3:
            raise ValidationError(
                f"sample buffer has {buf.size} values, expected {width}*{height}*3")
        return cls(buf.reshape(height, width, 3).copy(), frame_index)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def size(self):
        return self.width, self.height


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids in ``[0, num_classes)`` or ``ignore_id``."""

    labels: np.ndarray
    num_classes: int
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise ValidationError(f"label map must be a non-empty 2-D array, got {lab.shape}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.ignore_id < self.num_classes:
            raise ValidationError(
                f"ignore_id {self.ignore_id} collides with class range [0, {self.num_classes})")
        if lab.dtype.kind not in "ui":
            raise ValidationError(f"labels must be integers, got {lab.dtype}")
        dtype = np.uint8 if self.ignore_id <= 255 else np.uint16
        if lab.dtype != dtype:
            if lab.size and (lab.min() < 0 or lab.max() > np.iinfo(dtype).max):
                raise ValidationError("label values out of representable range")
            lab = lab.astype(dtype)
        bad = (lab >= self.num_classes) & (lab != self.ignore_id)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValidationError(
                f"label {lab[y, x]} at ({x}, {y}) is outside [0, {self.num_classes}) "
                f"and is not ignore_id {self.ignore_id}")
        object.__setattr__(self, "labels", readonly(lab))

    @classmethod
    def _trusted(cls, labels, num_classes, ignore_id):
        # for labels gathered from an already-valid map of the same dtype
        obj = object.__new__(cls)
        object.__setattr__(obj, "labels", readonly(labels))
        object.__setattr__(obj, "num_classes", num_classes)
        object.__setattr__(obj, "ignore_id", ignore_id)
        return obj

    @classmethod
    def from_buffer(cls, labels, width, height, num_classes, ignore_id=DEFAULT_IGNORE_ID):
        buf = np.asarray(labels).ravel()
        if buf.size != width * height:
            raise ValidationError(f"label buffer has {buf.size} values, expected {width}*{height}")
        return cls(buf.reshape(height, width).copy(), num_classes, ignore_id)

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]

    def label_set(self):
        return set(np.unique(self.labels).tolist())

    def with_labels(self, labels):
        return LabelMap(labels, self.num_classes, self.ignore_id)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-pixel class distributions, ``values`` shaped ``(height, width, C)``."""

    values: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[0] == 0 or vals.shape[1] == 0 or vals.shape[2] == 0:
            raise ValidationError(f"probability map must be HxWxC, got {vals.shape}")
        if self.validate:
            check_finite(vals, "probabilities")
            if vals.min() < 0:
                raise ValidationError("probabilities must be nonnegative")
            err = np.abs(vals.sum(axis=2) - 1.0).max()
            if err > NORMALIZATION_TOL:
                raise ValidationError(f"probabilities not normalized (max deviation {err:.3g})")
        object.__setattr__(self, "values", readonly(vals))

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def num_classes(self):
        return self.values.shape[2]

    def argmax(self, ignore_id=DEFAULT_IGNORE_ID):
        """Hard labels; ties go to the lowest class id."""
        return LabelMap(np.argmax(self.values, axis=2), self.num_classes, ignore_id)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Low-resolution activations, ``values`` shaped ``(height, width, channels)``."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.dtype.kind != "f":
            vals = vals.astype(np.float32)
        if vals.ndim != 3 or 0 in vals.shape:
            raise ValidationError(f"feature map must be HxWxC, got {vals.shape}")
        check_finite(vals, "features")
        object.__setattr__(self, "values", readonly(vals))

    @classmethod
    def zeros(cls, width, height, channels=8):
        return cls(np.zeros((height, width, channels), dtype=np.float32))

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel source-to-target displacement in pixels (float32)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float32)
        dy = np.asarray(self.dy, dtype=np.float32)
        if dx.ndim != 2 or dx.shape != dy.shape or dx.size == 0:
            raise ValidationError(f"flow components must be equal non-empty 2-D arrays, "
                                  f"got {dx.shape} and {dy.shape}")
        check_finite(dx, "flow dx")
        check_finite(dy, "flow dy")
        object.__setattr__(self, "dx", readonly(dx))
        object.__setattr__(self, "dy", readonly(dy))

    @classmethod
    def zeros(cls, width, height):
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy())

    @classmethod
    def uniform(cls, width, height, dx, dy):
        return cls(np.full((height, width), dx, np.float32), np.full((height, width), dy, np.float32))

    @property
    def width(self):
        return self.dx.shape[1]

    @property
    def height(self):
        return self.dx.shape[0]

    def endpoint_error(self, other):
        """Per-pixel Euclidean distance to ``other``."""
        return np.hypot(self.dx.astype(np.float64) - other.dx, self.dy.astype(np.float64) - other.dy)


@dataclass(frozen=True, eq=False)
class InconsistencyMask:
    """Soft per-pixel flow-unreliability weights in ``[0, 1]``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.size == 0:
            raise ValidationError(f"mask must be a non-empty 2-D array, got {w.shape}")
        if not np.all((w >= 0.0) & (w <= 1.0)):
            raise ValidationError("mask weights must lie in [0, 1]")
        object.__setattr__(self, "weights", readonly(w))

    @property
    def width(self):
        return self.weights.shape[1]

    @property
    def height(self):
        return self.weights.shape[0]

    def flagged_fraction(self, threshold=0.5):
        return float(np.mean(self.weights >= threshold))


# --------------------------------------------------------------------------
# resampling

def resize_nearest(label_map, new_width, new_height):
    """Nearest-neighbour resize of a LabelMap.

    Output pixel centres are mapped back to the source grid, so integer-ratio
    upscaling replicates blocks and downscaling by the same ratio inverts it.
    """
    new_width, new_height = check_size((new_width, new_height), "target size")
    lab = label_map.labels
    if (new_width, new_height) == (label_map.width, label_map.height):
        return LabelMap(lab.copy(), label_map.num_classes, label_map.ignore_id)
    return label_map.with_labels(resample_nearest(lab, new_width, new_height))


def nearest_indices(src_len, dst_len):
    # pixel-centre alignment: src = (i + 0.5) * src/dst - 0.5, rounded half up
    idx = np.floor((np.arange(dst_len) + 0.5) * src_len / dst_len).astype(np.intp)
    return np.clip(idx, 0, src_len - 1)


def resample_nearest(array, new_width, new_height):
    """Nearest-neighbour resize of the two leading axes of ``array``."""
    h, w = array.shape[:2]
    if (w, h) == (new_width, new_height):
        return array.copy()
    rows = nearest_indices(h, new_height)
    cols = nearest_indices(w, new_width)
    return array[rows[:, None], cols[None, :]]


def _area_matrix(src_len, dst_len):
    # row i averages source interval [i*s, (i+1)*s) with fractional coverage
    scale = src_len / dst_len
    m = np.zeros((dst_len, src_len))
    for i in range(dst_len):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), min(int(np.ceil(hi)), src_len)
        for j in range(j0, j1):
            m[i, j] = min(hi, j + 1) - max(lo, j)
        m[i] /= m[i].sum()
    return m


def resample_area(array, new_width, new_height):
    """Area-average resize of the two leading axes (float64 result).

    Exact box averaging for integer downscale ratios; fractional coverage
    weights otherwise. Upscaling degenerates to nearest-neighbour replication.
    """
    arr = np.asarray(array, dtype=np.float64)
    h, w = arr.shape[:2]
    if (w, h) == (new_width, new_height):
        return arr.copy()
    if h % new_height == 0 and w % new_width == 0:
        fy, fx = h // new_height, w // new_width
        shaped = arr.reshape((new_height, fy, new_width, fx) + arr.shape[2:])
        return shaped.mean(axis=(1, 3))
    if new_height > h or new_width > w:
        return resample_nearest(arr, new_width, new_height)
    my = _area_matrix(h, new_height)
    mx = _area_matrix(w, new_width)
    out = np.tensordot(my, arr, axes=(1, 0))
    out = np.tensordot(mx, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def resize_frame(frame, new_width, new_height):
    """Area-average resize of a Frame, rounded back to uint8."""
    if (frame.width, frame.height) == (new_width, new_height):
        return frame
    px = resample_area(frame.pixels, new_width, new_height)
    return Frame(np.clip(np.floor(px + 0.5), 0, 255).astype(np.uint8), frame.frame_index)


def resize_probabilities(probs, new_width, new_height):
    """Per-channel area average followed by renormalization."""
    if (probs.width, probs.height) == (new_width, new_height):
        return probs
    vals = resample_area(probs.values, new_width, new_height)
    vals /= vals.sum(axis=2, keepdims=True)
    return ProbabilityMap(vals)


def resize_flow(flow, new_width, new_height):
    """Nearest-sample a flow field at a new resolution, scaling displacements."""
    if (flow.width, flow.height) == (new_width, new_height):
        return flow
    sx = new_width / flow.width
    sy = new_height / flow.height
    dx = resample_nearest(flow.dx, new_width, new_height) * np.float32(sx)
    dy = resample_nearest(flow.dy, new_width, new_height) * np.float32(sy)
    return FlowField(dx, dy)


# --------------------------------------------------------------------------
# file I/O

def _pattern_regex(pattern):
    """Translate a printf-style pattern such as ``frame_%06d.png`` to a regex."""
    m = re.search(r"%0?(\d*)d", pattern)
    if not m:
        raise ValidationError(f"pattern {pattern!r} has no %d index field")
    head, tail = pattern[:m.start()], pattern[m.end():]
    width = m.group(1)
    digits = rf"\d{{{int(width)},}}" if width else r"\d+"
    return re.compile(rf"^{re.escape(head)}({digits}){re.escape(tail)}$")


def read_frame(path, frame_index=0):
    path = Path(path)
    try:
        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise FrameSequenceError(f"cannot read image {path}: {exc}", path) from exc
    return Frame(px.copy(), frame_index)


def write_frame(path, frame):
    Image.fromarray(np.ascontiguousarray(frame.pixels), mode="RGB").save(path, optimize=False)


def load_frame_sequence(directory, pattern="frame_%06d.png"):
    """Read every file in ``directory`` matching ``pattern``, ordered by index."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameSequenceError(f"frame directory does not exist: {directory}", directory)
    rx = _pattern_regex(pattern)
    indexed = []
    for p in directory.iterdir():
        m = rx.match(p.name)
        if m:
            indexed.append((int(m.group(1)), p))
    if not indexed:
        raise FrameSequenceError(f"no frames matched {pattern!r} in {directory}", directory)
    indexed.sort()
    for (a, pa), (b, pb) in zip(indexed, indexed[1:]):
        if a == b:
            raise FrameSequenceError(f"duplicate frame index {a}: {pa.name}, {pb.name}", pb)
    frames = []
    for idx, p in indexed:
        frame = read_frame(p, idx)
        if frames and frame.size != frames[0].size:
            w0, h0 = frames[0].size
            raise FrameSequenceError(
                f"{p.name} is {frame.width}x{frame.height}, expected {w0}x{h0}", p)
        frames.append(frame)
    return frames


def read_label_png(path, num_classes, ignore_id=DEFAULT_IGNORE_ID):
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise FormatError(f"{path}: label PNG must be single-channel, got mode {im.mode}", path)
            lab = np.asarray(im if im.mode == "L" else im.convert("L"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"cannot read label image {path}: {exc}", path) from exc
    return LabelMap(lab, num_classes, ignore_id)


def write_label_png(path, label_map):
    if label_map.labels.dtype != np.uint8:
        raise ValidationError("only 8-bit label maps can be stored as PNG")
    Image.fromarray(np.ascontiguousarray(label_map.labels), mode="L").save(path)


def write_mask_png(path, mask):
    """Debug dump: weight * 255, rounded."""
    g = np.floor(mask.weights * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(g, mode="L").save(path)


def write_flo(path, flow):
    """Write a Middlebury ``.flo`` file (little-endian)."""
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[..., 0] = flow.dx
    data[..., 1] = flow.dy
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", flow.width, flow.height))
        f.write(data.tobytes())


def read_flo(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header", path)
    if raw[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}", path)
    width, height = struct.unpack_from("<ii", raw, 4)
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}", path)
    expected = width * height * 2 * 4
    payload = raw[12:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload, header declares {width}x{height} "
            f"({expected // 4} floats) but {len(payload) // 4} present", path)
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    return FlowField(data[..., 0].astype(np.float32), data[..., 1].astype(np.float32))


def _write_container(path, magic, values):
    h, w, c = values.shape
    with open(path, "wb") as f:
        f.write(_CONTAINER_HEADER.pack(magic, w, h, c))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def _read_container(path, magic):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CONTAINER_HEADER.size:
        raise FormatError(f"{path}: truncated header", path)
    got, w, h, c = _CONTAINER_HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}", path)
    payload = raw[_CONTAINER_HEADER.size:]
    if w == 0 or h == 0 or c == 0 or len(payload) != w * h * c * 4:
        raise FormatError(f"{path}: payload does not match header {w}x{h}x{c}", path)
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c)


def write_probabilities(path, probs):
    """Store a ProbabilityMap as ``EVSP`` header + float32 values (HxWxC order)."""
    _write_container(path, PROB_MAGIC, probs.values)


def read_probabilities(path):
    vals = _read_container(path, PROB_MAGIC).astype(np.float64)
    try:
        return ProbabilityMap(vals)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def write_features(path, features):
    _write_container(path, FEAT_MAGIC, features.values)


def read_features(path):
    return FeatureMap(_read_container(path, FEAT_MAGIC).astype(np.float32))
