"""Segmenter and refiner backends.

Backends are the pluggable stand-ins for trained networks. A segmenter maps a
frame (and a downscale factor) to class probabilities, hard labels and a small
feature map; a refiner corrects warped probabilities. The built-ins are
deterministic so the whole pipeline can be exercised without a model.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_size
from .exceptions import MissingFrameError, ValidationError
from .imagery import (
    DEFAULT_IGNORE_ID,
    FeatureMap,
    LabelMap,
    ProbabilityMap,
    read_features,
    read_label_png,
    read_probabilities,
    resample_area,
    resample_nearest,
    resize_frame,
    resize_nearest,
    resize_probabilities,
)

PREDICTION_SIZE = (512, 256)
FEATURE_SIZE = (128, 64)
DOWNSCALE_FACTORS = (0.5, 1.0)
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class SegmenterOutput:
    probabilities: ProbabilityMap
    labels: LabelMap
    features: FeatureMap

    @classmethod
    def from_probabilities(cls, probs, features, ignore_id=DEFAULT_IGNORE_ID):
        return cls(probs, probs.argmax(ignore_id), features)

    @property
    def num_classes(self):
        return self.probabilities.num_classes


def check_downscale(downscale):
    if downscale not in DOWNSCALE_FACTORS:
        raise ValidationError(f"downscale must be one of {DOWNSCALE_FACTORS}, got {downscale!r}")
    return float(downscale)


class SegmenterBackend(ABC):
    """Interface: ``segment(frame, downscale) -> SegmenterOutput``.

    Implementations must be deterministic and safe for concurrent read-only
    use. ``declared_cost`` is an optional nominal cost per frame in
    milliseconds, consumed by the schedule simulator.
    """

    declared_cost = None

    @abstractmethod
    def segment(self, frame, downscale=1.0):
        ...


class RefinerBackend(ABC):
    """Interface: ``refine(frame, warped_probs, warped_features) -> ProbabilityMap``.

    The full-resolution frame is passed; the result must be normalized and
    match the resolution of ``warped_probs``.
    """

    @abstractmethod
    def refine(self, frame, warped_probs, warped_features):
        ...


class PaletteSegmenter(SegmenterBackend, BaseEstimator):
    """Nearest-color segmentation against a fixed ``[(color, class_id), ...]`` palette.

    Class scores are ``-softness * ||pixel - color||`` passed through a softmax;
    classes without a palette entry get probability zero. Features are eight
    channels of local color statistics (RGB mean, RGB std, luma mean, luma std)
    area-averaged to ``feature_size``. ``pred_size=None`` keeps the frame size.
    """

    def __init__(self, palette, softness=0.5, num_classes=None, pred_size=PREDICTION_SIZE,
                 feature_size=FEATURE_SIZE, ignore_id=DEFAULT_IGNORE_ID, declared_cost=None):
        self.palette = palette
        self.softness = softness
        self.num_classes = num_classes
        self.pred_size = pred_size
        self.feature_size = feature_size
        self.ignore_id = ignore_id
        self.declared_cost = declared_cost
        self._colors, self._ids = self._validated_palette()

    def _validated_palette(self):
        if not self.palette:
            raise ValidationError("palette is empty")
        colors, ids = [], []
        for entry in self.palette:
            color, cid = entry
            if len(color) != 3:
                raise ValidationError(f"palette color must have 3 components, got {color!r}")
            colors.append([float(c) for c in color])
            ids.append(int(cid))
        if len(set(ids)) != len(ids):
            raise ValidationError("palette class ids must be distinct")
        if min(ids) < 0:
            raise ValidationError("palette class ids must be nonnegative")
        if self.num_classes is not None and max(ids) >= self.num_classes:
            raise ValidationError(f"class id {max(ids)} out of range for {self.num_classes} classes")
        if not np.isfinite(self.softness) or self.softness <= 0:
            raise ValidationError(f"softness must be positive, got {self.softness!r}")
        return np.array(colors), np.array(ids)

    @classmethod
    def from_scene(cls, scene, **kw):
        """Build from a scene description (dict or path to ``scene.json``)."""
        if not isinstance(scene, dict):
            scene = json.loads(Path(scene).read_text())
        if "palette" in scene:
            palette = [(tuple(e["color"]), int(e["class_id"])) for e in scene["palette"]]
        else:
            from .synthgen import SceneSpec
            palette = SceneSpec.from_dict(scene).palette()
        kw.setdefault("num_classes", scene.get("num_classes"))
        return cls(palette, **kw)

    @property
    def classes(self):
        return self.num_classes or int(self._ids.max()) + 1

    def class_probabilities(self, pixels):
        """Softmax over palette entries for an ``(H, W, 3)`` array."""
        px = np.asarray(pixels, dtype=np.float64)
        diff = px[:, :, None, :] - self._colors[None, None, :, :]
        scores = -self.softness * np.sqrt((diff * diff).sum(axis=3))
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        e /= e.sum(axis=2, keepdims=True)
        out = np.zeros(px.shape[:2] + (self.classes,))
        out[:, :, self._ids] = e
        return out

    def color_features(self, frame):
        fw, fh = check_size(self.feature_size, "feature_size")
        px = frame.pixels.astype(np.float64) / 255.0
        luma = px @ LUMA
        stack = np.concatenate([px, px * px, luma[..., None], (luma * luma)[..., None]], axis=2)
        m = resample_area(stack, fw, fh)
        mean, sq = m[..., :3], m[..., 3:6]
        lmean, lsq = m[..., 6:7], m[..., 7:8]
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        lstd = np.sqrt(np.maximum(lsq - lmean * lmean, 0.0))
        return FeatureMap(np.concatenate([mean, std, lmean, lstd], axis=2).astype(np.float32))

    def segment(self, frame, downscale=1.0):
        d = check_downscale(downscale)
        out_w, out_h = (frame.width, frame.height) if self.pred_size is None \
            else check_size(self.pred_size, "pred_size")
        work = frame
        if d != 1.0:
            work = resize_frame(frame, max(1, round(frame.width * d)), max(1, round(frame.height * d)))
        probs = ProbabilityMap(self.class_probabilities(work.pixels))
        probs = _to_size(probs, out_w, out_h)
        return SegmenterOutput.from_probabilities(probs, self.color_features(work), self.ignore_id)


def _to_size(probs, width, height):
    if (probs.width, probs.height) == (width, height):
        return probs
    if width >= probs.width and height >= probs.height:
        # upscaling: replicate whole class vectors
        return ProbabilityMap(resample_nearest(probs.values, width, height), validate=False)
    return resize_probabilities(probs, width, height)


class PrecomputedSegmenter(SegmenterBackend):
    """Serve segmentation exported offline.

    ``directory`` holds ``probs_%06d.bin`` probability containers and,
    optionally, ``feat_%06d.bin`` feature containers, indexed by frame number.
    The downscale factor is ignored: stored outputs are used as they are.
    """

    def __init__(self, directory, feature_size=None, ignore_id=DEFAULT_IGNORE_ID,
                 declared_cost=None):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MissingFrameError(f"no such directory: {self.directory}")
        self.feature_size = feature_size
        self.ignore_id = ignore_id
        self.declared_cost = declared_cost

    def probs_path(self, index):
        return self.directory / f"probs_{index:06d}.bin"

    def features_path(self, index):
        return self.directory / f"feat_{index:06d}.bin"

    def indices(self):
        return sorted(int(p.stem.split("_")[1]) for p in self.directory.glob("probs_*.bin"))

    def segment(self, frame, downscale=1.0):
        check_downscale(downscale)
        path = self.probs_path(frame.frame_index)
        if not path.is_file():
            raise MissingFrameError(f"no stored segmentation for frame {frame.frame_index}: {path}")
        probs = read_probabilities(path)
        fpath = self.features_path(frame.frame_index)
        if fpath.is_file():
            feats = read_features(fpath)
        else:
            fw, fh = self.feature_size or (max(1, probs.width // 4), max(1, probs.height // 4))
            feats = FeatureMap.zeros(fw, fh)
        return SegmenterOutput.from_probabilities(probs, feats, self.ignore_id)


class OracleRefiner(RefinerBackend):
    """Replace warped probabilities with one-hot ground truth.

    ``ground_truth`` is a callable ``frame_index -> LabelMap | None`` or a
    mapping / sequence indexed by frame number. Pixels whose ground truth is
    the ignore id keep their warped distribution.
    """

    def __init__(self, ground_truth):
        self.ground_truth = ground_truth

    @classmethod
    def from_directory(cls, directory, num_classes, pattern="label_%06d.png",
                       ignore_id=DEFAULT_IGNORE_ID):
        directory = Path(directory)

        def load(index):
            path = directory / (pattern % index)
            return read_label_png(path, num_classes, ignore_id) if path.is_file() else None

        return cls(load)

    def lookup(self, index):
        gt = self.ground_truth
        if callable(gt):
            found = gt(index)
        else:
            try:
                found = gt[index]
            except (KeyError, IndexError):
                found = None
        if found is None:
            raise MissingFrameError(f"no ground truth for frame {index}")
        return found

    def refine(self, frame, warped_probs, warped_features):
        gt = self.lookup(frame.frame_index)
        if gt.num_classes != warped_probs.num_classes:
            raise ValidationError(
                f"ground truth has {gt.num_classes} classes, probabilities have {warped_probs.num_classes}")
        gt = resize_nearest(gt, warped_probs.width, warped_probs.height)
        lab = gt.labels
        valid = lab != gt.ignore_id
        out = np.array(warped_probs.values)
        onehot = np.zeros((int(valid.sum()), warped_probs.num_classes))
        onehot[np.arange(onehot.shape[0]), lab[valid].astype(np.intp)] = 1.0
        out[valid] = onehot
        return ProbabilityMap(out, validate=False)


class PassthroughRefiner(RefinerBackend):
    """Return the warped probabilities unchanged."""

    def refine(self, frame, warped_probs, warped_features):
        return warped_probs
