"""Inconsistencies attention: forward-backward label disagreement and blending.

The mask flags pixels where the forward-warped labels ``L_F`` disagree with
the same labels warped backward and then forward again (``L_BF``). The binary
mask is dilated with a disk, Gaussian-smoothed, and used as a per-pixel gate
between refiner output and the warped prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from ._validation import check_nonnegative, check_same_shape, check_size
from .exceptions import DimensionMismatchError, ValidationError
from .imagery import InconsistencyMask, ProbabilityMap, resize_flow, resize_nearest
from .propagation import mapping_from_flow, remap_labels

GAUSSIAN_TRUNCATE = 4.0
CONSISTENCY_MODES = ("backward_forward", "symmetric")


@dataclass(frozen=True)
class IamParams:
    working_width: int = 512
    working_height: int = 256
    dilation_radius: int = 4
    smoothing_sigma: float = 2.0

    def __post_init__(self):
        check_size((self.working_width, self.working_height), "working size")
        check_nonnegative(self.dilation_radius, "dilation_radius")
        check_nonnegative(self.smoothing_sigma, "smoothing_sigma")

    @property
    def working_size(self):
        return self.working_width, self.working_height


def compute_backforward_labels(forward_labels, flow_fwd, flow_bwd, tiles=None, n_jobs=1):
    """``L_BF``: ``L_F`` warped with the backward flow, then with the forward flow."""
    check_same_shape(forward_labels, flow_fwd, flow_bwd, what="IAM inputs")
    backward = remap_labels(forward_labels, mapping_from_flow(flow_bwd), tiles, n_jobs)
    return remap_labels(backward, mapping_from_flow(flow_fwd), tiles, n_jobs)


def inconsistency_mask(forward_labels, backforward_labels):
    """1.0 where the two label maps disagree, 0.0 elsewhere."""
    check_same_shape(forward_labels, backforward_labels, what="label maps")
    return InconsistencyMask((forward_labels.labels != backforward_labels.labels).astype(np.float64))


def disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= radius * radius


def dilate_and_smooth(mask, params=None):
    """Disk dilation, Gaussian blur (replicated borders), clamp to [0, 1]."""
    params = IamParams() if params is None else params
    w = mask.weights
    if w.min() == w.max():
        # constant masks are fixed points of dilation and a normalised blur
        return InconsistencyMask(w.copy())
    binary = w >= 0.5
    if params.dilation_radius > 0:
        binary = ndimage.binary_dilation(binary, structure=disk(params.dilation_radius))
    out = binary.astype(np.float64)
    if params.smoothing_sigma > 0:
        out = ndimage.gaussian_filter(out, params.smoothing_sigma, mode="nearest",
                                      truncate=GAUSSIAN_TRUNCATE)
    return InconsistencyMask(np.clip(out, 0.0, 1.0))


def blend(refiner_probs, warped_probs, mask):
    """``M * P_refiner + (1 - M) * P_warped`` per pixel and class.

    Evaluated as ``P_warped + M * (P_refiner - P_warped)`` so that a zero
    weight, or identical inputs, reproduce ``P_warped`` bit for bit; pixels
    with unit weight take ``P_refiner`` verbatim.
    """
    if refiner_probs.values.shape != warped_probs.values.shape:
        raise DimensionMismatchError(
            f"probability maps differ: {refiner_probs.values.shape} vs {warped_probs.values.shape}")
    if (mask.width, mask.height) != (warped_probs.width, warped_probs.height):
        raise DimensionMismatchError(
            f"mask is {mask.width}x{mask.height}, probabilities are "
            f"{warped_probs.width}x{warped_probs.height}")
    m = mask.weights[..., None]
    pr = refiner_probs.values
    pw = warped_probs.values
    out = pw + m * (pr - pw)
    full = mask.weights == 1.0
    out[full] = pr[full]
    return ProbabilityMap(out)


class InconsistencyAttention(BaseEstimator):
    """Mask computation and blending at a fixed working resolution.

    Inputs at other resolutions are resampled to ``working_size`` first:
    labels and flows by nearest sampling (flow displacements rescaled).

    ``consistency="symmetric"`` additionally flags pixels where ``L_F``
    disagrees with its forward-then-backward round trip. The default
    backward-then-forward check only sees the trailing side of a moving
    boundary; the symmetric variant also catches the leading side.
    """

    def __init__(self, working_size=(512, 256), dilation_radius=4, smoothing_sigma=2.0,
                 consistency="backward_forward"):
        self.working_size = working_size
        self.dilation_radius = dilation_radius
        self.smoothing_sigma = smoothing_sigma
        self.consistency = consistency

    @property
    def params(self):
        w, h = check_size(self.working_size, "working_size")
        return IamParams(w, h, self.dilation_radius, self.smoothing_sigma)

    def raw_mask(self, forward_labels, flow_fwd, flow_bwd, tiles=None, n_jobs=1):
        """Binary label-disagreement mask at working resolution."""
        if self.consistency not in CONSISTENCY_MODES:
            raise ValidationError(
                f"consistency must be one of {', '.join(CONSISTENCY_MODES)}, got {self.consistency!r}")
        w, h = self.params.working_size
        lf = resize_nearest(forward_labels, w, h)
        fwd = resize_flow(flow_fwd, w, h)
        bwd = resize_flow(flow_bwd, w, h)
        raw = inconsistency_mask(lf, compute_backforward_labels(lf, fwd, bwd, tiles, n_jobs))
        if self.consistency == "symmetric":
            other = inconsistency_mask(lf, compute_backforward_labels(lf, bwd, fwd, tiles, n_jobs))
            raw = InconsistencyMask(np.maximum(raw.weights, other.weights))
        return raw

    def mask(self, forward_labels, flow_fwd, flow_bwd, tiles=None, n_jobs=1):
        """Return ``(binary_mask, smoothed_mask)`` at working resolution."""
        raw = self.raw_mask(forward_labels, flow_fwd, flow_bwd, tiles, n_jobs)
        return raw, dilate_and_smooth(raw, self.params)

    def blend(self, refiner_probs, warped_probs, mask):
        return blend(refiner_probs, warped_probs, mask)

