"""Dense inverse-search optical flow on the CPU.

Coarse-to-fine patch alignment: at every pyramid level a grid of overlapping
patches (stride = half a patch) is aligned to the next frame by
inverse-compositional gradient descent on the mean-normalised SSD, then the
patch displacements are densified by residual-weighted averaging. Estimation
stops at ``finest_scale`` and the result is bilinearly upsampled to the frame
resolution.

The patch kernels are compiled with numba and release the GIL, so the patch
set can be split into scan bands and aligned on several threads. Each patch is
independent and densification accumulates in a fixed patch order, so the flow
is bit-identical for any band partitioning.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_same_shape, effective_n_jobs
from .exceptions import ValidationError
from .imagery import FlowField

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
EARLY_EXIT_NORM = 0.01


@dataclass(frozen=True)
class DisParams:
    """Flow estimator configuration.

    ``pyramid_levels=None`` picks the deepest pyramid whose coarsest level
    still measures at least two patches along its short side.
    """

    finest_scale: int = 2
    patch_size: int = 8
    gd_iterations: int = 12
    use_variational_refinement: bool = False
    pyramid_levels: int | None = None

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 2:
            raise ValidationError(f"patch_size must be even and >= 4, got {self.patch_size}")
        if self.gd_iterations < 1:
            raise ValidationError("gd_iterations must be >= 1")
        if self.finest_scale < 0:
            raise ValidationError("finest_scale must be >= 0")
        if self.pyramid_levels is not None and not 0 <= self.finest_scale < self.pyramid_levels:
            raise ValidationError(
                f"finest_scale {self.finest_scale} must lie in [0, pyramid_levels={self.pyramid_levels})")


def fast_preset():
    """The low-runtime preset: no variational refinement, finest scale 2,
    8 px patches, 12 descent iterations."""
    return DisParams(finest_scale=2, patch_size=8, gd_iterations=12,
                     use_variational_refinement=False)


@dataclass(frozen=True, eq=False)
class Pyramid:
    levels: tuple
    grad_x: tuple
    grad_y: tuple

    def __len__(self):
        return len(self.levels)

    def size(self, k):
        h, w = self.levels[k].shape
        return w, h


def to_gray(frame):
    return _gray(frame.pixels)


@numba.njit(cache=True, nogil=True)
def _gray(px):
    h, w = px.shape[0], px.shape[1]
    out = np.empty((h, w), np.float32)
    r, g, b = np.float32(0.299), np.float32(0.587), np.float32(0.114)
    for y in range(h):
        for x in range(w):
            out[y, x] = r * px[y, x, 0] + g * px[y, x, 1] + b * px[y, x, 2]
    return out


@numba.njit(cache=True, nogil=True)
def central_gradients(img):
    """Central differences with replicated borders."""
    h, w = img.shape
    gx = np.empty((h, w), np.float32)
    gy = np.empty((h, w), np.float32)
    half = np.float32(0.5)
    for y in range(h):
        ym, yp = max(y - 1, 0), min(y + 1, h - 1)
        for x in range(w):
            xm, xp = max(x - 1, 0), min(x + 1, w - 1)
            gx[y, x] = (img[y, xp] - img[y, xm]) * half
            gy[y, x] = (img[yp, x] - img[ym, x]) * half
    return gx, gy


@numba.njit(cache=True, nogil=True)
def _halve(img):
    h, w = img.shape[0] // 2, img.shape[1] // 2
    out = np.empty((h, w), np.float32)
    q = np.float32(0.25)
    for y in range(h):
        for x in range(w):
            out[y, x] = (img[2 * y, 2 * x] + img[2 * y + 1, 2 * x]
                         + img[2 * y, 2 * x + 1] + img[2 * y + 1, 2 * x + 1]) * q
    return out


def auto_levels(width, height, patch_size):
    n = 1
    w, h = width, height
    while min(w // 2, h // 2) >= 2 * patch_size:
        w, h = w // 2, h // 2
        n += 1
    return n


def build_pyramid(frame, levels=None, patch_size=8):
    """Grayscale 2x box-filtered pyramid with per-level gradients."""
    if levels is None:
        if min(frame.width, frame.height) < patch_size:
            raise ValidationError(
                f"frame {frame.width}x{frame.height} is smaller than patch size {patch_size}")
        levels = auto_levels(frame.width, frame.height, patch_size)
    check_depth(frame.width, frame.height, levels, patch_size)
    imgs = _levels(frame, levels)
    grads = [central_gradients(im) for im in imgs]
    return Pyramid(tuple(imgs), tuple(g[0] for g in grads), tuple(g[1] for g in grads))


def check_depth(width, height, levels, patch_size):
    if levels < 1:
        raise ValidationError("pyramid needs at least one level")
    cw, ch = width >> (levels - 1), height >> (levels - 1)
    if min(cw, ch) < patch_size:
        raise ValidationError(
            f"frame {width}x{height} too small for {levels} pyramid levels "
            f"(coarsest {cw}x{ch} < patch size {patch_size})")


def _levels(frame, levels):
    imgs = [to_gray(frame)]
    for _ in range(levels - 1):
        imgs.append(_halve(imgs[-1]))
    return imgs


# --------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True, nogil=True, inline="always")
def _bilinear(img, x, y):
    h, w = img.shape
    if x < 0.0:
        x = 0.0
    elif x > w - 1:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1:
        y = h - 1.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


@numba.njit(cache=True, nogil=True)
def _masked_step(tmpl, gx, gy, target, x0, y0, u, v, ps, buf):
    """One Gauss-Newton update over the patch pixels whose match lies inside
    ``target``. Returns ``(ok, du, dv)``; ``ok`` is False when too few pixels
    remain or the system is singular."""
    h_max = target.shape[0] - 1.0
    w_max = target.shape[1] - 1.0
    n = 0
    mt = mgx = mgy = ms = 0.0
    for j in range(ps):
        yy = y0 + j + v
        for i in range(ps):
            xx = x0 + i + u
            q = j * ps + i
            if xx < 0.0 or yy < 0.0 or xx > w_max or yy > h_max:
                buf[q] = np.nan
                continue
            s = _bilinear(target, xx, yy)
            buf[q] = s
            ms += s
            mt += tmpl[y0 + j, x0 + i]
            mgx += gx[y0 + j, x0 + i]
            mgy += gy[y0 + j, x0 + i]
            n += 1
    if 4 * n < ps * ps:
        return False, 0.0, 0.0
    ms /= n
    mt /= n
    mgx /= n
    mgy /= n
    h11 = h12 = h22 = b1 = b2 = 0.0
    for j in range(ps):
        for i in range(ps):
            q = j * ps + i
            if np.isnan(buf[q]):
                continue
            a = gx[y0 + j, x0 + i] - mgx
            b = gy[y0 + j, x0 + i] - mgy
            r = (buf[q] - ms) - (tmpl[y0 + j, x0 + i] - mt)
            h11 += a * a
            h12 += a * b
            h22 += b * b
            b1 += a * r
            b2 += b * r
    det = h11 * h22 - h12 * h12
    if det <= 1e-6:
        return False, 0.0, 0.0
    return True, (h22 * b1 - h12 * b2) / det, (h11 * b2 - h12 * b1) / det


@numba.njit(cache=True, nogil=True)
def _align_patches(tmpl, gx, gy, target, px, py, ux, uy, ps, iters, eps, out, resid):
    """Inverse-compositional alignment of each patch.

    ``out[k] = (u, v, mean |residual|)``; ``resid[k]`` holds the per-pixel
    absolute mean-normalised residual at the final displacement.
    """
    n = px.shape[0]
    npx = ps * ps
    h_max = target.shape[0] - 1.0
    w_max = target.shape[1] - 1.0
    buf = np.empty(npx)
    ax = np.empty(npx)
    ay = np.empty(npx)
    tc = np.empty(npx)
    for k in range(n):
        x0 = px[k]
        y0 = py[k]
        mt = 0.0
        mgx = 0.0
        mgy = 0.0
        for j in range(ps):
            for i in range(ps):
                mt += tmpl[y0 + j, x0 + i]
                mgx += gx[y0 + j, x0 + i]
                mgy += gy[y0 + j, x0 + i]
        mt /= npx
        mgx /= npx
        mgy /= npx
        h11 = 0.0
        h12 = 0.0
        h22 = 0.0
        for j in range(ps):
            for i in range(ps):
                q = j * ps + i
                a = gx[y0 + j, x0 + i] - mgx
                b = gy[y0 + j, x0 + i] - mgy
                ax[q] = a
                ay[q] = b
                tc[q] = tmpl[y0 + j, x0 + i] - mt
                h11 += a * a
                h12 += a * b
                h22 += b * b
        det = h11 * h22 - h12 * h12
        u0 = ux[k]
        v0 = uy[k]
        u = u0
        v = v0
        if det > 1e-6:
            for _ in range(iters):
                if (x0 + u >= 0.0 and y0 + v >= 0.0 and x0 + ps - 1 + u <= w_max
                        and y0 + ps - 1 + v <= h_max):
                    ms = 0.0
                    for j in range(ps):
                        for i in range(ps):
                            s = _bilinear(target, x0 + i + u, y0 + j + v)
                            buf[j * ps + i] = s
                            ms += s
                    ms /= npx
                    b1 = 0.0
                    b2 = 0.0
                    for q in range(npx):
                        r = (buf[q] - ms) - tc[q]
                        b1 += ax[q] * r
                        b2 += ay[q] * r
                    du = (h22 * b1 - h12 * b2) / det
                    dv = (h11 * b2 - h12 * b1) / det
                else:
                    # part of the patch maps outside the frame: fit the observed pixels only
                    ok, du, dv = _masked_step(tmpl, gx, gy, target, x0, y0, u, v, ps, buf)
                    if not ok:
                        break
                u -= du
                v -= dv
                # keep the patch within one patch width of its initialisation
                if u > u0 + ps:
                    u = u0 + ps
                elif u < u0 - ps:
                    u = u0 - ps
                if v > v0 + ps:
                    v = v0 + ps
                elif v < v0 - ps:
                    v = v0 - ps
                if du * du + dv * dv < eps * eps:
                    break
        ms = 0.0
        for j in range(ps):
            for i in range(ps):
                s = _bilinear(target, x0 + i + u, y0 + j + v)
                buf[j * ps + i] = s
                ms += s
        ms /= npx
        res = 0.0
        for q in range(npx):
            r = abs((buf[q] - ms) - tc[q])
            resid[k, q] = r
            res += r
        out[k, 0] = u
        out[k, 1] = v
        out[k, 2] = res / npx


@numba.njit(cache=True, nogil=True)
def _densify(px, py, disp, resid, ps, height, width):
    """Per-pixel weighted mean of covering patches.

    A patch votes at pixel x with weight 1 / (1 + |r(x)|), r being its
    residual at that pixel, so patches straddling a motion boundary only
    count on the side they actually fit.
    """
    num_u = np.zeros((height, width))
    num_v = np.zeros((height, width))
    den = np.zeros((height, width))
    for k in range(px.shape[0]):
        u = disp[k, 0]
        v = disp[k, 1]
        for j in range(ps):
            for i in range(ps):
                wgt = 1.0 / (1.0 + resid[k, j * ps + i])
                num_u[py[k] + j, px[k] + i] += wgt * u
                num_v[py[k] + j, px[k] + i] += wgt * v
                den[py[k] + j, px[k] + i] += wgt
    for j in range(height):
        for i in range(width):
            num_u[j, i] /= den[j, i]
            num_v[j, i] /= den[j, i]
    return num_u, num_v


# --------------------------------------------------------------------------

def patch_origins(length, patch_size):
    """Patch start offsets along one axis: stride ps/2, last patch flush with the border."""
    stride = patch_size // 2
    starts = list(range(0, length - patch_size + 1, stride))
    if starts[-1] != length - patch_size:
        starts.append(length - patch_size)
    return np.asarray(starts, dtype=np.int64)


def upsample_bilinear(arr, new_width, new_height, scale=1.0):
    """Pixel-centre aligned bilinear resize of a 2-D array, times ``scale``."""
    h, w = arr.shape
    if (w, h) == (new_width, new_height):
        return arr.astype(np.float64) * scale

    def axis(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, new_height)
    x0, x1, fx = axis(w, new_width)
    return _resample2(np.ascontiguousarray(arr, dtype=np.float64), y0, y1, fy, x0, x1, fx, scale)


@numba.njit(cache=True, nogil=True)
def _resample2(a, y0, y1, fy, x0, x1, fx, scale):
    out = np.empty((y0.size, x0.size))
    row = np.empty(a.shape[1])
    for i in range(y0.size):
        wy = fy[i]
        for j in range(a.shape[1]):
            row[j] = a[y0[i], j] * (1.0 - wy) + a[y1[i], j] * wy
        for j in range(x0.size):
            wx = fx[j]
            out[i, j] = (row[x0[j]] * (1.0 - wx) + row[x1[j]] * wx) * scale
    return out


def _scale_flow(u, v, new_width, new_height):
    h, w = u.shape
    return (upsample_bilinear(u, new_width, new_height, new_width / w),
            upsample_bilinear(v, new_width, new_height, new_height / h))


def _align_level(tmpl, gx, gy, target, init_u, init_v, params, n_jobs):
    h, w = tmpl.shape
    ps = params.patch_size
    xs = patch_origins(w, ps)
    ys = patch_origins(h, ps)
    py, px = (a.ravel().copy() for a in np.meshgrid(ys, xs, indexing="ij"))
    centre = ps // 2
    ux = init_u[py + centre, px + centre].astype(np.float64)
    uy = init_v[py + centre, px + centre].astype(np.float64)
    out = np.empty((px.size, 3))
    resid = np.empty((px.size, ps * ps))

    def run(lo, hi):
        _align_patches(tmpl, gx, gy, target, px[lo:hi], py[lo:hi], ux[lo:hi], uy[lo:hi],
                       ps, params.gd_iterations, EARLY_EXIT_NORM, out[lo:hi], resid[lo:hi])

    # scan bands: whole rows of patches per job
    n_rows = ys.size
    n_bands = min(n_jobs, n_rows)
    if n_bands <= 1:
        run(0, px.size)
    else:
        cuts = np.linspace(0, n_rows, n_bands + 1).astype(int) * xs.size
        with ThreadPoolExecutor(max_workers=n_bands) as pool:
            list(pool.map(run, cuts[:-1], cuts[1:]))
    return _densify(px, py, out, resid, ps, h, w)


def estimate_flow(prev, next, params=None, n_jobs=1):
    """Dense ``prev -> next`` flow at the resolution of ``prev``.

    Parameters
    ----------
    prev, next : Frame
        Frames of identical size.
    params : DisParams, optional
        Defaults to :func:`fast_preset`.
    n_jobs : int
        Scan-band worker threads; does not affect the result.
    """
    params = fast_preset() if params is None else params
    check_same_shape(prev, next, what="flow frames")
    if params.use_variational_refinement:
        raise ValidationError("variational refinement is not supported")
    levels = params.pyramid_levels
    if levels is None:
        levels = auto_levels(prev.width, prev.height, params.patch_size)
    if params.finest_scale >= levels:
        raise ValidationError(
            f"frame {prev.width}x{prev.height} supports {levels} pyramid levels, "
            f"too few for finest_scale {params.finest_scale}")
    n_jobs = effective_n_jobs(n_jobs)
    check_depth(prev.width, prev.height, levels, params.patch_size)
    # only the template needs gradients, and only at the levels that are solved
    l0 = _levels(prev, levels)
    l1 = _levels(next, levels)

    u = v = None
    for k in range(levels - 1, params.finest_scale - 1, -1):
        h, w = l0[k].shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            u, v = _scale_flow(u, v, w, h)
        gx, gy = central_gradients(l0[k])
        u, v = _align_level(l0[k], gx, gy, l1[k], u, v, params, n_jobs)
    u, v = _scale_flow(u, v, prev.width, prev.height)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


class DISOpticalFlow(BaseEstimator):
    """Estimator wrapper around :func:`estimate_flow`.

    Examples
    --------
    >>> flow = DISOpticalFlow().estimate(frame_a, frame_b)  # doctest: +SKIP
    """

    def __init__(self, finest_scale=2, patch_size=8, gd_iterations=12,
                 use_variational_refinement=False, pyramid_levels=None, n_jobs=1):
        self.finest_scale = finest_scale
        self.patch_size = patch_size
        self.gd_iterations = gd_iterations
        self.use_variational_refinement = use_variational_refinement
        self.pyramid_levels = pyramid_levels
        self.n_jobs = n_jobs

    @classmethod
    def from_params(cls, params, n_jobs=1):
        return cls(params.finest_scale, params.patch_size, params.gd_iterations,
                   params.use_variational_refinement, params.pyramid_levels, n_jobs)

    @property
    def params(self):
        return DisParams(self.finest_scale, self.patch_size, self.gd_iterations,
                         self.use_variational_refinement, self.pyramid_levels)

    def estimate(self, prev, next):
        return estimate_flow(prev, next, self.params, self.n_jobs)

    def estimate_pair(self, prev, next):
        """Forward and independently estimated backward flow."""
        return self.estimate(prev, next), self.estimate(next, prev)
