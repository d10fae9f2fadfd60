"""Deterministic synthetic sequences with exact ground truth.

Textured rectangles and disks translate over a static textured background.
For every frame the generator knows the label map, the true motion of the
visible surface, and which pixels are occluded or dis-occluded relative to the
previous frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import SpecError
from .imagery import (
    FlowField,
    Frame,
    LabelMap,
    write_flo,
    write_frame,
    write_label_png,
)

SHAPES = ("rect", "disk")


@dataclass(frozen=True)
class SceneObject:
    """One moving object. ``position`` is the top-left corner of a rect or the
    centre of a disk at frame 0; ``velocity`` is in pixels per frame."""

    shape: str
    class_id: int
    color: tuple
    position: tuple
    velocity: tuple = (0, 0)
    size: tuple | None = None
    radius: float | None = None
    texture_seed: int = 0

    def extent(self):
        if self.shape == "rect":
            return self.size
        d = 2 * self.radius
        return d, d


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    frame_count: int
    objects: tuple = ()
    background_class: int = 0
    background_color: tuple = (110, 110, 110)
    background_seed: int = 0
    seed: int = 0
    num_classes: int | None = None
    texture_cell: int = 12
    texture_amplitude: float = 40.0
    fractional: bool = False

    def __post_init__(self):
        validate_spec(self)

    @property
    def classes(self):
        return self.num_classes or 1 + max([self.background_class] + [o.class_id for o in self.objects])

    def palette(self):
        """``[(color, class_id), ...]`` covering the background and every object."""
        entries = [(tuple(self.background_color), self.background_class)]
        seen = {self.background_class}
        for o in self.objects:
            if o.class_id not in seen:
                entries.append((tuple(o.color), o.class_id))
                seen.add(o.class_id)
        return entries

    def to_dict(self):
        d = asdict(self)
        d["objects"] = [{k: v for k, v in asdict(o).items() if v is not None} for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise SpecError("<root>", "scene spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        for req in ("width", "height", "frame_count"):
            if req not in data:
                raise SpecError(req, "required field missing")
        kw = dict(data)
        objs = []
        for i, od in enumerate(data.get("objects", [])):
            path = f"objects[{i}]"
            if not isinstance(od, dict):
                raise SpecError(path, "must be an object")
            okeys = set(SceneObject.__dataclass_fields__)
            bad = set(od) - okeys
            if bad:
                raise SpecError(f"{path}.{sorted(bad)[0]}", "unknown field")
            for req in ("shape", "class_id", "color", "position"):
                if req not in od:
                    raise SpecError(f"{path}.{req}", "required field missing")
            o = dict(od)
            for key in ("color", "position", "velocity", "size"):
                if key in o and o[key] is not None:
                    if not isinstance(o[key], (list, tuple)):
                        raise SpecError(f"{path}.{key}", "must be an array")
                    o[key] = tuple(o[key])
            objs.append(SceneObject(**o))
        kw["objects"] = tuple(objs)
        for key in ("background_color",):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def validate_spec(spec):
    for name in ("width", "height", "frame_count"):
        v = getattr(spec, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise SpecError(name, f"must be a positive integer, got {v!r}")
    if spec.texture_cell < 1:
        raise SpecError("texture_cell", "must be >= 1")
    _check_color(spec.background_color, "background_color")
    classes = spec.classes
    if spec.background_class >= classes:
        raise SpecError("background_class", f"must be < num_classes ({classes})")
    for i, o in enumerate(spec.objects):
        path = f"objects[{i}]"
        if o.shape not in SHAPES:
            raise SpecError(f"{path}.shape", f"must be one of {SHAPES}, got {o.shape!r}")
        if not isinstance(o.class_id, int) or o.class_id < 0 or o.class_id >= classes:
            raise SpecError(f"{path}.class_id", f"must be an integer in [0, {classes})")
        if o.class_id == spec.background_class:
            raise SpecError(f"{path}.class_id", "must differ from background_class")
        _check_color(o.color, f"{path}.color")
        _check_pair(o.position, f"{path}.position")
        _check_pair(o.velocity, f"{path}.velocity")
        if not spec.fractional and any(float(v) != int(v) for v in o.velocity):
            raise SpecError(f"{path}.velocity", "fractional velocity requires fractional=true")
        if o.shape == "rect":
            if o.size is None:
                raise SpecError(f"{path}.size", "rect requires size")
            _check_pair(o.size, f"{path}.size")
            if min(o.size) <= 0:
                raise SpecError(f"{path}.size", "must be positive")
        else:
            if o.radius is None or not o.radius > 0:
                raise SpecError(f"{path}.radius", "disk requires a positive radius")
        ew, eh = o.extent()
        if ew > spec.width or eh > spec.height:
            raise SpecError(f"{path}.size" if o.shape == "rect" else f"{path}.radius",
                            f"object extent {ew}x{eh} larger than canvas {spec.width}x{spec.height}")


def _check_pair(value, path):
    if len(value) != 2 or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in value):
        raise SpecError(path, f"must be two finite numbers, got {value!r}")


def _check_color(value, path):
    if len(value) != 3 or not all(isinstance(v, int) and 0 <= v <= 255 for v in value):
        raise SpecError(path, f"must be three integers in [0, 255], got {value!r}")


# --------------------------------------------------------------------------
# rendering

def value_noise(xs, ys, seed, cell, extent):
    """Bilinear value noise in [-1, 1] evaluated at continuous coordinates.

    The lattice covers ``extent = (width, height)`` plus one cell of margin on
    each side; lookups are clamped onto it.
    """
    rng = np.random.default_rng(seed)
    gw = int(math.ceil(extent[0] / cell)) + 3
    gh = int(math.ceil(extent[1] / cell)) + 3
    lattice = rng.uniform(-1.0, 1.0, size=(gh, gw))
    gx = np.clip(xs / cell + 1.0, 0, gw - 1.000001)
    gy = np.clip(ys / cell + 1.0, 0, gh - 1.000001)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    fx = gx - x0
    fy = gy - y0
    top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
    bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def textured_background(width, height, seed=0, color=(110, 110, 110), cell=12, amplitude=40.0):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    n = value_noise(xs, ys, seed, cell, (width, height))
    img = np.asarray(color, dtype=np.float64)[None, None, :] + amplitude * n[..., None]
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def translated_pair(width, height, dx, dy, seed=0, cell=12):
    """A textured frame and its copy translated by ``(dx, dy)`` with wrap-around."""
    base = textured_background(width, height, seed, cell=cell, amplitude=60.0)
    moved = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
    return Frame(base, 0), Frame(moved.copy(), 1)


def _object_mask(obj, t, xs, ys):
    px = obj.position[0] + t * obj.velocity[0]
    py = obj.position[1] + t * obj.velocity[1]
    if obj.shape == "rect":
        w, h = obj.size
        inside = (xs >= px) & (xs < px + w) & (ys >= py) & (ys < py + h)
        return inside, px, py
    inside = (xs - px) ** 2 + (ys - py) ** 2 <= obj.radius ** 2
    # texture origin at the bounding-box corner
    return inside, px - obj.radius, py - obj.radius


def _render(spec, t, xs, ys, background):
    img = background.astype(np.float64).copy()
    owner = np.full((spec.height, spec.width), -1, dtype=np.int32)
    for k, obj in enumerate(spec.objects):
        inside, px, py = _object_mask(obj, t, xs, ys)
        if not inside.any():
            continue
        lx = xs[inside] - px
        ly = ys[inside] - py
        ew, eh = obj.extent()
        n = value_noise(lx, ly, spec.seed * 7919 + obj.texture_seed + 1, spec.texture_cell, (ew, eh))
        img[inside] = np.asarray(obj.color, dtype=np.float64) + spec.texture_amplitude * n[:, None]
        owner[inside] = k
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return pixels, owner


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    frames: list
    labels: list
    flows: list              # flows[t]: motion t -> t+1 on the frame-t grid
    flows_at_target: list    # same motion sampled on the frame-(t+1) grid
    occlusions: list         # bool HxW per frame; union of the two below
    disocclusions: list
    occluded: list
    owners: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.frames)

    def palette(self):
        return self.spec.palette()


def generate(spec):
    """Render ``spec`` into frames, labels, flows and occlusion masks."""
    w, h = spec.width, spec.height
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # pixel centres sit at integer coordinates
    background = textured_background(w, h, spec.seed * 7919 + spec.background_seed,
                                     spec.background_color, spec.texture_cell,
                                     spec.texture_amplitude)
    class_of = np.array([o.class_id for o in spec.objects] + [spec.background_class])
    vel = np.array([list(o.velocity) for o in spec.objects] + [[0.0, 0.0]], dtype=np.float64)

    frames, labels, owners = [], [], []
    for t in range(spec.frame_count):
        pixels, owner = _render(spec, t, xs, ys, background)
        frames.append(Frame(pixels, t))
        labels.append(LabelMap(class_of[owner].astype(np.uint8), spec.classes))
        owners.append(owner)

    flows, flows_t = [], []
    occl = [np.zeros((h, w), bool)]
    disocc = [np.zeros((h, w), bool)]
    occ = [np.zeros((h, w), bool)]
    for t in range(1, spec.frame_count):
        prev, cur = owners[t - 1], owners[t]
        vp = vel[prev]
        vc = vel[cur]
        flows.append(FlowField(vp[..., 0].astype(np.float32), vp[..., 1].astype(np.float32)))
        flows_t.append(FlowField(vc[..., 0].astype(np.float32), vc[..., 1].astype(np.float32)))

        # dis-occlusion: the surface seen at p in frame t was not visible at p - v in t-1
        sx = np.floor(xs - vc[..., 0] + 0.5).astype(np.intp)
        sy = np.floor(ys - vc[..., 1] + 0.5).astype(np.intp)
        inb = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        dis = ~inb
        dis[inb] = prev[sy[inb], sx[inb]] != cur[inb]

        # occlusion: a surface visible at q in t-1 is hidden at q + v in frame t
        tx = np.floor(xs + vp[..., 0] + 0.5).astype(np.intp)
        ty = np.floor(ys + vp[..., 1] + 0.5).astype(np.intp)
        inb = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        hidden = np.zeros((h, w), bool)
        qy, qx = np.nonzero(inb)
        lost = cur[ty[qy, qx], tx[qy, qx]] != prev[qy, qx]
        hidden[ty[qy, qx][lost], tx[qy, qx][lost]] = True

        disocc.append(dis)
        occ.append(hidden)
        occl.append(dis | hidden)

    return SyntheticSequence(spec, frames, labels, flows, flows_t, occl, disocc, occ, owners)


def write_sequence(seq, out_dir):
    """Write the directory layout the CLI ingests.

    ``frame_%06d.png`` at the top level, ``gt/label_%06d.png``,
    ``flow/flow_%06d.flo`` (motion from frame i to i+1), ``occlusion/occ_%06d.png``
    and ``scene.json`` (the spec plus its palette).
    """
    from PIL import Image

    out = Path(out_dir)
    for sub in ("gt", "flow", "occlusion"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_frame(out / f"frame_{t:06d}.png", frame)
        write_label_png(out / "gt" / f"label_{t:06d}.png", seq.labels[t])
        Image.fromarray(seq.occlusions[t].astype(np.uint8) * 255, mode="L").save(
            out / "occlusion" / f"occ_{t:06d}.png")
    for t, flow in enumerate(seq.flows):
        write_flo(out / "flow" / f"flow_{t:06d}.flo", flow)
    meta = seq.spec.to_dict()
    meta["palette"] = [{"color": list(c), "class_id": k} for c, k in seq.spec.palette()]
    meta["num_classes"] = seq.spec.classes
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


# --------------------------------------------------------------------------
# bundled scenes and suites

PALETTE_COLORS = [
    (40, 200, 60), (220, 50, 50), (50, 80, 230), (230, 210, 40),
    (200, 60, 220), (40, 210, 220), (240, 140, 30), (120, 40, 160),
]


def crossing_spec(width=256, height=128, frame_count=30, seed=0):
    """Two textured rectangles crossing each other over a textured background."""
    return SceneSpec(
        width=width, height=height, frame_count=frame_count, seed=seed,
        objects=(
            SceneObject("rect", 1, PALETTE_COLORS[0], (8, height // 4), (3, 0),
                        size=(width // 5, height // 3), texture_seed=1),
            SceneObject("rect", 2, PALETTE_COLORS[1], (width - 8 - width // 5, height // 3), (-3, 1),
                        size=(width // 5, height // 3), texture_seed=2),
        ),
    )


def random_spec(seed, width=256, height=128, frame_count=12, n_objects=3, max_speed=3,
                static=False, num_classes=None):
    """A random scene of rectangles and disks with integer velocities."""
    rng = np.random.default_rng(seed)
    objs = []
    for k in range(n_objects):
        shape = "rect" if rng.random() < 0.6 else "disk"
        v = (0, 0) if static else tuple(int(a) for a in rng.integers(-max_speed, max_speed + 1, 2))
        if not static and v == (0, 0):
            v = (max_speed, 0)
        color = PALETTE_COLORS[k % len(PALETTE_COLORS)]
        if shape == "rect":
            sw = int(rng.integers(width // 8, width // 4))
            sh = int(rng.integers(height // 8, height // 3))
            pos = (int(rng.integers(0, width - sw)), int(rng.integers(0, height - sh)))
            objs.append(SceneObject("rect", k + 1, color, pos, v, size=(sw, sh),
                                    texture_seed=int(rng.integers(1 << 16))))
        else:
            r = int(rng.integers(height // 10, height // 5))
            pos = (int(rng.integers(r, width - r)), int(rng.integers(r, height - r)))
            objs.append(SceneObject("disk", k + 1, color, pos, v, radius=r,
                                    texture_seed=int(rng.integers(1 << 16))))
    return SceneSpec(width=width, height=height, frame_count=frame_count, seed=seed,
                     objects=tuple(objs), background_seed=int(rng.integers(1 << 16)),
                     num_classes=num_classes)
