import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evs.exceptions import SpecError
from evs.imagery import read_flo, read_label_png
from evs.propagation import warp_labels_by_flow
from evs.segmentation import PaletteSegmenter
from evs.synthgen import (
    SceneObject,
    SceneSpec,
    crossing_spec,
    generate,
    random_spec,
    write_sequence,
)


def one_rect(velocity, frames=3):
    return SceneSpec(64, 32, frames, objects=(
        SceneObject("rect", 1, (200, 40, 40), (10, 8), velocity, size=(16, 12), texture_seed=3),))


def rect_pixels(obj, t, w, h):
    x0 = obj.position[0] + t * obj.velocity[0]
    y0 = obj.position[1] + t * obj.velocity[1]
    return {(y, x) for y in range(y0, y0 + obj.size[1]) for x in range(x0, x0 + obj.size[0])
            if 0 <= x < w and 0 <= y < h}


def crossing_oracle(spec, t):
    """Occlusion set for frame ``t`` from rasterized rectangle sets (second object on top)."""
    w, h = spec.width, spec.height
    a_obj, b_obj = spec.objects
    a0, b0 = rect_pixels(a_obj, t - 1, w, h), rect_pixels(b_obj, t - 1, w, h)
    a1, b1 = rect_pixels(a_obj, t, w, h), rect_pixels(b_obj, t, w, h)
    va, vb = a_obj.velocity, b_obj.velocity
    inside = lambda p: 0 <= p[0] < h and 0 <= p[1] < w
    out = set()
    for y in range(h):
        for x in range(w):
            p = (y, x)
            # surface visible at p in frame t, traced back to frame t-1
            if p in b1:
                q = (y - vb[1], x - vb[0])
                if not inside(q):
                    out.add(p)
            elif p in a1:
                q = (y - va[1], x - va[0])
                if not inside(q) or q in b0:
                    out.add(p)
            elif p in a0 | b0:
                out.add(p)
            # surface visible at p in frame t-1, traced forward to frame t
            if p in b0:
                continue
            if p in a0:
                q = (y + va[1], x + va[0])
                if inside(q) and q in b1:
                    out.add(q)
            elif p in a1 | b1:
                out.add(p)
    return out


class TestGeneration:
    def test_deterministic(self):
        a, b = generate(crossing_spec(96, 48, 4)), generate(crossing_spec(96, 48, 4))
        for fa, fb in zip(a.frames, b.frames):
            assert fa.pixels.tobytes() == fb.pixels.tobytes()
        assert not np.array_equal(generate(crossing_spec(96, 48, 2, seed=1)).frames[0].pixels,
                                  a.frames[0].pixels)

    def test_static_rectangle(self):
        seq = generate(one_rect((0, 0)))
        assert all(not f.dx.any() and not f.dy.any() for f in seq.flows)
        assert not any(m.any() for m in seq.occlusions)

    def test_moving_rectangle_geometry(self):
        seq = generate(one_rect((2, 0)))
        f = seq.flows[0]
        inside = np.zeros((32, 64), bool)
        inside[8:20, 10:26] = True
        assert np.all(f.dx[inside] == 2) and np.all(f.dx[~inside] == 0) and not f.dy.any()
        band = np.zeros((32, 64), bool)
        band[8:20, 10:12] = True
        assert np.array_equal(seq.disocclusions[1], band)
        hidden = np.zeros((32, 64), bool)
        hidden[8:20, 26:28] = True
        assert np.array_equal(seq.occluded[1], hidden)

    def test_crossing_matches_set_oracle(self):
        spec = crossing_spec(128, 64, 30)
        seq = generate(spec)
        for t in range(1, 30):
            got = set(map(tuple, np.argwhere(seq.occlusions[t])))
            assert got == crossing_oracle(spec, t), t

    @settings(max_examples=15)
    @given(st.integers(0, 10_000))
    def test_gt_warp_reproduces_labels_outside_occlusions(self, seed):
        seq = generate(random_spec(seed, 96, 48, 4))
        for t in range(1, 4):
            warped = warp_labels_by_flow(seq.labels[t - 1], seq.flows_at_target[t - 1])
            keep = ~seq.occlusions[t]
            assert np.array_equal(warped.labels[keep], seq.labels[t].labels[keep])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_palette_recovers_labels(self, seed):
        seq = generate(random_spec(seed, 128, 64, 3, num_classes=8))
        seg = PaletteSegmenter(seq.palette(), num_classes=8, pred_size=None)
        for frame, lab in zip(seq.frames, seq.labels):
            assert np.array_equal(seg.segment(frame).labels.labels, lab.labels)


class TestSpec:
    def test_round_trip(self):
        spec = crossing_spec(64, 32, 5)
        assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    @pytest.mark.parametrize("patch,field", [
        ({"width": 0}, "width"),
        ({"frame_count": 2.5}, "frame_count"),
        ({"bogus": 1}, "bogus"),
        ({"objects": [{"shape": "rect", "class_id": 1, "color": [1, 2, 3], "position": [0, 0],
                       "size": [200, 4]}]}, "objects[0].size"),
        ({"objects": [{"shape": "disk", "class_id": 1, "color": [1, 2, 3], "position": [9, 9]}]},
         "objects[0].radius"),
        ({"objects": [{"shape": "rect", "class_id": 0, "color": [1, 2, 3], "position": [0, 0],
                       "size": [4, 4]}]}, "objects[0].class_id"),
        ({"objects": [{"shape": "rect", "class_id": 1, "color": [1, 2, 3], "position": [0, 0],
                       "size": [4, 4], "velocity": [0.5, 0]}]}, "objects[0].velocity"),
        ({"objects": [{"shape": "tri", "class_id": 1, "color": [1, 2, 3], "position": [0, 0]}]},
         "objects[0].shape"),
        ({"objects": [{"shape": "rect", "class_id": 1, "color": [1, 2, 300], "position": [0, 0],
                       "size": [4, 4]}]}, "objects[0].color"),
    ])
    def test_errors_name_the_field(self, patch, field):
        data = {"width": 64, "height": 32, "frame_count": 3}
        data.update(patch)
        with pytest.raises(SpecError) as info:
            SceneSpec.from_dict(data)
        assert info.value.field == field

    def test_missing_required(self):
        with pytest.raises(SpecError, match="height"):
            SceneSpec.from_dict({"width": 4, "frame_count": 1})

    def test_fractional_flag(self):
        spec = SceneSpec(32, 16, 2, fractional=True, objects=(
            SceneObject("disk", 1, (9, 9, 9), (10, 8), (0.5, 0), radius=3),))
        assert generate(spec).flows[0].dx.max() == np.float32(0.5)


class TestWriteSequence:
    def test_layout_and_rerun(self, tmp_path):
        seq = generate(crossing_spec(64, 32, 3))
        a = write_sequence(seq, tmp_path / "a")
        b = write_sequence(generate(crossing_spec(64, 32, 3)), tmp_path / "b")
        names = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
        assert names == sorted(
            [f"frame_{i:06d}.png" for i in range(3)] + [f"gt/label_{i:06d}.png" for i in range(3)]
            + [f"occlusion/occ_{i:06d}.png" for i in range(3)]
            + [f"flow/flow_{i:06d}.flo" for i in range(2)] + ["scene.json"])
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
        assert np.array_equal(read_label_png(a / "gt" / "label_000001.png", 3).labels,
                              seq.labels[1].labels)
        assert np.array_equal(read_flo(a / "flow" / "flow_000000.flo").dx, seq.flows[0].dx)
        meta = json.loads((a / "scene.json").read_text())
        assert meta["num_classes"] == 3 and len(meta["palette"]) == 3
