import numpy as np
import pytest
from hypothesis import given, strategies as st

from evs.exceptions import DimensionMismatchError, ValidationError
from evs.imagery import FeatureMap, FlowField, LabelMap
from evs.propagation import (
    MappingField,
    TileGrid,
    mapping_at,
    mapping_from_flow,
    remap_features,
    remap_labels,
    remap_probabilities,
)

from conftest import random_probs, stripes

GRIDS = [TileGrid(1, 1), TileGrid(3, 3), TileGrid(4, 4)]


def shift_oracle(a, dx, dy):
    """out[y, x] = a[clamp(y - dy), clamp(x - dx)] for integer shifts."""
    h, w = a.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return a[ys[:, None], xs[None, :]]


class TestMapping:
    def test_zero_flow_is_identity(self):
        m = mapping_from_flow(FlowField.zeros(5, 4))
        ys, xs = np.mgrid[0:4, 0:5]
        assert np.array_equal(m.src_x, xs) and np.array_equal(m.src_y, ys)

    def test_uniform_flow(self):
        m = mapping_from_flow(FlowField.uniform(8, 8, 2, 0))
        assert m.src_x[3, 5] == 3 and m.src_y[3, 5] == 3

    def test_clamping(self):
        # positive flow at the origin points outside the image
        m = mapping_from_flow(FlowField.uniform(8, 8, 3, 3))
        assert (m.src_x[0, 0], m.src_y[0, 0]) == (0, 0)
        m = mapping_from_flow(FlowField.uniform(8, 8, -3, -3))
        assert (m.src_x[7, 7], m.src_y[7, 7]) == (7, 7)

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            MappingField(np.array([[np.inf]]), np.array([[0.0]]))

    def test_rounding_half_away_from_zero(self):
        lab = LabelMap(np.arange(6, dtype=np.uint8)[None, :], 6)
        out = remap_labels(lab, mapping_from_flow(FlowField.uniform(6, 1, -0.5, 0)))
        # sources x + 0.5 round up, clamped at the right border
        assert out.labels[0].tolist() == [1, 2, 3, 4, 5, 5]

    def test_mapping_at_rescales(self):
        m = mapping_at(FlowField.uniform(16, 8, 4, 2), 8, 4)
        assert m.src_x[2, 5] == 3 and m.src_y[2, 3] == 1


class TestRemapLabels:
    def test_identity(self, rng):
        lab = LabelMap(rng.integers(0, 5, (13, 17)), 5)
        for g in GRIDS:
            out = remap_labels(lab, MappingField.identity(17, 13), g)
            assert np.array_equal(out.labels, lab.labels)

    def test_stripe_shift(self):
        lab = stripes(24, 10)
        out = remap_labels(lab, mapping_from_flow(FlowField.uniform(24, 10, 3, 0)))
        np.testing.assert_array_equal(out.labels, shift_oracle(lab.labels, 3, 0))
        # the three left columns replicate column 0
        assert np.all(out.labels[:, :3] == lab.labels[:, :1])

    def test_fractional_offsets_round_to_identity(self, rng):
        lab = LabelMap(rng.integers(0, 5, (9, 9)), 5)
        out = remap_labels(lab, mapping_from_flow(FlowField.uniform(9, 9, 0.4, -0.4)))
        assert np.array_equal(out.labels, lab.labels)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            remap_labels(stripes(8, 8), MappingField.identity(8, 4))

    @given(st.integers(2, 24), st.integers(2, 24), st.integers(0, 2 ** 31),
           st.sampled_from(GRIDS + [TileGrid(2, 5), TileGrid(7, 1)]))
    def test_tile_independence_and_closure(self, w, h, seed, grid):
        r = np.random.default_rng(seed)
        lab = LabelMap(r.integers(0, 4, (h, w)) * 2, 8)
        m = MappingField(r.uniform(-3, w + 2, (h, w)), r.uniform(-3, h + 2, (h, w)))
        ref = remap_labels(lab, m, TileGrid(1, 1))
        out = remap_labels(lab, m, grid, n_jobs=3)
        assert np.array_equal(out.labels, ref.labels)
        assert out.label_set() <= lab.label_set()

    @given(st.integers(0, 2 ** 31))
    def test_composition_of_integer_mappings(self, seed):
        r = np.random.default_rng(seed)
        h, w = 9, 11
        lab = LabelMap(r.integers(0, 6, (h, w)), 6)
        ax, ay = r.integers(0, w, (h, w)), r.integers(0, h, (h, w))
        bx, by = r.integers(0, w, (h, w)), r.integers(0, h, (h, w))
        a, b = MappingField(ax, ay), MappingField(bx, by)
        two_step = remap_labels(remap_labels(lab, a), b)
        composed = MappingField(ax[by, bx], ay[by, bx])
        assert np.array_equal(two_step.labels, remap_labels(lab, composed).labels)


class TestRemapProbabilities:
    def test_identity_bit_exact(self, rng):
        p = random_probs(rng, 6, 7, 3)
        out = remap_probabilities(p, MappingField.identity(7, 6))
        assert out.values.tobytes() == p.values.tobytes()

    def test_shift_oracle(self, rng):
        p = random_probs(rng, 4, 4, 2)
        out = remap_probabilities(p, mapping_from_flow(FlowField.uniform(4, 4, 1, 1)))
        np.testing.assert_array_equal(out.values, shift_oracle(p.values, 1, 1))

    @given(st.integers(0, 2 ** 31))
    def test_gather_semantics(self, seed):
        r = np.random.default_rng(seed)
        p = random_probs(r, 5, 6, 4)
        m = MappingField(r.uniform(0, 5, (5, 6)), r.uniform(0, 4, (5, 6)))
        out = remap_probabilities(p, m, TileGrid(3, 3))
        src = {tuple(v) for v in p.values.reshape(-1, 4)}
        assert all(tuple(v) in src for v in out.values.reshape(-1, 4))
        assert np.abs(out.values.sum(axis=2) - 1).max() < 1e-5


class TestRemapFeatures:
    def test_identity_and_shift(self, rng):
        f = FeatureMap(rng.random((8, 10, 3)).astype(np.float32))
        assert np.array_equal(remap_features(f, MappingField.identity(10, 8)).values, f.values)
        m = mapping_at(FlowField.uniform(40, 32, -8, 4), 10, 8)
        out = remap_features(f, m)
        np.testing.assert_array_equal(out.values, shift_oracle(f.values, -2, 1))

    def test_constant_map_unchanged(self, rng):
        f = FeatureMap(np.full((6, 6, 8), 0.25, np.float32))
        m = MappingField(rng.uniform(0, 6, (6, 6)), rng.uniform(0, 6, (6, 6)))
        assert np.array_equal(remap_features(f, m).values, f.values)


class TestTileGrid:
    def test_invalid(self):
        with pytest.raises(ValidationError):
            TileGrid(0, 2)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 40), st.integers(1, 40))
    def test_partition(self, rows, cols, w, h):
        cover = np.zeros((h, w), int)
        for y0, y1, x0, x1 in TileGrid(rows, cols).tiles(w, h):
            cover[y0:y1, x0:x1] += 1
        assert np.all(cover == 1)
