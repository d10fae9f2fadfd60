import numpy as np
import pytest
from sklearn.base import clone

from evs.exceptions import FormatError, MissingFrameError, ValidationError
from evs.imagery import (
    FeatureMap,
    Frame,
    LabelMap,
    write_features,
    write_label_png,
    write_probabilities,
)
from evs.segmentation import (
    OracleRefiner,
    PaletteSegmenter,
    PassthroughRefiner,
    PrecomputedSegmenter,
    SegmenterOutput,
)
from evs.synthgen import crossing_spec, generate, write_sequence

from conftest import random_probs, solid_frame

PALETTE = [((0, 0, 0), 0), ((255, 0, 0), 1), ((0, 0, 255), 2)]


def painted(w=16, h=8):
    px = np.zeros((h, w, 3), np.uint8)
    px[:, w // 2:, 0] = 255
    px[h // 2:, :w // 2, 2] = 255
    lab = np.zeros((h, w), np.uint8)
    lab[:, w // 2:] = 1
    lab[h // 2:, :w // 2] = 2
    return Frame(px, 0), lab


class TestPalette:
    def test_exact_palette_image(self):
        frame, lab = painted()
        out = PaletteSegmenter(PALETTE, pred_size=None).segment(frame)
        assert isinstance(out, SegmenterOutput)
        assert np.array_equal(out.labels.labels, lab)
        np.testing.assert_allclose(out.probabilities.values.sum(axis=2), 1.0)

    def test_single_class(self):
        out = PaletteSegmenter([((9, 9, 9), 0)], pred_size=None).segment(solid_frame(6, 4, 200))
        assert np.all(out.probabilities.values == 1.0)

    def test_tie_goes_to_lower_id(self):
        seg = PaletteSegmenter([((0, 0, 0), 3), ((100, 100, 100), 1)], num_classes=4, pred_size=None)
        out = seg.segment(solid_frame(4, 4, 50))
        assert np.all(out.labels.labels == 1)

    def test_absent_classes_have_zero_probability(self):
        out = PaletteSegmenter([((0, 0, 0), 0), ((9, 9, 9), 2)], pred_size=None).segment(solid_frame(3, 3))
        assert out.num_classes == 3 and np.all(out.probabilities.values[..., 1] == 0)

    @pytest.mark.parametrize("palette", [[], [((0, 0, 0), 1), ((1, 1, 1), 1)], [((0, 0), 0)]])
    def test_bad_palettes(self, palette):
        with pytest.raises(ValidationError):
            PaletteSegmenter(palette)

    def test_bad_softness(self):
        with pytest.raises(ValidationError):
            PaletteSegmenter(PALETTE, softness=0)

    def test_deterministic_and_clonable(self):
        frame, _ = painted(64, 32)
        seg = PaletteSegmenter(PALETTE, pred_size=(32, 16))
        a, b = seg.segment(frame), clone(seg).segment(frame)
        assert a.probabilities.values.tobytes() == b.probabilities.values.tobytes()
        assert a.features.values.tobytes() == b.features.values.tobytes()

    def test_default_sizes(self):
        frame, _ = painted(1024, 512)
        out = PaletteSegmenter(PALETTE).segment(frame)
        assert (out.probabilities.width, out.probabilities.height) == (512, 256)
        assert (out.features.width, out.features.height, out.features.channels) == (128, 64, 8)

    def test_half_resolution_input(self):
        frame, lab = painted(64, 32)
        out = PaletteSegmenter(PALETTE, pred_size=(64, 32)).segment(frame, 0.5)
        assert (out.labels.width, out.labels.height) == (64, 32)
        assert (out.labels.labels == lab).mean() > 0.95
        with pytest.raises(ValidationError):
            PaletteSegmenter(PALETTE).segment(frame, 0.25)

    def test_features_of_solid_frame(self):
        out = PaletteSegmenter(PALETTE, feature_size=(4, 2)).segment(solid_frame(16, 8, 51))
        f = out.features.values
        np.testing.assert_allclose(f[..., :3], 0.2, atol=1e-6)
        np.testing.assert_allclose(f[..., 3:6], 0.0, atol=1e-6)

    def test_from_scene_recovers_labels(self, tmp_path):
        seq = generate(crossing_spec(128, 64, 3))
        write_sequence(seq, tmp_path)
        seg = PaletteSegmenter.from_scene(tmp_path / "scene.json", pred_size=None)
        out = seg.segment(seq.frames[1])
        assert (out.labels.labels == seq.labels[1].labels).mean() > 0.97
        assert seg.classes == seq.spec.classes


@pytest.fixture
def exported(tmp_path, rng):
    for i in range(30):
        write_probabilities(tmp_path / f"probs_{i:06d}.bin", random_probs(rng, 8, 16, 3))
    write_features(tmp_path / "feat_000007.bin", FeatureMap(rng.random((2, 4, 5)).astype(np.float32)))
    return tmp_path


class TestPrecomputed:
    def test_indices_and_lookup(self, exported):
        seg = PrecomputedSegmenter(exported)
        assert seg.indices() == list(range(30))
        out = seg.segment(solid_frame(16, 8, index=7))
        assert out.features.channels == 5
        assert seg.segment(solid_frame(16, 8, index=3)).features.values.shape == (2, 4, 8)

    def test_missing_frame(self, exported):
        with pytest.raises(MissingFrameError, match="30"):
            PrecomputedSegmenter(exported).segment(solid_frame(16, 8, index=30))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingFrameError):
            PrecomputedSegmenter(tmp_path / "nope")

    def test_corrupt_file_is_named(self, exported):
        (exported / "probs_000004.bin").write_bytes(b"junk")
        with pytest.raises(FormatError, match="probs_000004"):
            PrecomputedSegmenter(exported).segment(solid_frame(16, 8, index=4))


class TestRefiners:
    def test_oracle_one_hot(self, rng):
        gt = LabelMap(rng.integers(0, 3, (8, 16)).astype(np.uint8), 3)
        warped = random_probs(rng, 8, 16, 3)
        out = OracleRefiner({0: gt}).refine(solid_frame(16, 8), warped, None)
        assert np.array_equal(out.argmax().labels, gt.labels)
        assert np.all(out.values.max(axis=2) == 1.0)

    def test_oracle_keeps_ignore_pixels(self, rng):
        lab = np.zeros((4, 4), np.uint8)
        lab[0, 0] = 255
        warped = random_probs(rng, 4, 4, 2)
        out = OracleRefiner([LabelMap(lab, 2)]).refine(solid_frame(4, 4), warped, None)
        assert np.array_equal(out.values[0, 0], warped.values[0, 0])

    def test_oracle_resizes_and_errors(self, rng, tmp_path):
        gt = LabelMap(np.ones((16, 32), np.uint8), 3)
        out = OracleRefiner(lambda i: gt).refine(solid_frame(32, 16), random_probs(rng, 8, 16, 3), None)
        assert np.all(out.argmax().labels == 1)
        with pytest.raises(ValidationError):
            OracleRefiner(lambda i: gt).refine(solid_frame(32, 16), random_probs(rng, 8, 16, 4), None)
        with pytest.raises(MissingFrameError):
            OracleRefiner({}).refine(solid_frame(4, 4), random_probs(rng, 4, 4, 3), None)
        write_label_png(tmp_path / "label_000002.png", gt)
        ref = OracleRefiner.from_directory(tmp_path, 3)
        assert ref.lookup(2).num_classes == 3
        with pytest.raises(MissingFrameError):
            ref.lookup(1)

    def test_passthrough(self, rng):
        p = random_probs(rng, 4, 4, 2)
        assert PassthroughRefiner().refine(None, p, None) is p
