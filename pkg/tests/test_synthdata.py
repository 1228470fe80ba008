import numpy as np
import pytest
from scipy import ndimage

from stylealign.errors import ConfigurationError
from stylealign.synthdata import (
    SOURCE_STYLE,
    TARGET_STYLE,
    SceneSpec,
    StyleParams,
    generate_dataset,
    style_shift,
)


class TestGenerateDataset:
    def test_deterministic(self):
        a = generate_dataset(SceneSpec(), SOURCE_STYLE, 1, 7)[0]
        b = generate_dataset(SceneSpec(), SOURCE_STYLE, 1, 7)[0]
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.landmarks, b.landmarks)

    def test_geometry_independent_of_style(self):
        src = generate_dataset(SceneSpec(), SOURCE_STYLE, 3, 5)
        tgt = generate_dataset(SceneSpec(), TARGET_STYLE, 3, 5)
        for s, t in zip(src, tgt):
            np.testing.assert_array_equal(s.landmarks, t.landmarks)
            assert not np.array_equal(s.image, t.image)
            assert (s.domain, t.domain) == ("source", "target")

    def test_segmentation_mask_independent_of_style(self):
        spec = SceneSpec(task="segmentation")
        s = generate_dataset(spec, SOURCE_STYLE, 1, 2)[0]
        t = generate_dataset(spec, TARGET_STYLE, 1, 2)[0]
        np.testing.assert_array_equal(s.mask, t.mask)
        assert s.landmarks is None and s.task == "segmentation"
        assert 0 < s.mask.mean() < 1

    def test_count_and_landmarks(self):
        data = generate_dataset(SceneSpec(), SOURCE_STYLE, 200, 1)
        assert len(data) == 200
        assert all(s.landmarks.shape == (4, 2) for s in data)
        assert len({s.id for s in data}) == 200

    def test_images_in_range(self):
        for s in generate_dataset(SceneSpec(), TARGET_STYLE, 5, 3):
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_landmarks_sit_on_bright_spots(self):
        s = generate_dataset(SceneSpec(speckle_seed=1), SOURCE_STYLE, 1, 4)[0]
        smooth = ndimage.gaussian_filter(s.image, 1.5)
        for x, y in np.round(s.landmarks).astype(int):
            assert smooth[y, x] > np.median(smooth) + 0.2

    @pytest.mark.parametrize("bad", [
        SceneSpec(task="classification"), SceneSpec(image_size=8), SceneSpec(num_landmarks=0),
        SceneSpec(band_rows=(40, 30)), SceneSpec(pixel_spacing=0.0),
    ])
    def test_invalid_spec(self, bad):
        with pytest.raises(ConfigurationError):
            generate_dataset(bad, SOURCE_STYLE, 1, 0)

    def test_invalid_style(self):
        with pytest.raises(ConfigurationError):
            generate_dataset(SceneSpec(), StyleParams(gamma=-1), 1, 0)


class TestStyleShift:
    def test_identity(self):
        img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
        for seed in (0, 3):
            np.testing.assert_array_equal(style_shift(img, SOURCE_STYLE, seed), img)

    def test_gamma_closed_form(self):
        out = style_shift(np.full((8, 8), 0.5), StyleParams(gamma=2.0))
        np.testing.assert_allclose(out, 0.25, atol=1e-7)

    def test_monotone_without_spatial_mixing(self):
        rng = np.random.default_rng(1)
        img = rng.random((12, 12))
        out = style_shift(img, StyleParams(gamma=1.5, contrast_scale=0.8, speckle_strength=0.0, intensity_offset=0.05))
        order = np.argsort(img.ravel())
        assert np.all(np.diff(out.ravel()[order]) >= -1e-7)

    def test_clipped(self):
        img = np.random.default_rng(2).random((16, 16))
        out = style_shift(img, StyleParams(contrast_scale=3.0, intensity_offset=0.4, speckle_strength=0.9), seed=1)
        assert out.min() >= 0 and out.max() <= 1

    def test_target_is_hazier(self):
        s = generate_dataset(SceneSpec(), SOURCE_STYLE, 1, 0)[0]
        t = generate_dataset(SceneSpec(), TARGET_STYLE, 1, 0)[0]
        assert np.median(t.image) > np.median(s.image) + 0.1
        assert t.image.max() - np.median(t.image) < s.image.max() - np.median(s.image)
