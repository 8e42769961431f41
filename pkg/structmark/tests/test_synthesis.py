import mock
import numpy as np
import testtools
import torch

from structmark import codec
from structmark import exceptions
from structmark import images
from structmark import structure
from structmark import synthesis
from structmark.tests import base


def eye_mask(size=4):
    return structure.StructureMask(np.eye(size, dtype=np.uint8),
                                   structure.SOURCE_SOBEL)


class SynthesisTestCase(base.StructmarkTestCase):
    def test_synthesize(self):
        wm = synthesis.synthesize((20, 40, 60), eye_mask())
        self.assertEqual((4, 4, 3), wm.shape)
        np.testing.assert_array_equal([20, 40, 60], wm.pixels[1, 1])
        np.testing.assert_array_equal([255, 255, 255], wm.pixels[0, 1])
        self.assertEqual(('watermark', '20,40,60'), wm.unique_label())

    def test_empty_mask_is_blank(self):
        mask = structure.StructureMask(np.zeros((3, 3)),
                                       structure.SOURCE_SOBEL)
        wm = synthesis.synthesize((0, 0, 0), mask)
        self.assertEqual(255.0, wm.pixels.min())

    def test_blank_codeword_refused(self):
        with testtools.ExpectedException(exceptions.BlankCodeword):
            synthesis.synthesize((255, 255, 255), eye_mask())

    def test_off_grid_refused(self):
        with testtools.ExpectedException(exceptions.CodecException):
            synthesis.synthesize((21, 40, 60), eye_mask())

    def test_batch_matches_single(self):
        mask = eye_mask()
        single = synthesis.synthesize((20, 40, 60), mask).to_tensor()
        batch = synthesis.synthesize_batch(
            torch.tensor([[20.0, 40.0, 60.0]]),
            torch.from_numpy(mask.mask.astype(np.float32))[None, None])
        self.assertTrue(torch.equal(single, batch[0]))

    def test_every_color_on_the_foreground(self):
        cfg = codec.CodecConfig(20)
        mask = eye_mask()
        for index in (0, 1, 500, 1023):
            color = codec.encode_index(index, cfg)
            wm = synthesis.synthesize(color, mask, cfg)
            self.assertEqual(
                tuple(float(c) for c in color),
                tuple(wm.pixels[mask.mask.astype(bool)].mean(axis=0)))


class UnifiedTestCase(base.StructmarkTestCase):
    def test_default_logo(self):
        logo = synthesis.default_logo(32)
        self.assertEqual((32, 32, 4), logo.shape)
        self.assertTrue((logo[..., 3] == 255).any())
        self.assertTrue((logo[..., 3] == 0).any())
        np.testing.assert_array_equal(logo, synthesis.default_logo(32))

    def test_synthesize_unified_is_additive(self):
        wm = synthesis.UnifiedWatermark(synthesis.default_logo(8), (2, 2))
        cover = images.Image.constant(16, 16, (10.0, 10.0, 10.0))
        out = synthesis.synthesize_unified(cover, wm)
        np.testing.assert_array_equal(cover.pixels[:2], out.pixels[:2])
        np.testing.assert_allclose(
            np.clip(10.0 + wm.residual, 0, 255), out.pixels[2:10, 2:10])

    def test_same_residual_everywhere(self):
        wm = synthesis.default_unified()
        a = base.random_image(1, 64)
        b = base.random_image(2, 64)
        a = images.Image(np.clip(a.pixels, 0, 90))
        b = images.Image(np.clip(b.pixels, 0, 90))
        da = synthesis.synthesize_unified(a, wm).pixels - a.pixels
        db = synthesis.synthesize_unified(b, wm).pixels - b.pixels
        np.testing.assert_allclose(da, db)

    def test_clip_fraction(self):
        wm = synthesis.UnifiedWatermark(synthesis.default_logo(8), (2, 2))
        dark = images.Image.constant(16, 16, (0.0, 0.0, 0.0))
        self.assertEqual(0.0, synthesis.unified_clip_fraction(dark, wm))
        bright = images.Image.constant(16, 16, (250.0, 250.0, 250.0))
        expected = float(np.mean(wm.residual > 5.0))
        self.assertTrue(expected > 0.0)
        self.assertEqual(
            expected, synthesis.unified_clip_fraction(bright, wm))

    @mock.patch('structmark.synthesis.LOG')
    def test_clipping_is_logged(self, mock_log):
        wm = synthesis.UnifiedWatermark(synthesis.default_logo(8), (2, 2))
        synthesis.synthesize_unified(
            images.Image.constant(16, 16, (10.0, 10.0, 10.0)), wm)
        mock_log.withField.assert_not_called()
        synthesis.synthesize_unified(
            images.Image.constant(16, 16, (250.0, 250.0, 250.0)), wm)
        self.assertEqual('clip_fraction',
                         mock_log.withField.call_args[0][0])

    def test_overflow(self):
        wm = synthesis.UnifiedWatermark(synthesis.default_logo(8), (10, 10))
        with testtools.ExpectedException(exceptions.LogoOverflow):
            synthesis.synthesize_unified(images.Image.constant(16, 16), wm)

    def test_logo_must_be_rgba(self):
        with testtools.ExpectedException(exceptions.SynthesisException):
            synthesis.UnifiedWatermark(np.zeros((4, 4, 3)))

    def test_render_unified(self):
        wm = synthesis.UnifiedWatermark(synthesis.default_logo(8), (0, 0))
        target = synthesis.render_unified(wm, 12, 12)
        self.assertEqual(255.0, target.pixels[10:, 10:].min())
        self.assertTrue(target.pixels[:8, :8].min() < 255.0)
        tensor = synthesis.render_unified_tensor(wm, 12, 12, 3)
        self.assertEqual((3, 3, 12, 12), tuple(tensor.shape))

    def test_normalized_correlation(self):
        wm = synthesis.default_unified()
        target = synthesis.render_unified(wm, 64, 64).pixels
        self.assertAlmostEqual(
            1.0, synthesis.normalized_correlation(target, target))
        blank = np.full(target.shape, 255.0)
        self.assertEqual(0.0, synthesis.normalized_correlation(blank, target))

        t = torch.from_numpy(target.transpose(2, 0, 1)).float()[None]
        nc = synthesis.normalized_correlation_tensor(
            torch.cat([t, torch.full_like(t, 255.0)]), torch.cat([t, t]))
        self.assertAlmostEqual(1.0, float(nc[0]), places=5)
        self.assertEqual(0.0, float(nc[1]))
