import os

import numpy as np
from PIL import Image as PILImage
import testtools
import torch

from structmark import exceptions
from structmark import images
from structmark.tests import base


class ImageTestCase(base.StructmarkTestCase):
    def test_invalid_shapes(self):
        for bad in (np.zeros((4, 4)), np.zeros((4, 4, 4)),
                    np.zeros((0, 4, 3))):
            with testtools.ExpectedException(exceptions.InvalidImage):
                images.Image(bad)

    def test_invalid_values(self):
        with testtools.ExpectedException(exceptions.InvalidImage):
            images.Image(np.full((2, 2, 3), 256.0))
        with testtools.ExpectedException(exceptions.InvalidImage):
            images.Image(np.full((2, 2, 3), -1.0))

    def test_tensor_layout(self):
        img = base.random_image(1, 8)
        t = img.to_tensor()
        self.assertEqual((3, 8, 8), tuple(t.shape))
        self.assertEqual(torch.float32, t.dtype)
        self.assertEqual(img, images.Image.from_tensor(t))

    def test_from_tensor_clamps(self):
        t = torch.full((1, 3, 2, 2), 300.0)
        self.assertEqual(255.0, images.Image.from_tensor(t).pixels.max())

    def test_from_tensor_rejects_batches(self):
        with testtools.ExpectedException(exceptions.InvalidImage):
            images.Image.from_tensor(torch.zeros((2, 3, 2, 2)))

    def test_luma(self):
        img = images.Image.constant(1, 1, (100.0, 50.0, 200.0))
        self.assertAlmostEqual(0.299 * 100 + 0.587 * 50 + 0.114 * 200,
                               float(img.luma()[0, 0]))

    def test_png_round_trip(self):
        path = os.path.join(self.tempdir(), 'a.png')
        img = base.random_image(2, 16)
        images.save_image(img, path)
        loaded = images.load_image(path)
        self.assertEqual(img, loaded)
        self.assertEqual(path, loaded.path)

    def test_jpeg_refused(self):
        path = os.path.join(self.tempdir(), 'a.jpg')
        PILImage.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(
            path, format='JPEG')
        with testtools.ExpectedException(exceptions.LossyFormat):
            images.load_image(path)

    def test_missing_file(self):
        with testtools.ExpectedException(exceptions.InvalidImage):
            images.load_image('/nonexistent/banana.png')

    def test_rgba_refused(self):
        path = os.path.join(self.tempdir(), 'a.png')
        PILImage.fromarray(np.zeros((8, 8, 4), dtype=np.uint8),
                           mode='RGBA').save(path, format='PNG')
        with testtools.ExpectedException(exceptions.InvalidImage):
            images.load_image(path)

    def test_mask_round_trip(self):
        path = os.path.join(self.tempdir(), 'm.png')
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[1:3, 2:5] = 1
        images.save_mask_array(mask, path)
        np.testing.assert_array_equal(mask, images.load_mask_array(path))

    def test_non_binary_mask(self):
        path = os.path.join(self.tempdir(), 'm.png')
        PILImage.fromarray(np.full((4, 4), 7, dtype=np.uint8),
                           mode='L').save(path, format='PNG')
        with testtools.ExpectedException(exceptions.NonBinaryMask):
            images.load_mask_array(path)


class MetricTestCase(base.StructmarkTestCase):
    def test_psnr_identical_is_capped(self):
        img = base.random_image(3)
        self.assertEqual(99.0, images.psnr(img, img))

    def test_psnr_known_value(self):
        a = images.Image.constant(4, 4, (100.0, 100.0, 100.0))
        b = images.Image.constant(4, 4, (110.0, 110.0, 110.0))
        self.assertAlmostEqual(10.0 * np.log10(255.0 ** 2 / 100.0),
                               images.psnr(a, b))

    def test_psnr_symmetric(self):
        a = base.random_image(4)
        b = base.random_image(5)
        self.assertAlmostEqual(images.psnr(a, b), images.psnr(b, a))

    def test_psnr_size_mismatch(self):
        with testtools.ExpectedException(exceptions.DimensionMismatch):
            images.psnr(base.random_image(1, 8), base.random_image(1, 16))

    def test_ssim_identical(self):
        img = base.random_image(6)
        self.assertAlmostEqual(1.0, images.ssim(img, img), places=6)

    def test_ssim_range(self):
        value = images.ssim(base.random_image(7), base.random_image(8))
        self.assertTrue(-1.0 <= value < 0.5)

    def test_ssim_inverted_is_negative(self):
        img = base.random_image(12)
        inverted = images.Image(255.0 - img.pixels)
        self.assertTrue(images.ssim(img, inverted) < 0.0)

    def test_ssim_of_flat_images(self):
        # Zero variance leaves only the luminance term
        a = images.Image.constant(16, 16, (100, 100, 100))
        b = images.Image.constant(16, 16, (150, 150, 150))
        c1 = (0.01 * 255.0) ** 2
        expected = (2 * 100.0 * 150.0 + c1) / (100.0 ** 2 + 150.0 ** 2 + c1)
        self.assertAlmostEqual(expected, images.ssim(a, b), places=6)

    def test_ssim_too_small(self):
        with testtools.ExpectedException(exceptions.DimensionMismatch):
            images.ssim(base.random_image(1, 8), base.random_image(2, 8))

    def test_metric_report(self):
        report = images.MetricReport()
        a = base.random_image(9)
        report.add('a.png', a, a)
        report.add('b.png', a, base.random_image(10))
        dumped = report.json_dump()
        self.assertEqual(2, len(dumped['records']))
        self.assertTrue(dumped['mean_psnr'] < 99.0)
        self.assertEqual('a.png', dumped['records'][0]['path'])
