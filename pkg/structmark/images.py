# Image representation, lossless PNG I/O and reference quality metrics.
#
# Everything that touches pixels on disk goes through this module. JPEG and
# every other lossy container is refused: lossy compression destroys the
# watermark, so we would rather fail than silently degrade.

import math
import os

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from skimage.metrics import structural_similarity
import torch

from structmark import config
from structmark import exceptions
from structmark import logutil


LOG, _ = logutil.setup(__name__)

BLANK = 255.0

# BT.601 luma weights in thousandths, so integer RGB gives integer luma*1000
LUMA_WEIGHTS = (299, 587, 114)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


class Image(object):
    """An H x W x 3 RGB image held as float64 values in [0, 255]."""

    def __init__(self, pixels, path=None):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise exceptions.InvalidImage(
                'invalid image: expected H x W x 3, got %s' % (pixels.shape,))
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise exceptions.InvalidImage('invalid image: empty')
        if pixels.min() < 0.0 or pixels.max() > BLANK:
            raise exceptions.InvalidImage(
                'invalid image: values outside [0, 255]')

        self.pixels = pixels
        self.path = path

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def unique_label(self):
        return ('image', self.path or '%dx%d' % (self.height, self.width))

    def luma(self):
        return luma(self.pixels)

    def quantized(self):
        return np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)

    def to_tensor(self):
        """A 3 x H x W float32 tensor in [0, 255]."""
        return torch.from_numpy(
            np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).float()

    @staticmethod
    def from_tensor(tensor, path=None):
        array = tensor.detach().cpu().double().numpy()
        if array.ndim == 4:
            if array.shape[0] != 1:
                raise exceptions.InvalidImage(
                    'invalid image: batch of %d given' % array.shape[0])
            array = array[0]
        return Image(np.clip(array.transpose(1, 2, 0), 0.0, BLANK), path=path)

    @staticmethod
    def constant(height, width, rgb=(BLANK, BLANK, BLANK)):
        pixels = np.empty((height, width, 3), dtype=np.float64)
        pixels[:, :] = rgb
        return Image(pixels)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (self.shape == other.shape and
                np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return 'Image(%dx%d, path=%s)' % (self.height, self.width, self.path)


def luma(pixels):
    """BT.601 luma of an H x W x 3 array, as float64."""
    pixels = np.asarray(pixels, dtype=np.float64)
    r, g, b = LUMA_WEIGHTS
    return (r * pixels[..., 0] + g * pixels[..., 1] + b * pixels[..., 2]) / 1000.0


def _open_png(path):
    if not os.path.exists(path):
        raise exceptions.InvalidImage('invalid image: %s does not exist' % path)

    try:
        handle = PILImage.open(path)
        handle.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise exceptions.InvalidImage('invalid image: %s: %s' % (path, e))

    if handle.format != 'PNG':
        raise exceptions.LossyFormat(
            '%s is %s, only lossless PNG is accepted' % (path, handle.format))
    return handle


def load_image(path):
    handle = _open_png(path)
    if handle.mode in ('RGBA', 'LA', 'I', 'I;16', 'F'):
        raise exceptions.InvalidImage(
            'invalid image: %s has unsupported mode %s' % (path, handle.mode))
    if handle.mode != 'RGB':
        handle = handle.convert('RGB')

    return Image(np.asarray(handle, dtype=np.float64), path=path)


def save_image(img, path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    PILImage.fromarray(img.quantized(), mode='RGB').save(path, format='PNG')
    img.path = path
    return path


def load_mask_array(path):
    """A 1-channel PNG as a binary H x W uint8 array (0 / 1)."""
    handle = _open_png(path)
    if handle.mode not in ('L', '1', 'P'):
        raise exceptions.InvalidImage(
            'invalid image: mask %s has mode %s' % (path, handle.mode))
    array = np.asarray(handle.convert('L'), dtype=np.uint8)
    values = np.unique(array)
    if not set(values.tolist()) <= {0, 255}:
        raise exceptions.NonBinaryMask(
            'mask %s holds values other than 0 and 255' % path)
    return (array == 255).astype(np.uint8)


def save_mask_array(mask, path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    array = (np.asarray(mask) > 0).astype(np.uint8) * 255
    PILImage.fromarray(array, mode='L').save(path, format='PNG')
    return path


def _check_pair(a, b):
    if a.shape != b.shape:
        raise exceptions.DimensionMismatch(
            'images differ in size: %s vs %s' % (a.shape, b.shape))


def psnr(a, b):
    _check_pair(a, b)
    mse = np.mean((a.pixels - b.pixels) ** 2)
    if mse == 0.0:
        return config.parsed.get('PSNR_CAP')
    return 10.0 * math.log10(BLANK * BLANK / mse)


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) on luma."""
    _check_pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise exceptions.DimensionMismatch(
            'SSIM needs at least %dx%d pixels, got %dx%d'
            % (SSIM_WINDOW, SSIM_WINDOW, a.height, a.width))

    # K1 = 0.01 and K2 = 0.03 are the skimage defaults
    return float(structural_similarity(
        a.luma(), b.luma(), data_range=BLANK, gaussian_weights=True,
        sigma=SSIM_SIGMA, use_sample_covariance=False))


class MetricReport(object):
    def __init__(self):
        self.records = []

    def add(self, path, reference, candidate):
        record = {
            'path': path,
            'psnr': psnr(reference, candidate),
            'ssim': ssim(reference, candidate),
        }
        self.records.append(record)
        return record

    @property
    def psnr(self):
        if not self.records:
            return None
        return float(np.mean([r['psnr'] for r in self.records]))

    @property
    def ssim(self):
        if not self.records:
            return None
        return float(np.mean([r['ssim'] for r in self.records]))

    def json_dump(self):
        return {
            'records': self.records,
            'mean_psnr': self.psnr,
            'mean_ssim': self.ssim,
        }
