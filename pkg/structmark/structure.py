# Extract the physical structure of an image: global edges (Sobel by
# default, Canny as an alternative) or an externally supplied semantic
# region mask.
#
# Gradients are computed on luma scaled by 1000 so that 8-bit inputs stay in
# exact integer arithmetic. Every sum is evaluated in an order that is
# symmetric under flips and quarter turns, which makes the masks commute
# exactly with those transforms.

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from structmark import config
from structmark import exceptions
from structmark import images
from structmark import logutil


LOG, _ = logutil.setup(__name__)

SOURCE_SOBEL = 'sobel'
SOURCE_CANNY = 'canny'
SOURCE_SEMANTIC = 'semantic-file'
SOURCES = (SOURCE_SOBEL, SOURCE_CANNY, SOURCE_SEMANTIC)

LUMA_SCALE = 1000.0

# The classic 5x5 Canny smoothing kernel, normalised by its sum (159)
CANNY_KERNEL = np.array([[2, 4, 5, 4, 2],
                         [4, 9, 12, 9, 4],
                         [5, 12, 15, 12, 5],
                         [4, 9, 12, 9, 4],
                         [2, 4, 5, 4, 2]], dtype=np.float64)
CANNY_KERNEL_SUM = 159.0


class StructureMask(object):
    def __init__(self, mask, source, params=None):
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise exceptions.MaskMismatch(
                'a structure mask is H x W, got %s' % (mask.shape,))
        if not np.isin(mask, (0, 1)).all():
            raise exceptions.NonBinaryMask('mask values must be 0 or 1')
        if source not in SOURCES:
            raise exceptions.StructureException(
                'unknown structure source %s' % source)

        self.mask = mask.astype(np.uint8)
        self.source = source
        self.params = params or {}

    @property
    def shape(self):
        return self.mask.shape

    @property
    def foreground(self):
        return int(self.mask.sum())

    @property
    def foreground_ratio(self):
        return self.foreground / float(self.mask.size)

    def complement(self):
        return StructureMask(1 - self.mask, self.source, self.params)

    def usable(self):
        ratio = self.foreground_ratio
        low = config.parsed.get('MIN_FOREGROUND_RATIO')
        high = config.parsed.get('MAX_FOREGROUND_RATIO')
        if ratio <= low or ratio >= high:
            LOG.withFields({'source': self.source,
                            'foreground_ratio': ratio}).warning(
                'Structure mask outside the usable foreground range')
            return False
        return True

    def unique_label(self):
        return ('structure', self.source)

    def __eq__(self, other):
        if not isinstance(other, StructureMask):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)


def _scaled_luma(img):
    r, g, b = images.LUMA_WEIGHTS
    p = img.pixels
    return r * p[..., 0] + g * p[..., 1] + b * p[..., 2]


def _sobel(plane):
    """Sobel gradients (gx along columns, gy along rows) with reflect borders."""
    p = np.pad(plane, 1, mode='reflect')

    vertical = (p[:-2, :] + p[2:, :]) + 2.0 * p[1:-1, :]
    gx = vertical[:, 2:] - vertical[:, :-2]

    horizontal = (p[:, :-2] + p[:, 2:]) + 2.0 * p[:, 1:-1]
    gy = horizontal[2:, :] - horizontal[:-2, :]
    return gx, gy


def _magnitude(gx, gy):
    return np.sqrt(gx * gx + gy * gy)


def gradient_magnitude(img):
    """Sobel gradient magnitude of the luma plane, in luma units."""
    gx, gy = _sobel(_scaled_luma(img))
    return _magnitude(gx, gy) / LUMA_SCALE


def otsu_threshold(magnitude):
    if magnitude.max() == magnitude.min():
        return float(magnitude.max())
    return float(threshold_otsu(magnitude))


def sobel_mask(img, threshold=None):
    magnitude = gradient_magnitude(img)
    if not threshold:
        threshold = otsu_threshold(magnitude)

    return StructureMask((magnitude > threshold).astype(np.uint8),
                         SOURCE_SOBEL, {'threshold': threshold})


def _smooth(plane):
    h, w = plane.shape
    p = np.pad(plane, 2, mode='reflect')
    out = np.zeros_like(plane)
    for dy in range(5):
        for dx in range(5):
            out += CANNY_KERNEL[dy, dx] * p[dy:dy + h, dx:dx + w]
    return out


def _shifted(plane, dy, dx):
    """plane[y + dy, x + dx], zero outside the image."""
    h, w = plane.shape
    p = np.pad(plane, 1, mode='constant')
    return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def direction_bins(gx, gy):
    """Quantise gradient angles (mod 180 degrees) to 0, 45, 90 and 135."""
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(angle.shape, dtype=np.int64)
    bins[(angle >= 22.5) & (angle < 67.5)] = 45
    bins[(angle >= 67.5) & (angle < 112.5)] = 90
    bins[(angle >= 112.5) & (angle < 157.5)] = 135
    return bins


# Step (dx, dy) along the gradient for each direction bin
BIN_STEPS = {0: (1, 0), 45: (1, 1), 90: (0, 1), 135: (-1, 1)}


def non_max_suppression(magnitude, bins):
    """Keep ridge pixels. Ties go to the pixel on the negative side, so an
    ideal step produces a one pixel wide response."""
    keep = np.zeros(magnitude.shape, dtype=bool)
    for b, (dx, dy) in BIN_STEPS.items():
        ahead = _shifted(magnitude, dy, dx)
        behind = _shifted(magnitude, -dy, -dx)
        keep |= ((bins == b) & (magnitude > behind) & (magnitude >= ahead))
    return np.where(keep, magnitude, 0.0)


def hysteresis(suppressed, low, high):
    weak = suppressed >= low
    strong = suppressed >= high
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros(suppressed.shape, dtype=np.uint8)
    keep = np.unique(labels[strong])
    keep = keep[keep > 0]
    return np.isin(labels, keep).astype(np.uint8)


def canny_mask(img, low=None, high=None):
    if low is None:
        low = config.parsed.get('CANNY_LOW')
    if high is None:
        high = config.parsed.get('CANNY_HIGH')
    if low < 0 or low >= high:
        raise exceptions.InvalidThresholds(
            'canny thresholds need 0 <= low < high, got %s / %s' % (low, high))

    smoothed = _smooth(_scaled_luma(img))
    gx, gy = _sobel(smoothed)
    magnitude = _magnitude(gx, gy) / (LUMA_SCALE * CANNY_KERNEL_SUM)
    suppressed = non_max_suppression(magnitude, direction_bins(gx, gy))
    edges = hysteresis(suppressed, low, high)
    return StructureMask(edges, SOURCE_CANNY, {'low': low, 'high': high})


def semantic_mask(img, mask_path):
    mask = images.load_mask_array(mask_path)
    if mask.shape != (img.height, img.width):
        raise exceptions.MaskMismatch(
            'mask %s is %s, image is %dx%d'
            % (mask_path, mask.shape, img.height, img.width))
    return StructureMask(mask, SOURCE_SEMANTIC, {'path': mask_path})


def extract(img, source=None, mask_path=None):
    """The configured structure extractor applied to an image."""
    if source is None:
        source = config.parsed.get('STRUCTURE_SOURCE')

    if source == SOURCE_SOBEL:
        return sobel_mask(img, config.parsed.get('SOBEL_THRESHOLD'))
    if source == SOURCE_CANNY:
        return canny_mask(img)
    if source == SOURCE_SEMANTIC:
        if not mask_path:
            raise exceptions.StructureException(
                'semantic structures need a mask file')
        return semantic_mask(img, mask_path)
    raise exceptions.StructureException('unknown structure source %s' % source)


def iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)
