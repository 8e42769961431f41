# Ground-truth watermark images. A structure-aligned watermark paints the
# codeword color on the mask foreground and the blank color everywhere
# else. The unified baseline instead composites one fixed logo on every
# cover.

import numpy as np
import torch

from structmark import codec
from structmark import config
from structmark import exceptions
from structmark import images
from structmark import logutil


LOG, _ = logutil.setup(__name__)


class WatermarkImage(object):
    def __init__(self, pixels, color, mask):
        self.pixels = pixels
        self.color = tuple(color)
        self.mask = mask

    @property
    def shape(self):
        return self.pixels.shape

    def to_image(self):
        return images.Image(self.pixels)

    def to_tensor(self):
        return self.to_image().to_tensor()

    def unique_label(self):
        return ('watermark', '%d,%d,%d' % self.color)


def _check_codeword(color, cfg):
    color = tuple(int(c) for c in color)
    if color == cfg.reserved_blank:
        raise exceptions.BlankCodeword(
            'the blank color is reserved for unwatermarked images')
    for c in color:
        if c % cfg.color_step or c < 0 or c > cfg.max_channel:
            raise exceptions.CodecException(
                'color %s is not on the grid of step %d'
                % (color, cfg.color_step))
    return color


def synthesize(color, mask, cfg=None):
    """W = C (x) M: the codeword on the foreground, blank elsewhere."""
    if cfg is None:
        cfg = codec.CodecConfig(config.parsed.get('COLOR_STEP'))
    color = _check_codeword(color, cfg)

    foreground = mask.mask.astype(bool)
    pixels = np.full(mask.shape + (3,), images.BLANK, dtype=np.float64)
    pixels[foreground] = color
    return WatermarkImage(pixels, color, mask)


def synthesize_batch(colors, masks):
    """Tensor form used in training.

    colors is B x 3 and masks is B x 1 x H x W with values in {0, 1}; the
    result is B x 3 x H x W in [0, 255].
    """
    colors = colors.to(masks.dtype).view(-1, 3, 1, 1)
    return masks * colors + (1.0 - masks) * images.BLANK


class UnifiedWatermark(object):
    """A fixed RGBA logo drawn at a fixed offset on every cover."""

    def __init__(self, logo, offset=(0, 0)):
        logo = np.asarray(logo, dtype=np.float64)
        if logo.ndim != 3 or logo.shape[2] != 4:
            raise exceptions.SynthesisException(
                'a unified logo is H x W x 4 (RGBA), got %s' % (logo.shape,))
        self.logo = logo
        self.offset = tuple(int(o) for o in offset)

    @property
    def alpha(self):
        return self.logo[..., 3:4] / 255.0

    @property
    def residual(self):
        """delta: the additive contribution of the logo."""
        return self.logo[..., :3] * self.alpha

    def region(self, height, width):
        top, left = self.offset
        h, w = self.logo.shape[:2]
        if top < 0 or left < 0 or top + h > height or left + w > width:
            raise exceptions.LogoOverflow(
                'logo %dx%d at %s does not fit in %dx%d'
                % (h, w, self.offset, height, width))
        return slice(top, top + h), slice(left, left + w)

    def unique_label(self):
        return ('unified', '%dx%d@%d,%d' % (self.logo.shape[:2] + self.offset))


def default_logo(size=None):
    """A deterministic ring-and-cross logo, opaque on the drawing only."""
    if size is None:
        size = config.parsed.get('UNIFIED_LOGO_SIZE')

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    radius = np.hypot(yy - centre, xx - centre)
    ring = np.abs(radius - size * 0.35) < max(1.0, size / 16.0)
    cross = ((np.abs(yy - centre) < max(1.0, size / 20.0)) |
             (np.abs(xx - centre) < max(1.0, size / 20.0))) & (
                radius < size * 0.35)

    logo = np.zeros((size, size, 4), dtype=np.float64)
    logo[ring] = (40.0, 80.0, 160.0, 255.0)
    logo[cross] = (160.0, 40.0, 40.0, 255.0)
    return logo


def default_unified():
    return UnifiedWatermark(default_logo(),
                            config.parsed.get('UNIFIED_LOGO_OFFSET'))


def unified_clip_fraction(cover, wm):
    """Fraction of logo-region channel values the residual pushes out of
    [0, 255]. Clipped values no longer carry the shared residual."""
    rows, cols = wm.region(cover.height, cover.width)
    raw = cover.pixels[rows, cols] + wm.residual
    return float(np.mean((raw < 0.0) | (raw > images.BLANK)))


def synthesize_unified(cover, wm):
    """Add the same logo residual to a cover. Only used by the baseline.

    The residual is identical across covers only where nothing clips;
    bright covers lose part of it at 255.
    """
    rows, cols = wm.region(cover.height, cover.width)
    pixels = cover.pixels.copy()
    clipped = unified_clip_fraction(cover, wm)
    if clipped > 0.0:
        LOG.withField('clip_fraction', '%.4f' % clipped).debug(
            'Unified residual clipped')
    pixels[rows, cols] = np.clip(pixels[rows, cols] + wm.residual,
                                 0.0, images.BLANK)
    return images.Image(pixels)


def render_unified(wm, height, width):
    """The logo alpha-blended onto the blank image: EXNet's baseline target."""
    rows, cols = wm.region(height, width)
    pixels = np.full((height, width, 3), images.BLANK, dtype=np.float64)
    alpha = wm.alpha
    pixels[rows, cols] = (wm.logo[..., :3] * alpha +
                          images.BLANK * (1.0 - alpha))
    return images.Image(pixels)


def render_unified_tensor(wm, height, width, batch=1):
    target = render_unified(wm, height, width).to_tensor()
    return target.unsqueeze(0).repeat(batch, 1, 1, 1)


def normalized_correlation(extracted, reference):
    """NC between two images, measured on ink (255 - value) so that the
    blank background contributes nothing. Zero ink gives 0."""
    a = (images.BLANK - np.asarray(extracted, dtype=np.float64)).ravel()
    b = (images.BLANK - np.asarray(reference, dtype=np.float64)).ravel()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b) / norm)


def normalized_correlation_tensor(extracted, reference):
    """Per-sample NC for B x 3 x H x W tensors."""
    a = (images.BLANK - extracted).flatten(1)
    b = (images.BLANK - reference).flatten(1)
    norm = a.norm(dim=1) * b.norm(dim=1)
    nc = (a * b).sum(dim=1) / norm.clamp_min(1e-12)
    return torch.where(norm > 0, nc, torch.zeros_like(nc))
