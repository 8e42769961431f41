# Augmentation operators shared by the training-time augmentation layer and
# the attacker simulation.
#
# Every operator works on float tensors (C x H x W or B x C x H x W) with
# values in [0, 255]. Geometric operators move the primary image, its image
# companions and its masks with identical parameters: bilinear for images,
# nearest plus re-binarisation for masks. Photometric operators only touch
# the primary image. Positive angles rotate counter-clockwise.

import kornia
import numpy as np
import torch

from structmark import config
from structmark import exceptions
from structmark import logutil


LOG, _ = logutil.setup(__name__)

FLIP_H = 'flip-h'
FLIP_V = 'flip-v'
ROTATE = 'rotate'
CROP = 'crop'
RESIZE = 'resize'
NOISE = 'noise'
BLUR = 'blur'
HUE = 'hue'
SATURATION = 'saturation'
CONTRAST = 'contrast'
IDENTITY = 'identity'

# Operator families, as named in policies. 'flip' picks a direction.
FAMILY_ALIASES = {
    'flip': 'flip',
    'rotate': 'rotate', 'rotation': 'rotate',
    'crop': 'crop', 'cropping': 'crop',
    'resize': 'resize', 'resizing': 'resize',
    'noise': 'noise', 'blur': 'blur', 'hue': 'hue',
    'saturation': 'saturation', 'contrast': 'contrast',
}
QUALITY_HARMLESS = ('flip', 'rotate', 'crop', 'resize')
QUALITY_HARMFUL = ('noise', 'blur', 'hue', 'saturation', 'contrast')

MIN_ANGLE, MAX_ANGLE = -90.0, 90.0
MIN_CROP, MAX_CROP = 64, 256
MIN_SCALE, MAX_SCALE = 0.5, 2.0

MODE_ONE = 'one'
MODE_UPTO = 'upto'
MODE_ALL = 'all'


def _batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise exceptions.AugmentException(
        'expected a C x H x W or B x C x H x W tensor, got %d dims' % x.dim())


def _unbatched(x, squeeze):
    return x[0] if squeeze else x


class AugmentOp(object):
    """A fully parameterised operator. Subclasses define the transforms."""

    _kind = None
    _geometric = False
    _version = 1

    @classmethod
    def kind(cls):
        return cls._kind

    @property
    def geometric(self):
        return self._geometric

    def __repr__(self):
        return 'AUGMENT:' + self.kind() + ': ' + str(self.json_dump())

    def __eq__(self, other):
        if not isinstance(other, AugmentOp):
            raise NotImplementedError(
                'Objects must be subclasses of AugmentOp')
        return self.__hash__() == other.__hash__()

    def __hash__(self):
        return hash(str(self.json_dump()))

    def json_dump(self):
        return {'kind': self._kind, 'version': self._version}

    def image(self, x):
        return x

    def mask(self, m):
        return m

    def output_size(self, height, width):
        return height, width


class Identity(AugmentOp):
    _kind = IDENTITY


class FlipH(AugmentOp):
    _kind = FLIP_H
    _geometric = True

    def image(self, x):
        return torch.flip(x, dims=(-1,))

    mask = image


class FlipV(AugmentOp):
    _kind = FLIP_V
    _geometric = True

    def image(self, x):
        return torch.flip(x, dims=(-2,))

    mask = image


class Rotate(AugmentOp):
    _kind = ROTATE
    _geometric = True

    def __init__(self, angle):
        super(Rotate, self).__init__()
        angle = float(angle)
        if angle < MIN_ANGLE or angle > MAX_ANGLE:
            raise exceptions.AugmentException(
                'rotation angle %.2f outside [%d, %d]'
                % (angle, MIN_ANGLE, MAX_ANGLE))
        self.angle = angle

    def json_dump(self):
        return {**super(Rotate, self).json_dump(), 'angle': self.angle}

    def _quarter_turns(self):
        if self.angle % 90.0 == 0.0:
            return int(self.angle // 90.0)
        return None

    def _warp(self, x, mode, padding_mode):
        turns = self._quarter_turns()
        if turns is not None:
            return torch.rot90(x, turns, dims=(-2, -1))

        x, squeeze = _batched(x)
        angle = torch.full((x.shape[0],), self.angle, dtype=x.dtype,
                           device=x.device)
        out = kornia.geometry.transform.rotate(
            x, angle, mode=mode, padding_mode=padding_mode,
            align_corners=True)
        return _unbatched(out, squeeze)

    def image(self, x):
        # Exposed corners replicate the border rather than going blank
        return self._warp(x, 'bilinear', 'border')

    def mask(self, m):
        return (self._warp(m, 'nearest', 'zeros') > 0.5).to(m.dtype)

    def output_size(self, height, width):
        if self._quarter_turns() is not None and self._quarter_turns() % 2:
            return width, height
        return height, width


class Crop(AugmentOp):
    _kind = CROP
    _geometric = True

    def __init__(self, size, top=None, left=None):
        super(Crop, self).__init__()
        size = int(size)
        if size < 1 or size > MAX_CROP:
            raise exceptions.AugmentException(
                'crop size %d outside [1, %d]' % (size, MAX_CROP))
        self.size = size
        self.top = top
        self.left = left

    def json_dump(self):
        return {**super(Crop, self).json_dump(),
                'size': self.size, 'top': self.top, 'left': self.left}

    def offsets(self, height, width):
        if self.size > height or self.size > width:
            raise exceptions.CropTooLarge(
                'crop of %d from a %dx%d image' % (self.size, height, width))
        top = self.top if self.top is not None else (height - self.size) // 2
        left = (self.left if self.left is not None
                else (width - self.size) // 2)
        if top < 0 or left < 0 or top + self.size > height or \
                left + self.size > width:
            raise exceptions.CropTooLarge(
                'crop of %d at (%d, %d) leaves a %dx%d image'
                % (self.size, top, left, height, width))
        return top, left

    def image(self, x):
        top, left = self.offsets(x.shape[-2], x.shape[-1])
        return x[..., top:top + self.size, left:left + self.size]

    mask = image

    def output_size(self, height, width):
        return self.size, self.size


class Resize(AugmentOp):
    _kind = RESIZE
    _geometric = True

    def __init__(self, scale=None, size=None):
        super(Resize, self).__init__()
        if (scale is None) == (size is None):
            raise exceptions.AugmentException(
                'resize takes exactly one of a scale or a target size')
        if scale is not None:
            scale = float(scale)
            if scale < MIN_SCALE or scale > MAX_SCALE:
                raise exceptions.AugmentException(
                    'resize scale %.3f outside [%.1f, %.1f]'
                    % (scale, MIN_SCALE, MAX_SCALE))
        self.scale = scale
        self.size = None if size is None else int(size)

    def json_dump(self):
        return {**super(Resize, self).json_dump(),
                'scale': self.scale, 'size': self.size}

    def output_size(self, height, width):
        if self.size is not None:
            return self.size, self.size
        return (max(1, int(round(height * self.scale))),
                max(1, int(round(width * self.scale))))

    def _resize(self, x, interpolation):
        x, squeeze = _batched(x)
        align = False if interpolation == 'bilinear' else None
        out = kornia.geometry.transform.resize(
            x, self.output_size(x.shape[-2], x.shape[-1]),
            interpolation=interpolation, align_corners=align)
        return _unbatched(out, squeeze)

    def image(self, x):
        return self._resize(x, 'bilinear').clamp(0.0, 255.0)

    def mask(self, m):
        # Foreground where at least half the footprint was foreground
        return (self._resize(m, 'bilinear') >= 0.5).to(m.dtype)


class Noise(AugmentOp):
    _kind = NOISE

    def __init__(self, sigma, seed=0):
        super(Noise, self).__init__()
        self.sigma = float(sigma)
        self.seed = int(seed)

    def json_dump(self):
        return {**super(Noise, self).json_dump(),
                'sigma': self.sigma, 'seed': self.seed}

    def image(self, x):
        generator = torch.Generator().manual_seed(self.seed)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        return (x + self.sigma * noise.to(x.device)).clamp(0.0, 255.0)


class Blur(AugmentOp):
    _kind = BLUR

    def __init__(self, sigma):
        super(Blur, self).__init__()
        self.sigma = float(sigma)

    def json_dump(self):
        return {**super(Blur, self).json_dump(), 'sigma': self.sigma}

    def image(self, x):
        x, squeeze = _batched(x)
        k = 2 * int(np.ceil(3.0 * self.sigma)) + 1
        out = kornia.filters.gaussian_blur2d(
            x, (k, k), (self.sigma, self.sigma), border_type='reflect')
        return _unbatched(out, squeeze)


class _Photometric(AugmentOp):
    """Operators expressed by kornia.enhance on [0, 1] images."""

    def __init__(self, factor):
        super(_Photometric, self).__init__()
        self.factor = float(factor)

    def json_dump(self):
        return {**super(_Photometric, self).json_dump(),
                'factor': self.factor}

    def _enhance(self, x01):
        raise NotImplementedError()

    def image(self, x):
        x, squeeze = _batched(x)
        out = self._enhance(x / 255.0).clamp(0.0, 1.0) * 255.0
        return _unbatched(out, squeeze)


class Hue(_Photometric):
    _kind = HUE

    def _enhance(self, x01):
        return kornia.enhance.adjust_hue(x01, np.deg2rad(self.factor))


class Saturation(_Photometric):
    _kind = SATURATION

    def _enhance(self, x01):
        return kornia.enhance.adjust_saturation(x01, self.factor)


class Contrast(_Photometric):
    _kind = CONTRAST

    def _enhance(self, x01):
        return kornia.enhance.adjust_contrast(x01, self.factor)


OPS = {cls.kind(): cls for cls in (Identity, FlipH, FlipV, Rotate, Crop,
                                    Resize, Noise, Blur, Hue, Saturation,
                                    Contrast)}


def from_json(data):
    data = dict(data)
    kind = data.pop('kind', None)
    data.pop('version', None)
    if kind not in OPS:
        raise exceptions.UnknownAugmentation('unknown augmentation %s' % kind)
    return OPS[kind](**data)


def apply(op, image, companions=(), masks=()):
    """Apply one operator to an image and its aligned companions and masks.

    Returns (image, [companions], [masks]).
    """
    shape = image.shape[-2:]
    for member in list(companions) + list(masks):
        if member.shape[-2:] != shape:
            raise exceptions.AugmentException(
                'companion of %s does not match image of %s'
                % (tuple(member.shape[-2:]), tuple(shape)))

    out = op.image(image)
    if op.geometric:
        companions = [op.image(c) for c in companions]
        masks = [op.mask(m) for m in masks]
    return out, list(companions), list(masks)


def apply_all(ops, image, companions=(), masks=()):
    for op in ops:
        image, companions, masks = apply(op, image, companions, masks)
    return image, companions, masks


def is_identity(ops):
    return all(isinstance(op, Identity) for op in ops)


class AugmentPolicy(object):
    """How operators are drawn: which families, and how many per draw.

    mode 'one' picks a single family per draw, 'upto' picks 1..max_ops
    distinct families in random order and 'all' applies every family once.
    """

    def __init__(self, kinds=None, mode=MODE_ONE, max_ops=None,
                 include_identity=False, rotate_range=None, crop_range=None,
                 resize_range=None, resize_to=None):
        self.kinds = []
        for kind in (kinds or []):
            if kind not in FAMILY_ALIASES:
                raise exceptions.UnknownAugmentation(
                    'unknown augmentation family %s' % kind)
            family = FAMILY_ALIASES[kind]
            if family not in self.kinds:
                self.kinds.append(family)
        if mode not in (MODE_ONE, MODE_UPTO, MODE_ALL):
            raise exceptions.AugmentException('unknown policy mode %s' % mode)

        self.mode = mode
        self.max_ops = max_ops or config.parsed.get('MAX_COMPOSED_OPS')
        self.include_identity = include_identity
        self.rotate_range = (rotate_range if rotate_range is not None
                             else config.parsed.get('ROTATE_RANGE'))
        self.crop_range = tuple(crop_range or config.parsed.get('CROP_RANGE'))
        low, high = self.crop_range
        if low > high or low < MIN_CROP or high > MAX_CROP:
            raise exceptions.AugmentException(
                'crop sizes %d..%d outside [%d, %d]'
                % (low, high, MIN_CROP, MAX_CROP))
        self.resize_range = tuple(
            resize_range or config.parsed.get('RESIZE_RANGE'))
        self.resize_to = resize_to

    @property
    def harmless_only(self):
        return all(k in QUALITY_HARMLESS for k in self.kinds)

    def json_dump(self):
        return {
            'kinds': self.kinds,
            'mode': self.mode,
            'max_ops': self.max_ops,
            'include_identity': self.include_identity,
            'rotate_range': self.rotate_range,
            'crop_range': list(self.crop_range),
            'resize_range': list(self.resize_range),
            'resize_to': self.resize_to,
        }


def harmless_policy(mode=MODE_ONE, **kwargs):
    return AugmentPolicy(kinds=QUALITY_HARMLESS, mode=mode, **kwargs)


def attacker_policy():
    """The attacker's augmentation: rotate, then crop, then resize."""
    crop = config.parsed.get('ATTACK_CROP_SIZE')
    return AugmentPolicy(
        kinds=['rotate', 'crop', 'resize'], mode=MODE_ALL,
        rotate_range=config.parsed.get('ATTACK_ROTATE_RANGE'),
        crop_range=(crop, crop),
        resize_to=config.parsed.get('ATTACK_RESIZE_TO'))


def _sample_family(family, policy, rng, height, width):
    if family == 'flip':
        return FlipH() if rng.random() < 0.5 else FlipV()

    if family == 'rotate':
        r = min(float(policy.rotate_range), MAX_ANGLE)
        return Rotate(rng.uniform(-r, r))

    if family == 'crop':
        # Images smaller than the range are cropped at their own size
        low, high = policy.crop_range
        high = min(int(high), height, width)
        low = min(int(low), high)
        size = int(rng.integers(low, high + 1))
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
        return Crop(size, top, left)

    if family == 'resize':
        if policy.resize_to:
            return Resize(size=policy.resize_to)
        low, high = policy.resize_range
        # Keep the result at least as large as the smallest crop
        low = max(float(low), MIN_CROP / float(min(height, width)))
        low = min(low, float(high))
        return Resize(scale=rng.uniform(low, high))

    if family == 'noise':
        return Noise(config.parsed.get('NOISE_SIGMA'),
                     seed=int(rng.integers(0, 2 ** 31)))

    if family == 'blur':
        low, high = config.parsed.get('BLUR_SIGMA_RANGE')
        return Blur(rng.uniform(low, high))

    if family == 'hue':
        h = config.parsed.get('HUE_MAX_DEGREES')
        return Hue(rng.uniform(-h, h))

    if family == 'saturation':
        low, high = config.parsed.get('SATURATION_RANGE')
        return Saturation(rng.uniform(low, high))

    if family == 'contrast':
        low, high = config.parsed.get('CONTRAST_RANGE')
        return Contrast(rng.uniform(low, high))

    raise exceptions.UnknownAugmentation('unknown family %s' % family)


def sample_policy(policy, rng, size=(128, 128)):
    """Draw a concrete operator composition for an image of the given size.

    rng is a numpy Generator; identical seeds give identical compositions.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    if not policy.kinds:
        return [Identity()]

    if policy.mode == MODE_ALL:
        families = list(policy.kinds)
    else:
        choices = list(policy.kinds)
        if policy.include_identity:
            choices.append(IDENTITY)
        if policy.mode == MODE_ONE:
            count = 1
        else:
            count = int(rng.integers(1, min(policy.max_ops,
                                            len(choices)) + 1))
        picked = rng.choice(len(choices), size=count, replace=False)
        families = [choices[i] for i in picked]

    height, width = size
    ops = []
    for family in families:
        if family == IDENTITY:
            op = Identity()
        else:
            op = _sample_family(family, policy, rng, height, width)
        height, width = op.output_size(height, width)
        ops.append(op)
    return ops
