# Forensics: recover the hidden color from an extracted watermark image,
# judge it against a claimed owner color, decode the bits and summarise
# success and false-positive rates.
#
# The guidance mask comes from the image under test, not from a stored
# mask, because suspect images produced by a surrogate have no ground truth.

import numpy as np
import torch

from structmark import codec
from structmark import config
from structmark import exceptions
from structmark import images
from structmark import logutil
from structmark import structure
from structmark import synthesis
from structmark import util


LOG, _ = logutil.setup(__name__)

OUTCOME_WATERMARKED = 'watermarked'
OUTCOME_UNWATERMARKED = 'unwatermarked'
OUTCOME_INSUFFICIENT = 'insufficient-structure'


class ForensicsConfig(object):
    def __init__(self, error_threshold=None, source=None,
                 min_foreground=None, codec_cfg=None, nc_threshold=None):
        self.error_threshold = float(
            config.parsed.get('ERROR_THRESHOLD')
            if error_threshold is None else error_threshold)
        if self.error_threshold < 0:
            raise exceptions.FlagException(
                'error threshold must not be negative')
        self.source = source or config.parsed.get('STRUCTURE_SOURCE')
        self.min_foreground = int(
            config.parsed.get('MIN_FOREGROUND_PIXELS')
            if min_foreground is None else min_foreground)
        self.codec = codec_cfg or codec.CodecConfig(
            config.parsed.get('COLOR_STEP'))
        self.nc_threshold = float(
            config.parsed.get('NC_THRESHOLD')
            if nc_threshold is None else nc_threshold)

    def json_dump(self):
        return {
            'error_threshold': self.error_threshold,
            'source': self.source,
            'min_foreground': self.min_foreground,
            'codec': self.codec.json_dump(),
            'nc_threshold': self.nc_threshold,
        }


class ForensicsVerdict(object):
    def __init__(self, outcome, recovered_color=None, error=None,
                 success=False, claimed=None, decoded=None, image=None,
                 foreground=0):
        self.outcome = outcome
        self.recovered_color = recovered_color
        self.error = error
        self.success = success
        self.claimed = claimed
        self.decoded = decoded
        self.image = image
        self.foreground = foreground
        self.ambiguous = False

    @property
    def bits(self):
        if self.decoded is None or not self.decoded.watermarked:
            return None
        return self.decoded.bits

    def unique_label(self):
        return ('image', self.image)

    def json_dump(self):
        bits = self.bits
        return {
            'image': self.image,
            'outcome': self.outcome,
            'recovered_rgb': (None if self.recovered_color is None
                              else [float(c) for c in self.recovered_color]),
            'claimed_rgb': list(self.claimed) if self.claimed else None,
            'error': self.error,
            'success': self.success,
            'ambiguous': self.ambiguous,
            'foreground': self.foreground,
            'bits_hex': codec.bits_to_hex(bits) if bits else None,
        }


def _max_error(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) -
                               np.asarray(b, dtype=np.float64))))


def recover_color(extracted, probe, cfg=None, claimed=None, guidance=None,
                  label=None):
    """Mean extracted color over the probe's structure."""
    cfg = cfg or ForensicsConfig()
    if extracted.shape != probe.shape:
        raise exceptions.DimensionMismatch(
            'extracted %s and probe %s differ' % (extracted.shape, probe.shape))

    if guidance is None:
        guidance = structure.extract(probe, cfg.source)
    foreground = guidance.mask.astype(bool)
    count = int(foreground.sum())
    if count < cfg.min_foreground:
        return ForensicsVerdict(OUTCOME_INSUFFICIENT, claimed=claimed,
                                image=label, foreground=count)

    recovered = tuple(float(c) for c in
                      extracted.pixels[foreground].mean(axis=0))
    return judge(recovered, cfg, claimed=claimed, label=label,
                 foreground=count)


def _unwatermarked(recovered, claimed, label, foreground):
    return ForensicsVerdict(
        OUTCOME_UNWATERMARKED, recovered_color=recovered,
        error=None if claimed is None else _max_error(recovered, claimed),
        claimed=claimed, image=label, foreground=foreground,
        decoded=codec.DecodeResult(codec.OUTCOME_UNWATERMARKED,
                                   color=recovered))


def judge(recovered, cfg, claimed=None, label=None, foreground=0):
    """Verify against a claimed color, or free-decode when none is given.

    A free decode of a color with a channel nearer the blank than the grid
    is unwatermarked.
    """
    blank_error = _max_error(recovered, cfg.codec.reserved_blank)
    if blank_error <= cfg.error_threshold:
        return _unwatermarked(recovered, claimed, label, foreground)

    decoded = codec.decode_color(recovered, cfg.codec)
    if claimed is None and decoded.outcome == codec.OUTCOME_UNWATERMARKED:
        return _unwatermarked(recovered, claimed, label, foreground)

    reference = claimed if claimed is not None else decoded.color
    error = _max_error(recovered, reference)
    verdict = ForensicsVerdict(
        OUTCOME_WATERMARKED, recovered_color=recovered, error=error,
        success=error <= cfg.error_threshold, claimed=claimed,
        decoded=decoded, image=label, foreground=foreground)
    verdict.ambiguous = error >= cfg.codec.color_step / 2.0
    return verdict


def decode_verdict(verdict, codec_cfg=None):
    """The bits carried by a verdict, or the unwatermarked result."""
    codec_cfg = codec_cfg or codec.CodecConfig(config.parsed.get('COLOR_STEP'))
    if verdict.outcome != OUTCOME_WATERMARKED:
        return codec.DecodeResult(codec.OUTCOME_UNWATERMARKED,
                                  color=verdict.recovered_color)

    result = codec.decode_color(verdict.recovered_color, codec_cfg)
    if verdict.error is not None and \
            verdict.error >= codec_cfg.color_step / 2.0:
        verdict.ambiguous = True
        LOG.withFields({'image': verdict.image, 'error': verdict.error}).warning(
            'Recovered color sits on a decode boundary')
    return result


class BatchReport(object):
    def __init__(self, verdicts, clean_verdicts):
        self.verdicts = verdicts
        self.clean_verdicts = clean_verdicts

    @property
    def success_rate(self):
        if not self.verdicts:
            return None
        return sum(1 for v in self.verdicts if v.success) / float(
            len(self.verdicts))

    @property
    def false_positive_rate(self):
        if not self.clean_verdicts:
            return None
        return sum(1 for v in self.clean_verdicts
                   if v.outcome == OUTCOME_WATERMARKED) / float(
            len(self.clean_verdicts))

    def json_dump(self):
        return {
            'count': len(self.verdicts),
            'clean_count': len(self.clean_verdicts),
            'success_rate': self.success_rate,
            'false_positive_rate': self.false_positive_rate,
            'insufficient': sum(1 for v in self.verdicts
                                if v.outcome == OUTCOME_INSUFFICIENT),
        }

    def write_lines(self, path):
        log = util.JsonLinesLog(path)
        for v in self.verdicts:
            log.write(dict(v.json_dump(), set='watermarked'))
        for v in self.clean_verdicts:
            log.write(dict(v.json_dump(), set='clean'))
        return path


def verdict_batch(watermarked, claimed, cfg=None, clean=()):
    """SR over (extracted, probe) items judged against claimed colors, and
    FP over clean (extracted, probe) items.

    claimed is one color for the whole batch or one per item.
    """
    cfg = cfg or ForensicsConfig()
    watermarked = list(watermarked)
    if claimed is not None and len(claimed) == 3 and \
            not isinstance(claimed[0], (tuple, list)):
        claimed = [tuple(claimed)] * len(watermarked)

    verdicts = []
    for i, (extracted, probe) in enumerate(watermarked):
        color = None if claimed is None else claimed[i]
        verdicts.append(recover_color(extracted, probe, cfg, claimed=color,
                                      label=probe.path or str(i)))

    clean_verdicts = [recover_color(extracted, probe, cfg,
                                    label=probe.path or 'clean-%d' % i)
                      for i, (extracted, probe) in enumerate(clean)]

    report = BatchReport(verdicts, clean_verdicts)
    LOG.withFields(report.json_dump()).info('Judged batch')
    return report


def recover_colors_tensor(extracted, masks):
    """Per-sample mean color over the mask foreground, plus the counts."""
    counts = masks.flatten(1).sum(dim=1)
    sums = (extracted * masks).flatten(2).sum(dim=2)
    return sums / counts.clamp_min(1.0).unsqueeze(1), counts


def success_tensor(extracted, masks, colors, cfg):
    """Success flags for a batch with known guidance masks."""
    recovered, counts = recover_colors_tensor(extracted, masks)
    blank = torch.full_like(recovered, images.BLANK)
    unwatermarked = (recovered - blank).abs().amax(dim=1) <= \
        cfg.error_threshold
    error = (recovered - colors.to(recovered.dtype)).abs().amax(dim=1)
    return (counts >= cfg.min_foreground) & ~unwatermarked & \
        (error <= cfg.error_threshold)


def false_positive_tensor(extracted, masks, cfg):
    """Clean samples a free decode would call watermarked."""
    recovered, counts = recover_colors_tensor(extracted, masks)
    blank = torch.full_like(recovered, images.BLANK)
    unwatermarked = (recovered - blank).abs().amax(dim=1) <= \
        cfg.error_threshold
    off_grid = ((blank - recovered).abs() <
                (recovered - cfg.codec.max_channel).abs()).any(dim=1)
    unwatermarked = unwatermarked | off_grid
    return (counts >= cfg.min_foreground) & ~unwatermarked


class NCVerdict(object):
    def __init__(self, nc, threshold, image=None):
        self.nc = nc
        self.threshold = threshold
        self.success = nc >= threshold
        self.image = image

    def json_dump(self):
        return {'image': self.image, 'nc': self.nc, 'success': self.success}


def nc_verdict(extracted, reference, cfg=None, label=None):
    """Judge a unified-baseline extraction by normalized correlation."""
    cfg = cfg or ForensicsConfig()
    if extracted.shape != reference.shape:
        raise exceptions.DimensionMismatch(
            'extracted %s and reference %s differ'
            % (extracted.shape, reference.shape))
    nc = synthesis.normalized_correlation(extracted.pixels, reference.pixels)
    return NCVerdict(nc, cfg.nc_threshold, image=label)


def nc_success_rate(verdicts):
    if not verdicts:
        return None
    return sum(1 for v in verdicts if v.success) / float(len(verdicts))
