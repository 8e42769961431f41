# Watermark bit encoder and decoder.
#
# A bit sequence is read as an unsigned integer (most significant bit first)
# and written in mixed radix onto a quantised RGB grid {0, t, ..., (l-1)t}
# with l = floor(255 / t) levels per channel. 255 is never on the grid: it is
# reserved as the unwatermarked indicator.

import math

from structmark import exceptions


BLANK = 255

OUTCOME_BITS = 'bits'
OUTCOME_UNWATERMARKED = 'unwatermarked'
OUTCOME_OUT_OF_RANGE = 'out-of-range'


class CodecConfig(object):
    def __init__(self, color_step=20):
        if not isinstance(color_step, int) or color_step < 1:
            raise exceptions.DegenerateCodebook(
                'color step must be a positive integer, got %r' % color_step)

        levels = BLANK // color_step
        if levels < 2:
            raise exceptions.DegenerateCodebook(
                'color step %d leaves %d level(s) per channel'
                % (color_step, levels))

        self.color_step = color_step
        self.levels = levels
        self.reserved_blank = (BLANK, BLANK, BLANK)

    @property
    def codewords(self):
        return self.levels ** 3

    @property
    def max_channel(self):
        return (self.levels - 1) * self.color_step

    def json_dump(self):
        return {'color_step': self.color_step, 'levels': self.levels}


class DecodeResult(object):
    def __init__(self, outcome, bits=None, index=None, color=None):
        self.outcome = outcome
        self.bits = bits
        self.index = index
        self.color = color

    @property
    def watermarked(self):
        return self.outcome == OUTCOME_BITS

    def json_dump(self):
        return {
            'outcome': self.outcome,
            'bits': bits_to_string(self.bits) if self.bits else None,
            'bits_hex': bits_to_hex(self.bits) if self.bits else None,
            'index': self.index,
            'color': list(self.color) if self.color else None,
        }


def capacity(cfg):
    # floor(log2(n)) for an integer n is exactly bit_length() - 1
    return cfg.codewords.bit_length() - 1


def _check_bits(bits):
    bits = tuple(bits)
    for b in bits:
        if b not in (0, 1):
            raise exceptions.InvalidBitString('bit values must be 0 or 1')
    return bits


def bits_to_index(bits):
    index = 0
    for b in _check_bits(bits):
        index = (index << 1) | b
    return index


def index_to_bits(index, length):
    return tuple((index >> (length - 1 - i)) & 1 for i in range(length))


def encode_index(index, cfg):
    """Map a codebook index in [0, levels^3) to its color."""
    if index < 0 or index >= cfg.codewords:
        raise exceptions.CapacityExceeded(
            'index %d outside a codebook of %d colors' % (index, cfg.codewords))

    levels = cfg.levels
    r_idx = index // (levels * levels)
    g_idx = (index // levels) % levels
    b_idx = index % levels
    return (r_idx * cfg.color_step, g_idx * cfg.color_step,
            b_idx * cfg.color_step)


def encode_bits(bits, cfg):
    bits = _check_bits(bits)
    cap = capacity(cfg)
    if len(bits) > cap:
        raise exceptions.CapacityExceeded(
            '%d bits given, capacity at color step %d is %d'
            % (len(bits), cfg.color_step, cap))
    return encode_index(bits_to_index(bits), cfg)


def snap_channel(value, cfg):
    """Nearest grid index for one channel, ties toward the lower point."""
    idx = int(math.ceil(float(value) / cfg.color_step - 0.5))
    return min(max(idx, 0), cfg.levels - 1)


def nearer_blank(value, cfg):
    return abs(BLANK - float(value)) < abs(float(value) - cfg.max_channel)


def decode_color(color, cfg):
    """Decode a possibly noisy RGB triple."""
    color = tuple(float(c) for c in color)
    if len(color) != 3:
        raise exceptions.CodecException('a color has three channels')

    if any(nearer_blank(c, cfg) for c in color):
        return DecodeResult(OUTCOME_UNWATERMARKED, color=color)

    r_idx, g_idx, b_idx = (snap_channel(c, cfg) for c in color)
    index = (r_idx * cfg.levels + g_idx) * cfg.levels + b_idx
    snapped = encode_index(index, cfg)

    cap = capacity(cfg)
    if index >= 2 ** cap:
        return DecodeResult(OUTCOME_OUT_OF_RANGE, index=index, color=snapped)
    return DecodeResult(OUTCOME_BITS, bits=index_to_bits(index, cap),
                        index=index, color=snapped)


def random_codeword(rng, cfg):
    """Uniformly sample an embeddable color (index below 2^capacity)."""
    index = int(rng.integers(0, 2 ** capacity(cfg)))
    return encode_index(index, cfg)


def parse_bits(text, cfg):
    """Bits from a CLI string: 0x-prefixed hex, or binary (optionally 0b)."""
    text = text.strip().lower()
    cap = capacity(cfg)

    if text.startswith('0x'):
        try:
            value = int(text[2:], 16)
        except ValueError:
            raise exceptions.InvalidBitString('bad hex bit string %r' % text)
        if value >= 2 ** cap:
            raise exceptions.CapacityExceeded(
                '%s needs more than %d bits' % (text, cap))
        return index_to_bits(value, cap)

    if text.startswith('0b'):
        text = text[2:]
    if not text or set(text) - {'0', '1'}:
        raise exceptions.InvalidBitString('bad binary bit string %r' % text)
    bits = tuple(int(c) for c in text)
    if len(bits) > cap:
        raise exceptions.CapacityExceeded(
            '%d bits given, capacity is %d' % (len(bits), cap))
    return index_to_bits(bits_to_index(bits), cap)


def bits_to_string(bits):
    return ''.join(str(b) for b in bits)


def bits_to_hex(bits):
    return hex(bits_to_index(bits))
