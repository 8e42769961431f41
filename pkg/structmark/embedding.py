# Deployment-side embedding: the protected model's outputs are watermarked
# with the owner's color (or, for the unified baseline, the fixed logo)
# before anyone outside sees them. Also locates the trained systems on disk.

import os

import torch

from structmark import codec
from structmark import config
from structmark import dataset
from structmark import exceptions
from structmark import images
from structmark import logutil
from structmark import networks
from structmark import structure
from structmark import synthesis


LOG, _ = logutil.setup(__name__)

MODE_OURS = 'ours'
MODE_UNIFIED = 'unified'
MODES = (MODE_OURS, MODE_UNIFIED)

STAGE_CURRICULUM = 'curriculum'
STAGE_ADVERSARIAL = 'adversarial-stage'


def codec_config():
    return codec.CodecConfig(config.parsed.get('COLOR_STEP'))


def owner_color(bits=None, cfg=None):
    """The codeword carrying the owner's bits."""
    cfg = cfg or codec_config()
    bits = codec.parse_bits(bits or config.parsed.get('WATERMARK_BITS'), cfg)
    return codec.encode_bits(bits, cfg)


def watermark_targets(covers, masks, mode, color=None, unified=None):
    """The ground-truth watermark image for each cover (B x 3 x H x W)."""
    if mode == MODE_UNIFIED:
        unified = unified or synthesis.default_unified()
        return synthesis.render_unified_tensor(
            unified, covers.shape[-2], covers.shape[-1], covers.shape[0])

    color = color or owner_color()
    colors = torch.tensor([color] * covers.shape[0], dtype=covers.dtype)
    return synthesis.synthesize_batch(colors, masks)


def structure_masks(tensors, source=None):
    """Structure masks (B x 1 x H x W) of a stack of image tensors."""
    masks = [structure.extract(images.Image.from_tensor(t.clamp(0, 255)),
                               source)
             for t in tensors]
    return dataset.stack_masks(masks)


def watermark_images(hnet, covers, mode=MODE_OURS, color=None,
                     unified=None, masks=None):
    """Run HNet over covers with the owner's watermark. Returns a tensor."""
    if masks is None and mode == MODE_OURS:
        masks = structure_masks(covers)
    targets = watermark_targets(covers, masks, mode, color, unified)

    device = next(hnet.parameters()).device
    hnet.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, covers.shape[0], 16):
            chunk = slice(start, start + 16)
            outputs.append(networks.embed(
                hnet, covers[chunk].to(device),
                targets[chunk].to(device)).cpu())
    return torch.cat(outputs, dim=0)


def checkpoint_path(out_dir, mode, stage):
    return os.path.join(out_dir, 'checkpoints', '%s-%s.pt' % (mode, stage))


class System(object):
    """A trained watermarking system: HNet plus EXNet before and after the
    adversarial training stage."""

    def __init__(self, mode, hnet, exnet_before, exnet_after):
        self.mode = mode
        self.hnet = hnet
        self.exnet_before = exnet_before
        self.exnet_after = exnet_after

    def unique_label(self):
        return ('system', self.mode)

    def exnet(self, adversarial_stage):
        return self.exnet_after if adversarial_stage else self.exnet_before


def load_system(out_dir, mode=MODE_OURS, device=None):
    paths = [checkpoint_path(out_dir, mode, STAGE_CURRICULUM),
             checkpoint_path(out_dir, mode, STAGE_ADVERSARIAL)]
    for path in paths:
        if not os.path.exists(path):
            raise exceptions.MissingCheckpoint(
                'checkpoint %s does not exist, run train first' % path)

    before = networks.Checkpoint.load(paths[0], device)
    after = networks.Checkpoint.load(paths[1], device)
    return System(mode, before.nets['hnet'], before.nets['exnet'],
                  after.nets['exnet'])
