# Network definitions: the embedding network (a UNet over cover and
# watermark), the extracting network, a patch discriminator and the
# surrogate architectures an attacker might train.
#
# Every image network takes and returns pixels in [0, 255]; inputs are
# normalised to [-1, 1] inside the network and outputs come from a scaled
# tanh.

import os

import torch
from torch import nn
import torchvision

from structmark import exceptions
from structmark import config
from structmark import images
from structmark import logutil
from structmark import util


LOG, _ = logutil.setup(__name__)

HNET = 'hnet-unet'
EXNET = 'exnet'
DISCRIMINATOR = 'patch-discriminator'
CNET = 'cnet'
RES9 = 'res9'
RES16 = 'res16'
UNET_SM = 'unet-sm'

KINDS = (HNET, EXNET, DISCRIMINATOR, CNET, RES9, RES16, UNET_SM)
SURROGATE_KINDS = (CNET, RES9, RES16, UNET_SM)

CHANNELS = {
    HNET: (6, 3),
    EXNET: (3, 3),
    DISCRIMINATOR: (3, 1),
    CNET: (3, 3),
    RES9: (3, 3),
    RES16: (3, 3),
    UNET_SM: (3, 3),
}

PROBE_SIZE = 32
PROBE_SEED = 1234
# Probe outputs may differ by float noise across devices
PROBE_ATOL = 1e-4


class NetworkSpec(object):
    def __init__(self, kind, width=None, depth=None, blocks=None,
                 in_channels=None, out_channels=None):
        if kind not in KINDS:
            raise exceptions.NetworkException('unknown network kind %s' % kind)

        want_in, want_out = CHANNELS[kind]
        in_channels = want_in if in_channels is None else in_channels
        out_channels = want_out if out_channels is None else out_channels
        if (in_channels, out_channels) != (want_in, want_out):
            raise exceptions.InvalidChannels(
                '%s maps %d -> %d channels, not %d -> %d'
                % (kind, want_in, want_out, in_channels, out_channels))

        self.kind = kind
        self.width = int(width or config.parsed.get('BASE_WIDTH'))
        self.depth = int(depth or config.parsed.get('UNET_DEPTH'))
        self.blocks = int(blocks or config.parsed.get('EXNET_BLOCKS'))
        self.in_channels = in_channels
        self.out_channels = out_channels
        if self.width < 1 or self.depth < 1 or self.blocks < 0:
            raise exceptions.NetworkException(
                'bad network scale for %s' % kind)

    @property
    def stride_multiple(self):
        """Input sides must be multiples of this."""
        if self.kind in (HNET, UNET_SM):
            return 2 ** self.depth
        if self.kind in (RES9, RES16):
            return 4
        return 1

    def unique_label(self):
        return ('network', self.kind)

    def json_dump(self):
        return {
            'kind': self.kind,
            'width': self.width,
            'depth': self.depth,
            'blocks': self.blocks,
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
        }

    @staticmethod
    def from_json(data):
        return NetworkSpec(**data)

    def __repr__(self):
        return 'NETWORK:' + str(self.json_dump())

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return self.json_dump() == other.json_dump()

    def __hash__(self):
        return hash(str(self.json_dump()))


def to_unit(x):
    return x / 127.5 - 1.0


def to_pixels(x):
    return (torch.tanh(x) + 1.0) * 127.5


#
# Building blocks
#
class DoubleConv(nn.Module):
    def __init__(self, in_ch, out_ch):
        super(DoubleConv, self).__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True))

    def forward(self, x):
        return self.net(x)


class Down(nn.Module):
    def __init__(self, in_ch, out_ch):
        super(Down, self).__init__()
        self.net = nn.Sequential(nn.MaxPool2d(2), DoubleConv(in_ch, out_ch))

    def forward(self, x):
        return self.net(x)


class Up(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super(Up, self).__init__()
        # Nearest upsample then conv, no transposed-conv checkerboards
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True))
        self.conv = DoubleConv(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1):
        super(ConvBlock, self).__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel, stride, kernel // 2),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True))

    def forward(self, x):
        return self.net(x)


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super(ResidualBlock, self).__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.BatchNorm2d(ch))

    def forward(self, x):
        return x + self.body(x)


#
# Networks
#
class UNet(nn.Module):
    """Encoder-decoder with a skip connection at every level."""

    def __init__(self, in_channels, out_channels, width, depth):
        super(UNet, self).__init__()
        widths = [width * min(2 ** i, 8) for i in range(depth + 1)]

        self.inc = DoubleConv(in_channels, widths[0])
        self.downs = nn.ModuleList(
            [Down(widths[i], widths[i + 1]) for i in range(depth)])
        self.ups = nn.ModuleList(
            [Up(widths[i + 1], widths[i], widths[i])
             for i in reversed(range(depth))])
        self.outc = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        x = to_unit(x)
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))

        x = skips.pop()
        for up in self.ups:
            x = up(x, skips.pop())
        return to_pixels(self.outc(x))


class ExtractNet(nn.Module):
    """Three conv encoder, residual blocks, one deconv and two convs."""

    def __init__(self, width, blocks):
        super(ExtractNet, self).__init__()
        self.encoder = nn.Sequential(
            ConvBlock(3, width, 3, 1),
            ConvBlock(width, width * 2, 3, 2),
            ConvBlock(width * 2, width * 2, 3, 1))
        self.residual = nn.Sequential(
            *[ResidualBlock(width * 2) for _ in range(blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            ConvBlock(width, width, 3, 1),
            nn.Conv2d(width, 3, 3, padding=1))

    def forward(self, x):
        height, width = x.shape[-2:]
        x = self.encoder(to_unit(x))
        x = self.residual(x)
        # Odd sides come back one pixel larger from the deconv
        return to_pixels(self.decoder(x)[..., :height, :width])


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches as real (clean) or watermarked. Logits."""

    def __init__(self, width, layers):
        super(PatchDiscriminator, self).__init__()
        model = [nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for i in range(1, layers + 1):
            last = mult
            mult = min(2 ** i, 8)
            model += [
                nn.Conv2d(width * last, width * mult, 4,
                          2 if i < layers else 1, 1, bias=False),
                nn.BatchNorm2d(width * mult),
                nn.LeakyReLU(0.2, True),
            ]
        model.append(nn.Conv2d(width * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*model)

    def forward(self, x):
        return self.model(to_unit(x))


class ConvNet(nn.Module):
    """A plain stack of convolutions, no down-sampling or skips."""

    def __init__(self, width, layers=6):
        super(ConvNet, self).__init__()
        body = [ConvBlock(3, width)]
        body += [ConvBlock(width, width) for _ in range(layers - 2)]
        body.append(nn.Conv2d(width, 3, 3, padding=1))
        self.body = nn.Sequential(*body)

    def forward(self, x):
        return to_pixels(self.body(to_unit(x)))


class ResNetGenerator(nn.Module):
    """Two stride-2 downs, residual blocks, two stride-2 ups."""

    def __init__(self, width, blocks):
        super(ResNetGenerator, self).__init__()
        model = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, width, 7),
            nn.BatchNorm2d(width),
            nn.ReLU(True),
            ConvBlock(width, width * 2, 3, 2),
            ConvBlock(width * 2, width * 4, 3, 2),
        ]
        model += [ResidualBlock(width * 4) for _ in range(blocks)]
        model += [
            nn.ConvTranspose2d(width * 4, width * 2, 4, stride=2, padding=1),
            nn.BatchNorm2d(width * 2),
            nn.ReLU(True),
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(width, 3, 7),
        ]
        self.model = nn.Sequential(*model)

    def forward(self, x):
        return to_pixels(self.model(to_unit(x)))


def _construct(spec):
    if spec.kind == HNET:
        return UNet(6, 3, spec.width, spec.depth)
    if spec.kind == UNET_SM:
        return UNet(3, 3, spec.width, spec.depth)
    if spec.kind == EXNET:
        return ExtractNet(spec.width, spec.blocks)
    if spec.kind == DISCRIMINATOR:
        return PatchDiscriminator(
            spec.width, config.parsed.get('DISCRIMINATOR_LAYERS'))
    if spec.kind == CNET:
        return ConvNet(spec.width)
    if spec.kind == RES9:
        return ResNetGenerator(spec.width, 9)
    if spec.kind == RES16:
        return ResNetGenerator(spec.width, 16)
    raise exceptions.NetworkException('unknown network kind %s' % spec.kind)


def build(spec, seed=0):
    """Construct a network with initialisation fixed by seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _construct(spec)
    net.spec = spec
    LOG.withSpec(spec).withField('seed', seed).debug('Built network')
    return net


def check_size(spec, height, width):
    m = spec.stride_multiple
    if height % m or width % m:
        raise exceptions.DimensionMismatch(
            '%s needs sides divisible by %d, got %dx%d'
            % (spec.kind, m, height, width))


def _batch(x):
    if isinstance(x, images.Image):
        return x.to_tensor().unsqueeze(0), True
    if hasattr(x, 'to_tensor'):
        return x.to_tensor().unsqueeze(0), True
    if x.dim() == 3:
        return x.unsqueeze(0), False
    return x, False


def embed(hnet, covers, watermarks):
    """HNet over B x 3 x H x W covers and watermark images."""
    if covers.shape != watermarks.shape:
        raise exceptions.DimensionMismatch(
            'cover %s and watermark %s differ'
            % (tuple(covers.shape), tuple(watermarks.shape)))
    return hnet(torch.cat([covers, watermarks], dim=1))


def forward_embed(hnet, cover, wm):
    """Watermark one cover image. Returns an Image."""
    covers, _ = _batch(cover)
    watermarks, _ = _batch(wm)
    device = next(hnet.parameters()).device
    hnet.eval()
    with torch.no_grad():
        out = embed(hnet, covers.to(device), watermarks.to(device))
    return images.Image.from_tensor(out)


def forward_extract(exnet, img):
    """Extract the hidden watermark image from one image."""
    batch, _ = _batch(img)
    device = next(exnet.parameters()).device
    exnet.eval()
    with torch.no_grad():
        out = exnet(batch.to(device))
    return images.Image.from_tensor(out)


def run_batched(net, inputs, batch_size=16):
    """Eval-mode forward over a stacked tensor in chunks."""
    device = next(net.parameters()).device
    net.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunk = inputs[start:start + batch_size].to(device)
            outputs.append(net(chunk).cpu())
    return torch.cat(outputs, dim=0)


def is_degenerate(net, inputs):
    """True when the outputs do not depend on the input at all."""
    outputs = run_batched(net, inputs)
    return bool((outputs == outputs[0:1]).all())


class PerceptualFeatures(nn.Module):
    """Frozen mid-level features of a pretrained classifier."""

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, name=None):
        super(PerceptualFeatures, self).__init__()
        name = name or config.parsed.get('PERCEPTUAL_NETWORK')
        try:
            weights = torchvision.models.get_model_weights(name).DEFAULT
            classifier = torchvision.models.get_model(name, weights=weights)
        except Exception as e:
            raise exceptions.FeatureNetworkUnavailable(
                'perceptual network %s is unavailable: %s' % (name, e))

        # Up to relu3_3 for the VGG family
        self.features = classifier.features[:16].eval()
        for p in self.features.parameters():
            p.requires_grad = False
        self.register_buffer('mean', torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(self.STD).view(1, 3, 1, 1))

    def forward(self, x):
        return self.features((x / 255.0 - self.mean) / self.std)


#
# Checkpoints
#
def probe_input(spec):
    generator = torch.Generator().manual_seed(PROBE_SEED)
    return torch.rand((1, spec.in_channels, PROBE_SIZE, PROBE_SIZE),
                      generator=generator) * 255.0


def probe_outputs(nets):
    outputs = {}
    for name, net in nets.items():
        device = next(net.parameters()).device
        was_training = net.training
        net.eval()
        with torch.no_grad():
            outputs[name] = net(probe_input(net.spec).to(device)).cpu()
        net.train(was_training)
    return outputs


class Checkpoint(object):
    """Named networks, their optimisers and the curriculum stage tag."""

    def __init__(self, nets, optimizers=None, stage=None, extra=None):
        self.nets = nets
        self.optimizers = optimizers or {}
        self.stage = stage
        self.extra = extra or {}

    def unique_label(self):
        return ('checkpoint', self.stage)

    def save(self, path):
        state = {
            'version': util.get_version(),
            'stage': self.stage,
            'extra': self.extra,
            'specs': {n: net.spec.json_dump() for n, net in self.nets.items()},
            'nets': {n: net.state_dict() for n, net in self.nets.items()},
            'optimizers': {n: o.state_dict()
                           for n, o in self.optimizers.items()},
        }
        util.atomic_write(path, lambda f: torch.save(state, f))
        util.atomic_write(probe_path(path),
                          lambda f: torch.save(probe_outputs(self.nets), f))
        LOG.withObj(self).withField('path', path).info('Saved checkpoint')
        return path

    @staticmethod
    def load(path, device=None, verify=True):
        if not os.path.exists(path):
            raise exceptions.MissingCheckpoint(
                'checkpoint %s does not exist' % path)
        device = device or torch.device('cpu')
        try:
            state = torch.load(path, map_location=device)
        except Exception as e:
            raise exceptions.CheckpointException(
                'cannot read checkpoint %s: %s' % (path, e))

        nets = {}
        for name, spec_data in state['specs'].items():
            net = build(NetworkSpec.from_json(spec_data))
            net.load_state_dict(state['nets'][name])
            nets[name] = net.to(device)

        ckpt = Checkpoint(nets, stage=state.get('stage'),
                          extra=state.get('extra'))
        ckpt.optimizer_state = state.get('optimizers', {})
        if verify:
            ckpt.verify(path)
        return ckpt

    def verify(self, path):
        expected_path = probe_path(path)
        if not os.path.exists(expected_path):
            LOG.withField('path', path).warning(
                'Checkpoint has no probe outputs, not verified')
            return False
        expected = torch.load(expected_path, map_location='cpu')
        actual = probe_outputs(self.nets)
        for name, value in expected.items():
            if name not in actual or \
                    actual[name].shape != value.shape or \
                    not torch.allclose(actual[name].cpu(), value.cpu(),
                                       atol=PROBE_ATOL, rtol=1e-5):
                raise exceptions.CheckpointException(
                    'checkpoint %s: %s does not reproduce its probe outputs'
                    % (path, name))
        return True

    def restore_optimizer(self, name, optimizer):
        state = getattr(self, 'optimizer_state', {}).get(name)
        if state:
            optimizer.load_state_dict(state)
        return optimizer


def probe_path(path):
    return path + '.probe.pt'
