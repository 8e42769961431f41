# Training objectives. All squared-error terms are means over every pixel
# and channel; the adversarial terms treat discriminator outputs as logits.

import numpy as np
import torch
import torch.nn.functional as F

from structmark import config
from structmark import exceptions
from structmark import images
from structmark import logutil


LOG, _ = logutil.setup(__name__)

LOSS_L1 = 'L1'
LOSS_L2 = 'L2'
LOSS_PERC = 'L_perc'
LOSS_ADV = 'L_adv'
SURROGATE_LOSSES = (LOSS_L1, LOSS_L2, LOSS_PERC, LOSS_ADV)


class TrainWeights(object):
    def __init__(self, lam=None, lambda1=None, lambda2=None, lambda3=None,
                 lambda4=None, lambda5=1.0, lr_main=None,
                 lr_exnet_finetune=None):
        def pick(value, flag):
            return config.parsed.get(flag) if value is None else float(value)

        self.lam = pick(lam, 'LAMBDA')
        self.lambda1 = pick(lambda1, 'LAMBDA1')
        self.lambda2 = pick(lambda2, 'LAMBDA2')
        self.lambda3 = pick(lambda3, 'LAMBDA3')
        self.lambda4 = pick(lambda4, 'LAMBDA4')
        self.lambda5 = float(lambda5)
        self.lr_main = pick(lr_main, 'LR_MAIN')
        self.lr_exnet_finetune = pick(lr_exnet_finetune, 'LR_EXNET_FINETUNE')

        for name, value in self.json_dump().items():
            if value < 0:
                raise exceptions.TrainingException(
                    'weight %s must not be negative' % name)

    def adversarial_phase(self):
        """The weights once the adversarial loss is enrolled."""
        return TrainWeights(
            lam=config.parsed.get('LAMBDA_ADV_PHASE'),
            lambda1=self.lambda1,
            lambda2=config.parsed.get('LAMBDA2_ADV_PHASE'),
            lambda3=self.lambda3, lambda4=self.lambda4,
            lambda5=self.lambda5, lr_main=self.lr_main,
            lr_exnet_finetune=self.lr_exnet_finetune)

    def json_dump(self):
        return {
            'lambda': self.lam,
            'lambda1': self.lambda1,
            'lambda2': self.lambda2,
            'lambda3': self.lambda3,
            'lambda4': self.lambda4,
            'lambda5': self.lambda5,
            'lr_main': self.lr_main,
            'lr_exnet_finetune': self.lr_exnet_finetune,
        }


def generator_term(d_scores):
    """Non-saturating GAN term: -log sigmoid(s) averaged over patches."""
    return F.binary_cross_entropy_with_logits(
        d_scores, torch.ones_like(d_scores))


def discriminator_loss(real_scores, fake_scores):
    real = F.binary_cross_entropy_with_logits(
        real_scores, torch.ones_like(real_scores))
    fake = F.binary_cross_entropy_with_logits(
        fake_scores, torch.zeros_like(fake_scores))
    return 0.5 * (real + fake)


def embed_terms(cover, watermarked, d_scores, weights):
    if cover.shape != watermarked.shape:
        raise exceptions.DimensionMismatch(
            'cover %s and watermarked %s differ'
            % (tuple(cover.shape), tuple(watermarked.shape)))

    terms = {'mse': torch.mean((cover - watermarked) ** 2)}
    if weights.lambda2 and d_scores is not None:
        terms['adv'] = generator_term(d_scores)
    else:
        terms['adv'] = torch.zeros((), dtype=cover.dtype,
                                   device=cover.device)
    return terms


def loss_embed(cover, watermarked, d_scores, weights):
    terms = embed_terms(cover, watermarked, d_scores, weights)
    return weights.lambda1 * terms['mse'] + weights.lambda2 * terms['adv']


def _check_mask(extracted, mask):
    if mask.dim() != extracted.dim() or mask.shape[-2:] != \
            extracted.shape[-2:] or mask.shape[0] != extracted.shape[0]:
        raise exceptions.MaskMismatch(
            'mask %s does not align with image %s'
            % (tuple(mask.shape), tuple(extracted.shape)))


def extract_terms(extracted, target, mask, watermarked, weights):
    """The unweighted extraction terms of one branch."""
    if not watermarked:
        return {'clean': torch.mean((extracted - images.BLANK) ** 2)}

    _check_mask(extracted, mask)
    if target.shape != extracted.shape:
        raise exceptions.DimensionMismatch(
            'target %s and extracted %s differ'
            % (tuple(target.shape), tuple(extracted.shape)))
    return {
        'foreground': torch.mean(mask * (extracted - target) ** 2),
        'background': torch.mean((1.0 - mask) *
                                 (extracted - images.BLANK) ** 2),
    }


def loss_extract(extracted, target, mask, watermarked, weights):
    terms = extract_terms(extracted, target, mask, watermarked, weights)
    if not watermarked:
        return weights.lambda4 * terms['clean']
    return weights.lambda3 * (weights.lambda5 * terms['foreground'] +
                              terms['background'])


def loss_total(embed_loss, extract_watermarked, extract_clean, weights):
    return embed_loss + weights.lam * (extract_watermarked + extract_clean)


def _mask_counts(mask):
    if hasattr(mask, 'mask'):
        mask = mask.mask
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    foreground = int(np.count_nonzero(mask))
    return foreground, int(mask.size) - foreground


def compute_lambda5(masks):
    """Foreground weight balancing total foreground against background."""
    foreground = background = 0
    count = 0
    for mask in masks:
        fg, bg = _mask_counts(mask)
        foreground += fg
        background += bg
        count += 1

    if count == 0 or foreground == 0:
        raise exceptions.EmptyMaskSet(
            'no foreground in %d training masks' % count)
    if background == 0:
        LOG.warning('Every sampled mask pixel is foreground, lambda5 is 0')
        return 0.0

    lambda5 = background / float(foreground)
    LOG.withFields({'masks': count, 'lambda5': lambda5}).info(
        'Computed foreground weight')
    return lambda5


def surrogate_loss(output, target, kinds, perceptual=None, d_scores=None):
    """The attacker's training objective, a sum of the selected terms.

    Pixel terms are measured on [0, 1] images.
    """
    total = torch.zeros((), dtype=output.dtype, device=output.device)
    for kind in kinds:
        if kind == LOSS_L1:
            total = total + F.l1_loss(output / 255.0, target / 255.0)
        elif kind == LOSS_L2:
            total = total + F.mse_loss(output / 255.0, target / 255.0)
        elif kind == LOSS_PERC:
            if perceptual is None:
                raise exceptions.FeatureNetworkUnavailable(
                    'perceptual loss requested without a feature network')
            total = total + F.mse_loss(perceptual(output),
                                       perceptual(target))
        elif kind == LOSS_ADV:
            if d_scores is not None:
                total = total + generator_term(d_scores)
        else:
            raise exceptions.AttackException('unknown surrogate loss %s' % kind)
    return total
