# Attacker simulation: surrogate models trained on (input, watermarked
# output) pairs harvested from the protected model, with configurable
# architecture, loss, augmentation and data mixing, plus the circumvention
# attacks run against a trained surrogate.

import copy
import os

import numpy as np
import torch

from structmark import augment
from structmark import codec
from structmark import config
from structmark import dataset
from structmark import embedding
from structmark import exceptions
from structmark import forensics
from structmark import images
from structmark import jobs
from structmark import logutil
from structmark import losses
from structmark import networks
from structmark import synthesis
from structmark import util


LOG, _ = logutil.setup(__name__)
logutil.set_log_level(LOG, 'attack')

MIX_CLEAN = 'clean'
MIX_KINDS = (MIX_CLEAN,) + augment.QUALITY_HARMFUL


class SurrogateSpec(object):
    """One attacker configuration."""

    _version = 1

    def __init__(self, arch=networks.UNET_SM, losses_=None,
                 use_augmentation=False, mix=None, mix_ratio=0.0, seed=0,
                 epochs=None, finetune_epochs=0, name=None):
        if arch not in networks.SURROGATE_KINDS:
            raise exceptions.AttackException(
                'unknown surrogate architecture %s' % arch)
        losses_ = list(losses_ or [losses.LOSS_L2])
        for kind in losses_:
            if kind not in losses.SURROGATE_LOSSES:
                raise exceptions.AttackException(
                    'unknown surrogate loss %s' % kind)
        if mix is not None and mix not in MIX_KINDS:
            raise exceptions.AttackException('unknown mixing %s' % mix)
        if mix_ratio < 0.0 or mix_ratio > 1.0:
            raise exceptions.AttackException(
                'mixing ratio %.2f outside [0, 1]' % mix_ratio)

        self.arch = arch
        self.losses = losses_
        self.use_augmentation = bool(use_augmentation)
        self.mix = mix
        self.mix_ratio = float(mix_ratio) if mix else 0.0
        self.seed = int(seed)
        self.epochs = int(config.parsed.get('SURROGATE_EPOCHS')
                          if epochs is None else epochs)
        self.finetune_epochs = int(finetune_epochs)
        self.name = name or self.default_name()

    def default_name(self):
        name = '%s/%s' % (self.arch, '+'.join(self.losses))
        if self.mix:
            name += '/mix-%s-%g' % (self.mix, self.mix_ratio)
        if self.finetune_epochs:
            name += '/finetune-%d' % self.finetune_epochs
        return name + ('/with-da' if self.use_augmentation else '/no-da')

    def unique_label(self):
        return ('surrogate', self.name)

    def json_dump(self):
        return {
            'version': self._version,
            'name': self.name,
            'arch': self.arch,
            'losses': self.losses,
            'use_augmentation': self.use_augmentation,
            'mix': self.mix,
            'mix_ratio': self.mix_ratio,
            'seed': self.seed,
            'epochs': self.epochs,
            'finetune_epochs': self.finetune_epochs,
        }

    @staticmethod
    def from_json(data):
        data = dict(data)
        data.pop('version', None)
        data['losses_'] = data.pop('losses', None)
        return SurrogateSpec(**data)

    def __repr__(self):
        return 'SURROGATE:' + str(self.json_dump())

    def __eq__(self, other):
        if not isinstance(other, SurrogateSpec):
            raise NotImplementedError(
                'Objects must be subclasses of SurrogateSpec')
        return self.__hash__() == other.__hash__()

    def __hash__(self):
        return hash(str(self.json_dump()))


def controlled_fields_differ(specs, field):
    """The fields other than field (and the name) that vary across specs."""
    dumps = [s.json_dump() for s in specs]
    differing = set()
    for d in dumps[1:]:
        for key, value in d.items():
            if key in (field, 'name'):
                continue
            if value != dumps[0][key]:
                differing.add(key)
    return sorted(differing)


def controlled_sweep(specs, field):
    """specs, once checked to vary only field."""
    differing = controlled_fields_differ(specs, field)
    if differing:
        raise exceptions.AttackException(
            'a sweep over %s also varies %s' % (field, ', '.join(differing)))
    return specs


def arch_sweep(use_augmentation, seed=0):
    """Vary the architecture with the loss fixed to L2."""
    return controlled_sweep(
        [SurrogateSpec(arch, [losses.LOSS_L2], use_augmentation, seed=seed)
         for arch in networks.SURROGATE_KINDS], 'arch')


def loss_sweep(use_augmentation, seed=0):
    """Vary the loss with the architecture fixed to the small UNet."""
    combos = [[losses.LOSS_L1], [losses.LOSS_L2],
              [losses.LOSS_L2, losses.LOSS_PERC],
              [losses.LOSS_L2, losses.LOSS_ADV]]
    return controlled_sweep(
        [SurrogateSpec(networks.UNET_SM, combo, use_augmentation, seed=seed)
         for combo in combos], 'losses')


def mixing_sweep(seed=0, ratio=0.1):
    """Attacker-side mixing of harmful-augmented or clean targets."""
    return controlled_sweep(
        [SurrogateSpec(networks.UNET_SM, [losses.LOSS_L2], True,
                       mix=kind, mix_ratio=ratio, seed=seed)
         for kind in MIX_KINDS], 'mix')


class SurrogateReport(object):
    def __init__(self, spec, psnr, epochs, mixed):
        self.spec = spec
        self.psnr = psnr
        self.epochs = epochs
        self.mixed = mixed

    def json_dump(self):
        return {'spec': self.spec.json_dump(), 'psnr': self.psnr,
                'epochs': self.epochs, 'mixed': self.mixed}


def _check_pairs(inputs, targets):
    if inputs.shape[0] < 2 or inputs.shape != targets.shape:
        raise exceptions.DegenerateDataset(
            'surrogate training needs at least two matched pairs, got '
            '%s inputs and %s targets'
            % (tuple(inputs.shape), tuple(targets.shape)))
    if bool((targets == targets[0:1]).all()):
        raise exceptions.DegenerateDataset(
            'every surrogate target is identical')


def mix_pairs(spec, inputs, targets, rng, clean_targets=None):
    """Replace a seeded subset of targets, keeping each input aligned with
    its target; returns (inputs, targets, indices).

    Geometric operators move the input with its target, photometric ones
    touch the target only.
    """
    if not spec.mix or spec.mix_ratio == 0.0:
        return inputs, targets, []

    count = int(round(spec.mix_ratio * targets.shape[0]))
    chosen = sorted(rng.choice(targets.shape[0], size=count, replace=False))
    mixed_inputs = inputs.clone()
    mixed = targets.clone()
    if spec.mix == MIX_CLEAN:
        if clean_targets is None:
            raise exceptions.AttackException(
                'clean mixing needs the clean targets')
        for i in chosen:
            mixed[i] = clean_targets[i]
    else:
        policy = augment.AugmentPolicy(kinds=[spec.mix])
        for i in chosen:
            ops = augment.sample_policy(policy, rng, tuple(targets.shape[-2:]))
            mixed[i], (mixed_inputs[i],), _ = augment.apply_all(
                ops, targets[i], [inputs[i]])
    return mixed_inputs, mixed, [int(i) for i in chosen]


def augment_pairs(inputs, targets, rng, policy=None):
    """The attacker's per-sample augmentation, applied jointly."""
    policy = policy or augment.attacker_policy()
    out_in, out_tgt = [], []
    for i in range(inputs.shape[0]):
        ops = augment.sample_policy(policy, rng, tuple(inputs.shape[-2:]))
        a, (b,), _ = augment.apply_all(ops, inputs[i], [targets[i]])
        out_in.append(a)
        out_tgt.append(b)
    return torch.stack(out_in), torch.stack(out_tgt)


def _batches(count, batch_size, generator):
    order = torch.randperm(count, generator=generator)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def train_surrogate(spec, inputs, targets, eval_inputs=None,
                    eval_targets=None, clean_targets=None,
                    adversarial_reference=None, device=None):
    """Train an attacker's surrogate on (input, watermarked output) pairs.

    adversarial_reference, when given, is a set of unpaired clean images
    the surrogate's outputs are pushed towards by a discriminator.
    """
    _check_pairs(inputs, targets)
    device = device or util.get_device()
    rng = np.random.default_rng(spec.seed)
    generator = torch.Generator().manual_seed(spec.seed)

    inputs, targets, mixed = mix_pairs(spec, inputs, targets, rng,
                                       clean_targets)

    net = networks.build(networks.NetworkSpec(spec.arch), seed=spec.seed)
    net = net.to(device)
    optimizer = torch.optim.Adam(net.parameters(),
                                 lr=config.parsed.get('SURROGATE_LR'))

    perceptual = None
    if losses.LOSS_PERC in spec.losses:
        perceptual = networks.PerceptualFeatures().to(device)

    disc = disc_optimizer = None
    if losses.LOSS_ADV in spec.losses or adversarial_reference is not None:
        disc = networks.build(
            networks.NetworkSpec(networks.DISCRIMINATOR),
            seed=spec.seed + 1).to(device)
        disc_optimizer = torch.optim.Adam(
            disc.parameters(), lr=config.parsed.get('SURROGATE_LR'))
    kinds = list(spec.losses)
    if adversarial_reference is not None and losses.LOSS_ADV not in kinds:
        kinds.append(losses.LOSS_ADV)

    batch_size = config.parsed.get('BATCH_SIZE')
    log = LOG.withSpec(spec)
    with util.RecordedOperation('train surrogate', spec):
        for epoch in range(spec.epochs):
            net.train()
            total = 0.0
            for idx in _batches(inputs.shape[0], batch_size, generator):
                a, b = inputs[idx], targets[idx]
                if spec.use_augmentation:
                    a, b = augment_pairs(a, b, rng)
                a, b = a.to(device), b.to(device)

                out = net(a)
                d_scores = disc(out) if disc is not None else None
                loss = losses.surrogate_loss(out, b, kinds, perceptual,
                                             d_scores)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.detach())

                if disc is not None:
                    if adversarial_reference is not None:
                        pick = torch.randint(
                            0, adversarial_reference.shape[0],
                            (a.shape[0],), generator=generator)
                        real = adversarial_reference[pick]
                        if real.shape[-2:] != out.shape[-2:]:
                            real = augment.Resize(size=out.shape[-1]).image(
                                real)
                        real = real.to(device)
                    else:
                        real = b
                    d_loss = losses.discriminator_loss(
                        disc(real), disc(out.detach()))
                    disc_optimizer.zero_grad()
                    d_loss.backward()
                    disc_optimizer.step()

            log.withFields({'epoch': epoch, 'loss': total}).debug(
                'Surrogate epoch complete')

    psnr = None
    if eval_inputs is not None:
        psnr = output_psnr(net, eval_inputs, eval_targets)
    report = SurrogateReport(spec, psnr, spec.epochs, len(mixed))
    log.withFields(report.json_dump()).info('Trained surrogate')
    return net, report


def output_psnr(net, inputs, targets):
    """Mean PSNR of a network's outputs against reference targets."""
    outputs = networks.run_batched(net, inputs)
    values = [images.psnr(images.Image.from_tensor(o),
                          images.Image.from_tensor(t))
              for o, t in zip(outputs, targets)]
    return float(np.mean(values))


def finetune_attack(net, inputs, targets, epochs=None, seed=0, device=None):
    """Supervised fine-tuning of a stolen model on clean pairs."""
    epochs = (config.parsed.get('FINETUNE_ATTACK_EPOCHS')
              if epochs is None else epochs)
    tuned = copy.deepcopy(net)
    if epochs == 0:
        return tuned

    device = device or util.get_device()
    tuned = tuned.to(device)
    optimizer = torch.optim.Adam(tuned.parameters(),
                                 lr=config.parsed.get('SURROGATE_LR'))
    generator = torch.Generator().manual_seed(seed)
    batch_size = config.parsed.get('BATCH_SIZE')
    with util.RecordedOperation('fine-tune attack'):
        for _ in range(epochs):
            tuned.train()
            for idx in _batches(inputs.shape[0], batch_size, generator):
                out = tuned(inputs[idx].to(device))
                loss = losses.surrogate_loss(out, targets[idx].to(device),
                                             [losses.LOSS_L2])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
    return tuned


def overwrite_attack(hnet, suspects, masks, attacker_color):
    """Re-embed suspect images with the attacker's own color."""
    colors = torch.tensor([attacker_color] * suspects.shape[0],
                          dtype=suspects.dtype)
    watermarks = synthesis.synthesize_batch(colors, masks)
    device = next(hnet.parameters()).device
    hnet.eval()
    with torch.no_grad():
        return networks.embed(hnet, suspects.to(device),
                              watermarks.to(device)).cpu()


#
# The attack matrix
#
class AttackCell(object):
    """One surrogate spec attacked against one trained system."""

    def __init__(self, mode, spec, variant=None):
        if mode not in embedding.MODES:
            raise exceptions.AttackException('unknown system mode %s' % mode)
        self.mode = mode
        self.spec = spec
        self.variant = variant

    def unique_label(self):
        return ('cell', '%s:%s' % (self.mode, self.spec.name))

    def json_dump(self):
        return {'mode': self.mode, 'spec': self.spec.json_dump(),
                'variant': self.variant}

    @staticmethod
    def from_json(data):
        return AttackCell(data['mode'],
                          SurrogateSpec.from_json(data['spec']),
                          data.get('variant'))


class ResultTable(object):
    def __init__(self, rows=None):
        self.rows = rows or []

    def add(self, rows):
        self.rows.extend(rows)

    def select(self, **kwargs):
        return [r for r in self.rows
                if all(r.get(k) == v for k, v in kwargs.items())]

    def json_dump(self):
        return {'rows': self.rows}

    def save(self, path):
        util.write_json(path, self.json_dump())
        return path

    @staticmethod
    def load(path):
        return ResultTable(util.read_json(path)['rows'])


class CellData(object):
    """The tensors a cell needs, read from the prepared dataset."""

    def __init__(self, out_dir):
        ds = dataset.PairedDataset.load(os.path.join(out_dir, 'data'))
        surrogate = ds.load_split(dataset.SPLIT_SURROGATE)
        test = ds.load_split(dataset.SPLIT_TEST)
        spare = ds.load_split(dataset.SPLIT_ADVERSARIAL)[:len(surrogate)]

        self.inputs = dataset.stack([a for a, _ in surrogate])
        self.targets = dataset.stack([b for _, b in surrogate])
        self.test_inputs = dataset.stack([a for a, _ in test])
        self.test_targets = dataset.stack([b for _, b in test])
        self.spare_inputs = dataset.stack([a for a, _ in spare])
        self.spare_targets = dataset.stack([b for _, b in spare])


def _extraction_rows(cell, system, outputs, clean, sm_psnr, fcfg):
    """SR on surrogate outputs and FP on clean images, both EXNets."""
    rows = []
    color = embedding.owner_color()
    unified = synthesis.default_unified()
    probes = [images.Image.from_tensor(o) for o in outputs]
    clean_probes = [images.Image.from_tensor(c) for c in clean]

    for adversarial_stage in (False, True):
        exnet = system.exnet(adversarial_stage)
        extracted = [images.Image.from_tensor(e)
                     for e in networks.run_batched(exnet, outputs)]
        clean_extracted = [images.Image.from_tensor(e)
                           for e in networks.run_batched(exnet, clean)]

        row = {
            'mode': cell.mode,
            'adversarial_stage': adversarial_stage,
            'use_augmentation': cell.spec.use_augmentation,
            'spec': cell.spec.name,
            'variant': cell.variant,
            'seed': cell.spec.seed,
            'sm_psnr': sm_psnr,
            'spec_config': cell.spec.json_dump(),
        }
        if cell.mode == embedding.MODE_UNIFIED:
            reference = synthesis.render_unified(
                unified, outputs.shape[-2], outputs.shape[-1])
            verdicts = [forensics.nc_verdict(e, reference, fcfg)
                        for e in extracted]
            row['sr'] = forensics.nc_success_rate(verdicts)
            row['mean_nc'] = float(np.mean([v.nc for v in verdicts]))
            clean_verdicts = [forensics.nc_verdict(e, reference, fcfg)
                              for e in clean_extracted]
            row['fp'] = forensics.nc_success_rate(clean_verdicts)
        else:
            report = forensics.verdict_batch(
                zip(extracted, probes), color, fcfg,
                clean=zip(clean_extracted, clean_probes))
            row['sr'] = report.success_rate
            row['fp'] = report.false_positive_rate
        rows.append(row)
    return rows


def run_cell(cell, out_dir, device=None):
    """Train the cell's surrogate and judge its outputs."""
    device = device or util.get_device()
    system = embedding.load_system(out_dir, cell.mode, device)
    data = CellData(out_dir)
    fcfg = forensics.ForensicsConfig()
    log = LOG.withObj(cell)

    watermarked = embedding.watermark_images(system.hnet, data.targets,
                                             cell.mode)
    reference = None
    if cell.variant == 'domain-adversarial':
        reference = data.spare_targets
    sm, report = train_surrogate(
        cell.spec, data.inputs, watermarked, data.test_inputs,
        data.test_targets, clean_targets=data.targets,
        adversarial_reference=reference, device=device)

    if cell.spec.finetune_epochs:
        sm = finetune_attack(sm, data.spare_inputs, data.spare_targets,
                             cell.spec.finetune_epochs, cell.spec.seed,
                             device)

    outputs = networks.run_batched(sm, data.test_inputs)
    if cell.variant == 'overwrite':
        attacker_color = codec.encode_index(0, embedding.codec_config())
        outputs = overwrite_attack(system.hnet, outputs,
                                   embedding.structure_masks(outputs),
                                   attacker_color)

    rows = _extraction_rows(cell, system, outputs, data.test_targets,
                            report.psnr, fcfg)
    log.withField('rows', len(rows)).info('Cell complete')
    return rows


def run_cell_safe(cell, out_dir):
    """run_cell, with cells whose feature network is missing reported as
    skipped rather than failing the matrix."""
    try:
        return run_cell(cell, out_dir)
    except exceptions.FeatureNetworkUnavailable as e:
        LOG.withObj(cell).warning('Skipping cell: %s' % e)
        return [{'mode': cell.mode, 'spec': cell.spec.name,
                 'use_augmentation': cell.spec.use_augmentation,
                 'adversarial_stage': stage, 'variant': cell.variant,
                 'skipped': str(e)}
                for stage in (False, True)]


def default_cells(modes=embedding.MODES):
    """Both DA settings for the architecture and loss sweeps."""
    cells = []
    for mode in modes:
        for use_augmentation in (False, True):
            specs = arch_sweep(use_augmentation)
            specs += [s for s in loss_sweep(use_augmentation)
                      if s.losses != [losses.LOSS_L2]]
            cells += [AttackCell(mode, s) for s in specs]
    return cells


def mixing_baseline(seed=0):
    """The unmixed surrogate the mixing sweep is compared against."""
    return SurrogateSpec(networks.UNET_SM, [losses.LOSS_L2], True, seed=seed)


def table2_cells(ratio=0.1):
    return [AttackCell(embedding.MODE_OURS, s)
            for s in [mixing_baseline()] + mixing_sweep(ratio=ratio)]


def optional_cells():
    """Circumvention attacks reported without gates."""
    spec = SurrogateSpec(networks.UNET_SM, [losses.LOSS_L2], True)
    finetuned = SurrogateSpec(
        networks.UNET_SM, [losses.LOSS_L2], True,
        finetune_epochs=config.parsed.get('FINETUNE_ATTACK_EPOCHS'))
    return [AttackCell(embedding.MODE_OURS, finetuned, 'finetune'),
            AttackCell(embedding.MODE_OURS, spec, 'domain-adversarial'),
            AttackCell(embedding.MODE_OURS, spec, 'overwrite')]


def attack_matrix(cells, out_dir, jobs_count=1):
    """Run every cell, in parallel processes when jobs_count > 1."""
    unique = []
    for cell in cells:
        if cell.json_dump() not in [u.json_dump() for u in unique]:
            unique.append(cell)
    cells = unique

    for mode in set(c.mode for c in cells):
        embedding.load_system(out_dir, mode)

    table = ResultTable()
    with util.RecordedOperation('attack matrix', '%d cells' % len(cells)):
        for rows in jobs.run_all(run_cell_safe, cells, out_dir, jobs_count):
            table.add(rows)
    table.save(os.path.join(out_dir, 'attack', 'results.json'))
    return table
