# Training of the watermarking system.
#
# HNet and EXNet are trained jointly through an augmentation layer that
# enrols one operator at a time: a stage only ends once the extraction
# success rate on a held-out validation split passes the gate. Once every
# operator is enrolled the patch discriminator's adversarial loss joins,
# and finally EXNet is fine-tuned on the outputs of a surrogate that mimics
# an attacker.

import os
import time

import numpy as np
import torch

from structmark import attack
from structmark import augment
from structmark import codec
from structmark import config
from structmark import dataset
from structmark import embedding
from structmark import exceptions
from structmark import forensics
from structmark import logutil
from structmark import losses
from structmark import networks
from structmark import synthesis
from structmark import util


LOG, _ = logutil.setup(__name__)
logutil.set_log_level(LOG, 'training')

# Re-exported for callers that think of the weights as training state
TrainWeights = losses.TrainWeights

STAGE_PLAIN = 'plain'
STAGE_ADV_LOSS = 'adversarial-loss'
STAGE_FROM_SCRATCH = 'from-scratch'
STAGE_UNIFIED = 'unified'

MODE_FROM_SCRATCH = 'from-scratch'


class Stage(object):
    def __init__(self, name, kinds, mode=augment.MODE_ONE,
                 adversarial_loss=False, gate=True, min_epochs=1):
        self.name = name
        self.kinds = list(kinds)
        self.mode = mode
        self.adversarial_loss = adversarial_loss
        self.gate = gate
        self.min_epochs = min_epochs

    def policy(self):
        return augment.AugmentPolicy(kinds=self.kinds, mode=self.mode,
                                     include_identity=bool(self.kinds))

    def unique_label(self):
        return ('stage', self.name)

    def json_dump(self):
        return {
            'name': self.name,
            'kinds': self.kinds,
            'mode': self.mode,
            'adversarial_loss': self.adversarial_loss,
            'gate': self.gate,
            'min_epochs': self.min_epochs,
        }


class Curriculum(object):
    """Ordered training stages and the rule for leaving each of them."""

    def __init__(self, operators=None, gate_sr=None, max_epochs=None,
                 from_scratch=False, unified=False):
        self.operators = list(operators or config.parsed.get('CURRICULUM'))
        for op in self.operators:
            if augment.FAMILY_ALIASES.get(op) not in augment.QUALITY_HARMLESS:
                raise exceptions.TrainingException(
                    'curriculum operator %s is not a harmless augmentation'
                    % op)
        self.gate_sr = (config.parsed.get('STAGE_GATE_SR')
                        if gate_sr is None else gate_sr)
        self.max_epochs = (config.parsed.get('STAGE_MAX_EPOCHS')
                           if max_epochs is None else max_epochs)
        self.from_scratch = from_scratch
        self.unified = unified
        self.stages = self._stages()

    def _stages(self):
        if self.unified:
            return [Stage(STAGE_UNIFIED, [])]

        if self.from_scratch:
            return [Stage(STAGE_FROM_SCRATCH, self.operators,
                          augment.MODE_UPTO, gate=False)]

        stages = [Stage(STAGE_PLAIN, [])]
        for i, op in enumerate(self.operators):
            stages.append(Stage(op, self.operators[:i + 1]))
        stages.append(Stage(STAGE_ADV_LOSS, self.operators, augment.MODE_UPTO,
                            adversarial_loss=True,
                            min_epochs=config.parsed.get('ADV_LOSS_EPOCHS')))
        return stages

    def json_dump(self):
        return {
            'operators': self.operators,
            'gate_sr': self.gate_sr,
            'max_epochs': self.max_epochs,
            'from_scratch': self.from_scratch,
            'unified': self.unified,
            'stages': [s.json_dump() for s in self.stages],
        }


class StageLog(object):
    """Timestamped stage events, kept in memory and as JSON lines."""

    def __init__(self, path=None):
        self.records = []
        self.lines = util.JsonLinesLog(path) if path else None

    def record(self, stage, event, **fields):
        entry = dict(fields, stage=stage, event=event, time=time.time())
        self.records.append(entry)
        if self.lines:
            self.lines.write(entry)
        return entry

    def events(self, event):
        return [r for r in self.records if r['event'] == event]

    def order(self):
        return [r['stage'] for r in self.events('start')]


def _batches(count, batch_size, generator):
    order = torch.randperm(count, generator=generator)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


class Trainer(object):
    def __init__(self, covers, out_dir, seed=None, mode=embedding.MODE_OURS,
                 weights=None, curriculum=None, device=None):
        if len(covers) < 2:
            raise exceptions.TrainingException(
                'training needs at least two cover images')

        self.out_dir = out_dir
        self.seed = config.parsed.get('SEED') if seed is None else seed
        self.mode = mode
        self.unified = mode == embedding.MODE_UNIFIED
        self.device = device or util.get_device()
        self.codec = embedding.codec_config()
        self.forensics = forensics.ForensicsConfig(codec_cfg=self.codec)
        self.wm = synthesis.default_unified()
        self.curriculum = curriculum or Curriculum(
            unified=self.unified, from_scratch=mode == MODE_FROM_SCRATCH)

        self.rng = np.random.default_rng(self.seed)
        self.generator = torch.Generator().manual_seed(self.seed)
        self.batch_size = config.parsed.get('BATCH_SIZE')

        # Validation images are carved from the training covers
        order = self.rng.permutation(len(covers))
        n_val = max(1, int(len(covers) *
                           config.parsed.get('VALIDATION_FRACTION')))
        val = [covers[i] for i in order[:n_val]]
        train = [covers[i] for i in order[n_val:]]

        train_set = dataset.StructureDataset(train)
        val_set = dataset.StructureDataset(val)
        self.train_covers = dataset.stack(train_set.targets)
        self.train_masks = dataset.stack_masks(train_set.masks)
        self.val_covers = dataset.stack(val_set.targets)
        self.val_masks = dataset.stack_masks(val_set.masks)
        self.image_size = tuple(self.train_covers.shape[-2:])

        if self.unified:
            lambda5 = 1.0
        else:
            lambda5 = losses.compute_lambda5(train_set.masks)
        self.weights = weights or losses.TrainWeights(lambda5=lambda5)
        self.weights.lambda5 = lambda5

        self.hnet = networks.build(
            networks.NetworkSpec(networks.HNET), self.seed).to(self.device)
        self.exnet = networks.build(
            networks.NetworkSpec(networks.EXNET), self.seed + 1).to(
            self.device)
        self.disc = networks.build(
            networks.NetworkSpec(networks.DISCRIMINATOR), self.seed + 2).to(
            self.device)
        self.optimizer = torch.optim.Adam([
            {'params': self.hnet.parameters(), 'lr': self.weights.lr_main},
            {'params': self.exnet.parameters(), 'lr': self.weights.lr_main},
        ])
        self.disc_optimizer = torch.optim.Adam(self.disc.parameters(),
                                               lr=self.weights.lr_main)

        prefix = os.path.join(out_dir, 'training', mode)
        self.stage_log = StageLog(prefix + '-stages.jsonl')
        self.metrics = util.JsonLinesLog(prefix + '-metrics.jsonl')
        self.log = LOG.withField('mode', mode)

    def unique_label(self):
        return ('training', self.mode)

    def _colors(self, count):
        return torch.tensor(
            [codec.random_codeword(self.rng, self.codec)
             for _ in range(count)], dtype=torch.float32)

    def _targets(self, colors, masks, height, width):
        if self.unified:
            return synthesis.render_unified_tensor(
                self.wm, height, width, colors.shape[0]).to(self.device)
        return synthesis.synthesize_batch(colors.to(self.device), masks)

    def _loss_masks(self, masks, like):
        if self.unified:
            return torch.ones_like(like[:, :1])
        return masks

    def _forward(self, covers, masks, ops):
        """Embed, augment and extract one batch."""
        colors = self._colors(covers.shape[0])
        height, width = covers.shape[-2:]
        watermarks = self._targets(colors, masks, height, width)
        watermarked = networks.embed(self.hnet, covers, watermarks)

        aug_watermarked, (aug_covers,), aug_masks = augment.apply_all(
            ops, watermarked, [covers], [] if self.unified else [masks])
        aug_masks = aug_masks[0] if aug_masks else None

        # The watermark follows the structure through the augmentation
        aug_targets = self._targets(colors, aug_masks,
                                    *aug_watermarked.shape[-2:])
        return {
            'colors': colors,
            'watermarked': watermarked,
            'aug_watermarked': aug_watermarked,
            'aug_covers': aug_covers,
            'aug_masks': self._loss_masks(aug_masks, aug_watermarked),
            'aug_targets': aug_targets,
            'extracted': self.exnet(aug_watermarked),
            'extracted_clean': self.exnet(aug_covers),
        }

    def train_step(self, covers, masks, ops, weights, use_adv):
        covers = covers.to(self.device)
        masks = masks.to(self.device)
        out = self._forward(covers, masks, ops)

        d_scores = self.disc(out['watermarked']) if use_adv else None
        embed = losses.loss_embed(covers, out['watermarked'], d_scores,
                                  weights)
        extract_wm = losses.loss_extract(
            out['extracted'], out['aug_targets'], out['aug_masks'], True,
            weights)
        extract_clean = losses.loss_extract(
            out['extracted_clean'], None, None, False, weights)
        total = losses.loss_total(embed, extract_wm, extract_clean, weights)

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        terms = {
            'total': float(total.detach()),
            'embed': float(embed.detach()),
            'extract_watermarked': float(extract_wm.detach()),
            'extract_clean': float(extract_clean.detach()),
        }
        if use_adv:
            d_loss = losses.discriminator_loss(
                self.disc(covers), self.disc(out['watermarked'].detach()))
            self.disc_optimizer.zero_grad()
            d_loss.backward()
            self.disc_optimizer.step()
            terms['discriminator'] = float(d_loss.detach())
        return terms

    def train_epoch(self, stage, weights):
        self.hnet.train()
        self.exnet.train()
        self.disc.train()
        policy = stage.policy()
        sums = {}
        count = 0
        for idx in _batches(self.train_covers.shape[0], self.batch_size,
                            self.generator):
            ops = augment.sample_policy(policy, self.rng, self.image_size)
            terms = self.train_step(self.train_covers[idx],
                                    self.train_masks[idx], ops, weights,
                                    stage.adversarial_loss)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        return {k: v / count for k, v in sums.items()}

    def _scaled_forensics(self, height, width):
        area = float(height * width) / (self.image_size[0] *
                                        self.image_size[1])
        return forensics.ForensicsConfig(
            error_threshold=self.forensics.error_threshold,
            min_foreground=int(round(self.forensics.min_foreground * area)),
            codec_cfg=self.codec)

    def _judge(self, extracted, masks, targets, colors, fcfg):
        if self.unified:
            nc = synthesis.normalized_correlation_tensor(extracted, targets)
            return nc >= fcfg.nc_threshold
        return forensics.success_tensor(extracted, masks,
                                        colors.to(extracted.device), fcfg)

    def validate(self, stage):
        """(success rate, false-positive rate) on the validation split under
        the stage's augmentations. Seeded so every call sees the same draws."""
        rng_state = self.rng
        self.rng = np.random.default_rng(self.seed + 7)
        self.hnet.eval()
        self.exnet.eval()
        successes = false_positives = total = 0
        policy = stage.policy()
        try:
            with torch.no_grad():
                for start in range(0, self.val_covers.shape[0],
                                   self.batch_size):
                    covers = self.val_covers[
                        start:start + self.batch_size].to(self.device)
                    masks = self.val_masks[
                        start:start + self.batch_size].to(self.device)
                    ops = augment.sample_policy(policy, self.rng,
                                                self.image_size)
                    out = self._forward(covers, masks, ops)
                    fcfg = self._scaled_forensics(
                        *out['aug_watermarked'].shape[-2:])

                    successes += int(self._judge(
                        out['extracted'], out['aug_masks'],
                        out['aug_targets'], out['colors'], fcfg).sum())
                    if self.unified:
                        fp = synthesis.normalized_correlation_tensor(
                            out['extracted_clean'], out['aug_targets']) >= \
                            fcfg.nc_threshold
                    else:
                        fp = forensics.false_positive_tensor(
                            out['extracted_clean'], out['aug_masks'], fcfg)
                    false_positives += int(fp.sum())
                    total += covers.shape[0]
        finally:
            self.rng = rng_state
        return successes / float(total), false_positives / float(total)

    def color_drift(self):
        """Mean per-channel shift of watermarked images from their covers."""
        self.hnet.eval()
        with torch.no_grad():
            covers = self.val_covers.to(self.device)
            colors = self._colors(covers.shape[0])
            watermarks = self._targets(colors, self.val_masks.to(self.device),
                                       *covers.shape[-2:])
            watermarked = networks.embed(self.hnet, covers, watermarks)
            drift = (watermarked - covers).mean(dim=(0, 2, 3)).cpu()
        values = [float(d) for d in drift]
        return {'drift': values, 'max_abs': max(abs(v) for v in values)}

    def checkpoint(self, stage_name, weights=None):
        weights = weights or self.weights
        return networks.Checkpoint(
            {'hnet': self.hnet, 'exnet': self.exnet, 'disc': self.disc},
            {'main': self.optimizer, 'disc': self.disc_optimizer},
            stage=stage_name,
            extra={'mode': self.mode, 'weights': weights.json_dump(),
                   'curriculum': self.curriculum.json_dump(),
                   'seed': self.seed})

    def stage_path(self, stage_name):
        return os.path.join(self.out_dir, 'checkpoints', '%s-stage-%s.pt'
                            % (self.mode, stage_name))

    def run_stage(self, stage, weights):
        log = self.log.withStage(stage.name)
        self.stage_log.record(stage.name, 'start', kinds=stage.kinds,
                              **{'lambda': weights.lam,
                                 'lambda2': weights.lambda2})
        passed = False
        sr = fp = 0.0
        epoch = 0
        for epoch in range(1, self.curriculum.max_epochs + 1):
            terms = self.train_epoch(stage, weights)
            sr, fp = self.validate(stage)
            self.metrics.write(dict(terms, stage=stage.name, epoch=epoch,
                                    sr=sr, fp=fp))
            log.withFields({'epoch': epoch, 'sr': sr, 'fp': fp,
                            'loss': terms['total']}).info('Epoch complete')
            if epoch >= min(stage.min_epochs, self.curriculum.max_epochs) \
                    and sr >= self.curriculum.gate_sr:
                passed = True
                break

        drift = self.color_drift()
        degenerate = networks.is_degenerate(self.exnet, self.val_covers)
        if degenerate:
            log.warning('EXNet output is constant over the validation covers')
        if not passed and stage.gate:
            self.stage_log.record(stage.name, 'failed', sr=sr, epochs=epoch,
                                  color_drift=drift, degenerate=degenerate)
            raise exceptions.StageGateFailure(
                'stage %s reached SR %.3f (gate %.2f) after %d epochs; '
                'color drift %s%s'
                % (stage.name, sr, self.curriculum.gate_sr, epoch,
                   ', '.join('%.2f' % d for d in drift['drift']),
                   '; EXNet output is constant' if degenerate else ''))

        self.stage_log.record(stage.name, 'finish', sr=sr, fp=fp,
                              epochs=epoch, passed=passed, color_drift=drift,
                              degenerate=degenerate)
        return {'stage': stage.name, 'sr': sr, 'fp': fp, 'epochs': epoch,
                'passed': passed, 'color_drift': drift,
                'degenerate': degenerate}

    def enroll_adversarial_loss(self, stage, weights):
        weights = weights.adversarial_phase()
        # EXNet keeps learning, at the reduced rate
        self.optimizer.param_groups[1]['lr'] = weights.lr_exnet_finetune
        self.stage_log.record(stage.name, 'enroll-adversarial-loss',
                              **{'lambda': weights.lam,
                                 'lambda2': weights.lambda2,
                                 'lr_exnet': weights.lr_exnet_finetune})
        self.log.withStage(stage.name).info('Adversarial loss enrolled')
        return weights

    def run_curriculum(self):
        """Every stage in order. Returns (checkpoint paths, stage results)."""
        weights = self.weights
        enrolled = False
        paths = []
        results = []
        with util.RecordedOperation('curriculum', self):
            for stage in self.curriculum.stages:
                if stage.adversarial_loss and not enrolled:
                    weights = self.enroll_adversarial_loss(stage, weights)
                    enrolled = True
                results.append(self.run_stage(stage, weights))
                paths.append(self.checkpoint(stage.name, weights).save(
                    self.stage_path(stage.name)))

        self.weights = weights
        paths.append(self.checkpoint(embedding.STAGE_CURRICULUM).save(
            embedding.checkpoint_path(self.out_dir, self.mode,
                                      embedding.STAGE_CURRICULUM)))
        return paths, results

    def _success_rate(self, outputs, masks, colors, exnet=None):
        exnet = exnet or self.exnet
        extracted = networks.run_batched(exnet, outputs)
        if self.unified:
            targets = synthesis.render_unified_tensor(
                self.wm, outputs.shape[-2], outputs.shape[-1],
                outputs.shape[0])
            return float((synthesis.normalized_correlation_tensor(
                extracted, targets) >= self.forensics.nc_threshold).float()
                .mean())
        return float(forensics.success_tensor(
            extracted, masks, colors, self.forensics).float().mean())

    def _hold_out(self, inputs, targets):
        """Split off pairs that neither the mimic nor EXNet trains on."""
        count = inputs.shape[0]
        held = max(1, int(round(
            count * config.parsed.get('VALIDATION_FRACTION'))))
        if count - held < 2:
            raise exceptions.DegenerateDataset(
                'the adversarial stage needs at least %d pairs, got %d'
                % (held + 2, count))
        return ((inputs[:-held], targets[:-held]),
                (inputs[-held:], targets[-held:]))

    def adversarial_stage(self, inputs, targets):
        """Mimic an attacker's surrogate, then fine-tune EXNet on its outputs.

        inputs and targets are the adversarial-stage split as tensors. The
        mimic's PSNR and the success rates before and after fine-tuning are
        measured on held-out pairs.
        """
        log = self.log.withStage(embedding.STAGE_ADVERSARIAL)
        self.stage_log.record(embedding.STAGE_ADVERSARIAL, 'start')
        color = embedding.owner_color(cfg=self.codec)
        (inputs, targets), (held_inputs, held_targets) = self._hold_out(
            inputs, targets)

        watermarked = embedding.watermark_images(
            self.hnet, targets, self.mode, color, self.wm)
        held_watermarked = embedding.watermark_images(
            self.hnet, held_targets, self.mode, color, self.wm)
        spec = attack.SurrogateSpec(
            config.parsed.get('MIMIC_ARCH'), [losses.LOSS_L2],
            config.parsed.get('MIMIC_USE_AUGMENTATION'), seed=self.seed,
            epochs=config.parsed.get('MIMIC_EPOCHS'), name='mimic')
        mimic, report = attack.train_surrogate(
            spec, inputs, watermarked, held_inputs, held_watermarked,
            device=self.device)
        if report.psnr < config.parsed.get('MIMIC_PSNR_FLOOR'):
            log.withField('psnr', report.psnr).warning(
                'Mimic surrogate is below the PSNR floor, the adversarial '
                'stage will teach EXNet little')

        mimic_out = networks.run_batched(mimic, inputs)
        mimic_masks = embedding.structure_masks(mimic_out)
        owner = torch.tensor([color] * inputs.shape[0], dtype=torch.float32)

        held_out = networks.run_batched(mimic, held_inputs)
        held_masks = embedding.structure_masks(held_out)
        held_owner = torch.tensor([color] * held_inputs.shape[0],
                                  dtype=torch.float32)
        before = self._success_rate(held_out, held_masks, held_owner)

        weights = self.weights
        optimizer = torch.optim.Adam(self.exnet.parameters(),
                                     lr=weights.lr_exnet_finetune)
        target_masks = embedding.structure_masks(targets) \
            if not self.unified else None
        policy = augment.harmless_policy(augment.MODE_UPTO,
                                         include_identity=True)
        if self.unified:
            policy = augment.AugmentPolicy()

        with util.RecordedOperation('adversarial stage', self):
            for epoch in range(config.parsed.get('EXNET_FINETUNE_EPOCHS')):
                self.exnet.train()
                self.hnet.eval()
                for idx in _batches(inputs.shape[0], self.batch_size,
                                    self.generator):
                    sm = mimic_out[idx].to(self.device)
                    sm_masks = self._loss_masks(
                        None if self.unified
                        else mimic_masks[idx].to(self.device), sm)
                    sm_targets = self._targets(
                        owner[idx], sm_masks, *sm.shape[-2:])

                    covers = targets[idx].to(self.device)
                    masks = None if self.unified else \
                        target_masks[idx].to(self.device)
                    ops = augment.sample_policy(policy, self.rng,
                                                tuple(covers.shape[-2:]))
                    with torch.no_grad():
                        out = self._forward(covers, masks, ops)

                    loss = losses.loss_extract(
                        self.exnet(sm), sm_targets, sm_masks, True, weights)
                    loss = loss + losses.loss_extract(
                        self.exnet(out['aug_watermarked']),
                        out['aug_targets'], out['aug_masks'], True, weights)
                    loss = loss + losses.loss_extract(
                        self.exnet(out['aug_covers']), None, None, False,
                        weights)
                    loss = loss + losses.loss_extract(
                        self.exnet(inputs[idx].to(self.device)), None, None,
                        False, weights)
                    loss = weights.lam * loss

                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                log.withField('epoch', epoch).debug('EXNet fine-tune epoch')

        after = self._success_rate(held_out, held_masks, held_owner)
        result = {'mimic_psnr': report.psnr, 'sr_before': before,
                  'sr_after': after, 'held_out': held_inputs.shape[0]}
        self.stage_log.record(embedding.STAGE_ADVERSARIAL, 'finish', **result)
        log.withFields(result).info('Adversarial stage complete')

        path = self.checkpoint(embedding.STAGE_ADVERSARIAL).save(
            embedding.checkpoint_path(self.out_dir, self.mode,
                                      embedding.STAGE_ADVERSARIAL))
        result['checkpoint'] = path
        return result


def run_curriculum(covers, out_dir, seed=None, mode=embedding.MODE_OURS,
                   curriculum=None):
    trainer = Trainer(covers, out_dir, seed, mode, curriculum=curriculum)
    paths, results = trainer.run_curriculum()
    return trainer, paths, results


def adversarial_stage(trainer, inputs, targets):
    return trainer.adversarial_stage(inputs, targets)


def train_system(ds, out_dir, seed=None, mode=embedding.MODE_OURS,
                 from_scratch=False):
    """Curriculum (or the from-scratch ablation), then the adversarial stage.

    The ablation stops after its single stage and reports color drift.
    """
    covers = [b for _, b in ds.load_split(dataset.SPLIT_WATERMARK_TRAIN)]
    if from_scratch:
        mode = MODE_FROM_SCRATCH
    trainer, paths, results = run_curriculum(covers, out_dir, seed, mode)
    summary = {
        'mode': mode,
        'lambda5': trainer.weights.lambda5,
        'stages': results,
        'checkpoints': paths,
        'stage_order': trainer.stage_log.order(),
        'color_drift': trainer.color_drift(),
    }

    if not from_scratch:
        pairs = ds.load_split(dataset.SPLIT_ADVERSARIAL)
        summary['adversarial_stage'] = trainer.adversarial_stage(
            dataset.stack([a for a, _ in pairs]),
            dataset.stack([b for _, b in pairs]))

    util.write_json(os.path.join(out_dir, 'training', '%s-summary.json'
                                 % mode), summary)
    return summary
