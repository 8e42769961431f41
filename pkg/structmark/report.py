# Render attack results as text tables and trained systems as figure grids.

import os

import numpy as np
from PIL import Image as PILImage
from prettytable import PrettyTable
import torch

from structmark import attack
from structmark import dataset
from structmark import embedding
from structmark import exceptions
from structmark import images
from structmark import logutil
from structmark import networks
from structmark import util


LOG, _ = logutil.setup(__name__)

DA_LABELS = ((False, 'W/O DA'), (True, 'With DA'))
SYSTEM_LABELS = (
    (embedding.MODE_OURS, True, 'ours'),
    (embedding.MODE_OURS, False, 'ours†'),
    (embedding.MODE_UNIFIED, True, 'unified'),
    (embedding.MODE_UNIFIED, False, 'unified†'),
)
GRID_PADDING = 4


def format_rate(row):
    if row is None:
        return '-'
    if 'skipped' in row:
        return 'skipped'
    if 'error' in row:
        return 'error'
    return '%.0f%%' % (100.0 * row['sr'])


def _sweep_rows(table):
    """Rows from the plain architecture and loss sweeps."""
    return [r for r in table.rows
            if not r.get('variant') and 'spec_config' in r
            and not r['spec_config'].get('mix')
            and not r['spec_config'].get('finetune_epochs')]


def _spec_columns(rows):
    columns = []
    for row in rows:
        # The DA setting is a table row, not a column
        name = row['spec'].rsplit('/', 1)[0]
        if name not in columns:
            columns.append(name)
    return columns


def table1(table):
    """Success rates laid out as DA setting x system against surrogate."""
    rows = _sweep_rows(table)
    columns = _spec_columns(rows)
    x = PrettyTable()
    x.field_names = ['DA', 'system'] + columns
    for use_augmentation, da_label in DA_LABELS:
        for mode, adversarial_stage, label in SYSTEM_LABELS:
            cells = []
            for column in columns:
                match = [r for r in rows
                         if r['mode'] == mode
                         and r['use_augmentation'] == use_augmentation
                         and r['adversarial_stage'] == adversarial_stage
                         and r['spec'].rsplit('/', 1)[0] == column]
                cells.append(format_rate(match[0] if match else None))
            x.add_row([da_label, label] + cells)
    return x


def _mixing_baseline_row(rows):
    baseline = attack.mixing_baseline().json_dump()
    keys = ('arch', 'losses', 'use_augmentation', 'mix', 'finetune_epochs')
    for row in rows:
        spec_config = row.get('spec_config')
        if row.get('variant') or not spec_config:
            continue
        if all(spec_config.get(k) == baseline[k] for k in keys):
            return row
    return None


def _format_psnr(psnr):
    return '-' if psnr is None else '%.2f' % psnr


def table2(table):
    """Mixing experiment: SR and surrogate PSNR per mixed-in kind, against
    the unmixed surrogate."""
    rows = [r for r in table.rows
            if r['mode'] == embedding.MODE_OURS and r['adversarial_stage']]
    mixed = [r for r in rows if r.get('spec_config', {}).get('mix')]
    x = PrettyTable()
    x.field_names = ['mix', 'ratio', 'SR', 'SM PSNR', 'delta PSNR']
    if not mixed:
        return x

    baseline = _mixing_baseline_row(rows)
    base_psnr = None if baseline is None else baseline.get('sm_psnr')
    if baseline is not None:
        x.add_row(['none', 0.0, format_rate(baseline),
                   _format_psnr(base_psnr), '-'])
    for row in mixed:
        psnr = row.get('sm_psnr')
        delta = '-'
        if psnr is not None and base_psnr is not None:
            delta = '%+.2f' % (psnr - base_psnr)
        x.add_row([row['spec_config']['mix'], row['spec_config']['mix_ratio'],
                   format_rate(row), _format_psnr(psnr), delta])
    return x


def variants_table(table):
    """Circumvention attacks, reported without gates."""
    x = PrettyTable()
    x.field_names = ['variant', 'spec', 'adversarial stage', 'SR', 'FP']
    for row in table.rows:
        if not row.get('variant'):
            continue
        fp = row.get('fp')
        x.add_row([row['variant'], row['spec'], row['adversarial_stage'],
                   format_rate(row), '-' if fp is None else
                   '%.0f%%' % (100.0 * fp)])
    return x


def write_tables(table, report_dir):
    paths = {}
    for name, render in (('table1', table1), ('table2', table2),
                         ('variants', variants_table)):
        x = render(table)
        if not x.rows:
            continue
        path = os.path.join(report_dir, name + '.txt')
        util.atomic_write(path, lambda f, x=x: f.write(
            (str(x) + '\n').encode('utf-8')))
        paths[name] = path
    return paths


def figure_grid(rows, path, padding=GRID_PADDING):
    """Tile rows of equally sized Images into one PNG."""
    if not rows:
        raise exceptions.InvalidImage('a figure needs at least one row')
    height, width = rows[0][0].height, rows[0][0].width
    for row in rows:
        for img in row:
            if (img.height, img.width) != (height, width):
                raise exceptions.DimensionMismatch(
                    'figure tiles differ in size: %s vs %s'
                    % ((img.height, img.width), (height, width)))

    columns = max(len(r) for r in rows)
    canvas = np.full(
        (len(rows) * (height + padding) + padding,
         columns * (width + padding) + padding, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            top = padding + i * (height + padding)
            left = padding + j * (width + padding)
            canvas[top:top + height, left:left + width] = img.quantized()

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    PILImage.fromarray(canvas, mode='RGB').save(path, format='PNG')
    return path


def system_figure(out_dir, mode, path, count=4):
    """cover / watermarked / target / extracted for a few test images."""
    system = embedding.load_system(out_dir, mode)
    ds = dataset.PairedDataset.load(os.path.join(out_dir, 'data'))
    covers = dataset.stack(
        [b for _, b in ds.load_split(dataset.SPLIT_TEST)[:count]])

    masks = None
    if mode == embedding.MODE_OURS:
        masks = embedding.structure_masks(covers)
    targets = embedding.watermark_targets(covers, masks, mode)
    watermarked = embedding.watermark_images(system.hnet, covers, mode,
                                             masks=masks)
    extracted = networks.run_batched(system.exnet(True), watermarked)

    rows = []
    for tensors in zip(covers, watermarked, targets, extracted):
        rows.append([images.Image.from_tensor(torch.as_tensor(t))
                     for t in tensors])
    return figure_grid(rows, path)


def render_report(out_dir):
    """Every table and figure that the available artifacts allow."""
    report_dir = os.path.join(out_dir, 'report')
    results = os.path.join(out_dir, 'attack', 'results.json')
    outputs = {}

    if os.path.exists(results):
        table = attack.ResultTable.load(results)
        outputs.update(write_tables(table, report_dir))
    else:
        LOG.withField('path', results).warning(
            'No attack results, skipping tables')

    for mode in embedding.MODES:
        path = os.path.join(report_dir, 'figure-%s.png' % mode)
        try:
            outputs['figure-' + mode] = system_figure(out_dir, mode, path)
        except exceptions.MissingCheckpoint as e:
            LOG.withField('mode', mode).info('No figure: %s' % e)
        except Exception as e:
            util.ignore_exception('figure %s' % mode, e)

    if not outputs:
        raise exceptions.MissingArtifact(
            'nothing to report in %s, run train or attack first' % out_dir)
    util.write_json(os.path.join(report_dir, 'report.json'), outputs)
    return outputs
