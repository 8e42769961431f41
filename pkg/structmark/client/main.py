# The structmark command line: build the toy task, train, watermark,
# attack, judge and report.

import glob
import os
import sys

import click
from prettytable import PrettyTable

from structmark import attack
from structmark import codec
from structmark import config
from structmark import dataset
from structmark import embedding
from structmark import exceptions
from structmark import forensics
from structmark import images
from structmark import logutil
from structmark import networks
from structmark import report
from structmark import synthesis
from structmark import training
from structmark import util


LOG, _ = logutil.setup(__name__)
logutil.set_log_level(LOG, 'cli')

CELL_SETS = ('default', 'table2', 'optional', 'all')


def _out(ctx):
    return ctx.obj['out']


def _record(ctx, command, extra=None):
    record = util.run_record(command)
    if extra:
        record.update(extra)
    util.write_json(os.path.join(_out(ctx), 'runs', '%s.json' % command),
                    record)


def _data_dir(ctx):
    return os.path.join(_out(ctx), 'data')


def _load_dataset(ctx):
    return dataset.PairedDataset.load(_data_dir(ctx))


def _png_paths(path):
    if not os.path.isdir(path):
        raise exceptions.MissingArtifact('image directory %s does not exist'
                                         % path)
    paths = sorted(glob.glob(os.path.join(path, '*.png')))
    if not paths:
        raise exceptions.MissingArtifact('no PNG images in %s' % path)
    return paths


@click.group()
@click.option('--config', 'config_path', type=click.Path(exists=True),
              help='Experiment config file (JSON)')
@click.option('--seed', type=int, help='Override the experiment seed')
@click.option('--out', type=click.Path(), help='Output directory')
@click.option('--jobs', type=int, default=1,
              help='Worker processes for the attack matrix')
@click.option('--verbose/--no-verbose', default=False)
@click.pass_context
def cli(ctx, config_path=None, seed=None, out=None, jobs=1, verbose=False):
    if config_path:
        config.parsed.load(config_path)
    if seed is not None:
        config.parsed.experiment['SEED'] = seed
        config.parsed.set('SEED', seed)
    if out:
        config.parsed.experiment['OUTPUT_PATH'] = out
        config.parsed.set('OUTPUT_PATH', out)
    if verbose:
        LOG.logger.setLevel('DEBUG')

    ctx.ensure_object(dict)
    ctx.obj['out'] = config.parsed.get('OUTPUT_PATH')
    ctx.obj['seed'] = config.parsed.get('SEED')
    ctx.obj['jobs'] = jobs
    LOG.withFields({'out': ctx.obj['out'], 'seed': ctx.obj['seed']}).debug(
        'Configured')


@cli.command(name='prepare-data',
             help='Generate or load clean images, degrade them into paired '
                  'data and write seeded splits')
@click.option('--clean', 'clean_dir', type=click.Path(),
              help='Directory of clean PNG images; generated when absent')
@click.option('--count', type=int, help='Number of images to generate')
@click.option('--degradation', type=click.Choice(dataset.DEGRADATIONS))
@click.pass_context
def prepare_data(ctx, clean_dir=None, count=None, degradation=None):
    seed = ctx.obj['seed']
    if clean_dir:
        clean = dataset.load_clean_directory(clean_dir)
    else:
        clean = dataset.generate_clean_images(
            count or config.parsed.get('DATASET_SIZE'), seed=seed)

    ds = dataset.generate_toy_task(clean, _data_dir(ctx), degradation, seed)
    ds = dataset.split(ds, seed=seed)
    path = ds.save()
    _record(ctx, 'prepare-data', {'manifest': path})

    x = PrettyTable()
    x.field_names = ['split', 'pairs']
    for name in dataset.SPLITS:
        x.add_row([name, len(ds.splits[name])])
    click.echo(x)
    click.echo('Manifest %s, content hash %s' % (path, ds.content_hash))


@cli.command(name='train', help='Train HNet and EXNet through the '
                                'curriculum and the adversarial stage')
@click.option('--from-scratch-ablation', 'from_scratch', is_flag=True,
              help='Enrol every augmentation at once, without gates')
@click.option('--unified', is_flag=True,
              help='Train the unified-watermark baseline instead')
@click.pass_context
def train(ctx, from_scratch=False, unified=False):
    if from_scratch and unified:
        raise exceptions.FlagException(
            '--from-scratch-ablation and --unified are exclusive')
    mode = embedding.MODE_UNIFIED if unified else embedding.MODE_OURS
    ds = _load_dataset(ctx)
    summary = training.train_system(ds, _out(ctx), ctx.obj['seed'], mode,
                                    from_scratch)
    _record(ctx, 'train', {'mode': summary['mode']})

    x = PrettyTable()
    x.field_names = ['stage', 'epochs', 'SR', 'FP', 'color drift']
    for stage in summary['stages']:
        x.add_row([stage['stage'], stage['epochs'], '%.3f' % stage['sr'],
                   '%.3f' % stage['fp'],
                   ' '.join('%+.2f' % d
                            for d in stage['color_drift']['drift'])])
    click.echo(x)
    click.echo('Color drift after training: %s'
               % ' '.join('%+.2f' % d
                          for d in summary['color_drift']['drift']))
    if 'adversarial_stage' in summary:
        stage = summary['adversarial_stage']
        click.echo('Adversarial stage: mimic PSNR %.2f, SR %.3f -> %.3f'
                   % (stage['mimic_psnr'] or 0.0, stage['sr_before'],
                      stage['sr_after']))


@cli.command(name='embed', help='Watermark a directory of output images')
@click.argument('input_dir', type=click.Path())
@click.argument('output_dir', type=click.Path())
@click.option('--bits', help='Owner bits as hex (0x...) or binary (0b...)')
@click.option('--unified', is_flag=True)
@click.pass_context
def embed(ctx, input_dir, output_dir, bits=None, unified=False):
    mode = embedding.MODE_UNIFIED if unified else embedding.MODE_OURS
    system = embedding.load_system(_out(ctx), mode)
    cfg = embedding.codec_config()
    color = embedding.owner_color(bits, cfg)
    parsed_bits = codec.parse_bits(bits or config.parsed.get('WATERMARK_BITS'),
                                   cfg)

    written = []
    for path in _png_paths(input_dir):
        img = images.load_image(path)
        networks.check_size(system.hnet.spec, img.height, img.width)
        out = embedding.watermark_images(
            system.hnet, dataset.stack([img]), mode, color)
        target = os.path.join(output_dir, os.path.basename(path))
        images.save_image(images.Image.from_tensor(out[0]), target)
        written.append(target)
        LOG.withImage(target).debug('Watermarked')

    _record(ctx, 'embed', {'mode': mode, 'images': written,
                           'bits_hex': codec.bits_to_hex(parsed_bits),
                           'color': list(color)})
    click.echo('Watermarked %d images with color %s (bits %s)'
               % (len(written), tuple(int(c) for c in color),
                  codec.bits_to_hex(parsed_bits)))


def _extract_all(exnet, paths):
    for path in paths:
        probe = images.load_image(path)
        yield networks.forward_extract(exnet, probe), probe


@cli.command(name='forensics',
             help='Extract and judge the watermark in a directory of images')
@click.argument('input_dir', type=click.Path())
@click.option('--clean', 'clean_dir', type=click.Path(),
              help='Unwatermarked images for the false-positive rate')
@click.option('--bits', help='Claimed owner bits; decoded freely if absent')
@click.option('--unified', is_flag=True)
@click.option('--before-adversarial-stage', 'before', is_flag=True,
              help='Use EXNet as it was before the adversarial stage')
@click.pass_context
def forensics_cmd(ctx, input_dir, clean_dir=None, bits=None, unified=False,
                  before=False):
    mode = embedding.MODE_UNIFIED if unified else embedding.MODE_OURS
    system = embedding.load_system(_out(ctx), mode)
    exnet = system.exnet(not before)
    fcfg = forensics.ForensicsConfig()
    report_dir = os.path.join(_out(ctx), 'forensics')
    paths = _png_paths(input_dir)
    clean_paths = _png_paths(clean_dir) if clean_dir else []

    if unified:
        wm = synthesis.default_unified()
        verdicts = []
        clean_verdicts = []
        for extracted, probe in _extract_all(exnet, paths):
            reference = synthesis.render_unified(wm, probe.height, probe.width)
            verdicts.append(forensics.nc_verdict(extracted, reference, fcfg,
                                                 probe.path))
        for extracted, probe in _extract_all(exnet, clean_paths):
            reference = synthesis.render_unified(wm, probe.height, probe.width)
            clean_verdicts.append(forensics.nc_verdict(
                extracted, reference, fcfg, probe.path))
        summary = {
            'count': len(verdicts),
            'success_rate': forensics.nc_success_rate(verdicts),
            'false_positive_rate': forensics.nc_success_rate(clean_verdicts),
        }
        lines = util.JsonLinesLog(os.path.join(report_dir, 'verdicts.jsonl'))
        for v in verdicts:
            lines.write(dict(v.json_dump(), set='watermarked'))
        for v in clean_verdicts:
            lines.write(dict(v.json_dump(), set='clean'))

        x = PrettyTable()
        x.field_names = ['image', 'NC', 'success']
        for v in verdicts:
            x.add_row([os.path.basename(v.image), '%.3f' % v.nc, v.success])
    else:
        claimed = embedding.owner_color(bits, fcfg.codec) if bits else None
        batch = forensics.verdict_batch(
            _extract_all(exnet, paths), claimed, fcfg,
            clean=_extract_all(exnet, clean_paths))
        batch.write_lines(os.path.join(report_dir, 'verdicts.jsonl'))
        summary = batch.json_dump()

        x = PrettyTable()
        x.field_names = ['image', 'outcome', 'recovered', 'error', 'bits',
                         'success']
        for v in batch.verdicts:
            recovered = '-' if v.recovered_color is None else ' '.join(
                '%.1f' % c for c in v.recovered_color)
            x.add_row([os.path.basename(v.image), v.outcome, recovered,
                       '-' if v.error is None else '%.1f' % v.error,
                       codec.bits_to_hex(v.bits) if v.bits else '-',
                       v.success])

    util.write_json(os.path.join(report_dir, 'summary.json'), summary)
    _record(ctx, 'forensics', {'mode': mode, 'summary': summary})
    click.echo(x)
    click.echo('SR %s, FP %s' % (summary['success_rate'],
                                 summary['false_positive_rate']))


@cli.command(name='attack', help='Train surrogates against the trained '
                                 'systems and measure extraction')
@click.option('--cells', 'cell_set', type=click.Choice(CELL_SETS),
              default='default')
@click.option('--mode', 'modes', multiple=True,
              type=click.Choice(embedding.MODES),
              help='Systems to attack, all by default')
@click.pass_context
def attack_cmd(ctx, cell_set='default', modes=()):
    modes = tuple(modes) or embedding.MODES
    cells = []
    if cell_set in ('default', 'all'):
        cells += attack.default_cells(modes)
    if cell_set in ('table2', 'all'):
        cells += attack.table2_cells()
    if cell_set in ('optional', 'all'):
        cells += attack.optional_cells()

    table = attack.attack_matrix(cells, _out(ctx), ctx.obj['jobs'])
    _record(ctx, 'attack', {'cells': [c.json_dump() for c in cells]})
    click.echo(report.table1(table))


@cli.command(name='report', help='Render tables and figure grids')
@click.pass_context
def report_cmd(ctx):
    outputs = report.render_report(_out(ctx))
    _record(ctx, 'report', {'outputs': outputs})
    for name in sorted(outputs):
        path = outputs[name]
        if path.endswith('.txt'):
            with open(path) as f:
                click.echo(f.read())
        else:
            click.echo('%s: %s' % (name, path))


def main():
    try:
        cli(obj={})
    except exceptions.STRUCTMARK_EXCEPTIONS as e:
        LOG.error('%s: %s' % (type(e).__name__, e))
        click.echo('Error: %s' % e, err=True)
        sys.exit(1)


if __name__ == '__main__':
    main()
