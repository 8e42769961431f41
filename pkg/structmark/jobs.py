# Run independent work items (attack matrix cells) either in this process
# or as a pool of worker processes, each writing its result to a JSON file.

import copy
import multiprocessing
import os
import setproctitle
import time

from structmark import config
from structmark import logutil
from structmark import util


LOG, _ = logutil.setup(__name__)


def process_name(name):
    return 'structmark-%s' % name


def result_path(out_dir, index):
    return os.path.join(out_dir, 'attack', 'cells', '%04d.json' % index)


def run_one(func, item, out_dir, index):
    """func(item, out_dir), with a failure recorded as an error row for the
    cell. The rows are also written to the cell's result file."""
    try:
        rows = func(item, out_dir)
    except Exception as e:
        util.ignore_exception(process_name('cell-%04d' % index), e)
        rows = [{'cell': index, 'error': str(e)}]
    util.write_json(result_path(out_dir, index), rows)
    return rows


def handle(func, item, out_dir, index, flags):
    setproctitle.setproctitle(process_name('cell-%04d' % index))

    # Workers may be spawned rather than forked, so carry the parent's flags
    config.parsed.experiment = flags
    config.parsed.parse()

    LOG.withField('cell', index).info('Processing cell')
    run_one(func, item, out_dir, index)


def run_all(func, items, out_dir, jobs_count=1):
    """Yield the rows of func(item, out_dir) for every item, in item order.
    Both modes report a failing item as an error row rather than raising."""
    if jobs_count <= 1:
        for index, item in enumerate(items):
            LOG.withField('cell', index).info('Processing cell')
            yield run_one(func, item, out_dir, index)
        return

    flags = config.parsed.dump()
    context = multiprocessing.get_context('spawn')
    pending = list(enumerate(items))
    workers = []
    for index, _ in pending:
        if os.path.exists(result_path(out_dir, index)):
            os.unlink(result_path(out_dir, index))

    while pending or workers:
        for w in copy.copy(workers):
            if not w.is_alive():
                w.join(1)
                workers.remove(w)

        if pending and len(workers) < jobs_count:
            index, item = pending.pop(0)
            p = context.Process(
                target=handle, args=(func, item, out_dir, index, flags),
                name='%s-worker' % process_name('attack'))
            p.start()
            workers.append(p)
            continue

        time.sleep(0.2)

    for index in range(len(items)):
        path = result_path(out_dir, index)
        if not os.path.exists(path):
            LOG.withField('cell', index).error('Cell wrote no result')
            yield [{'cell': index, 'error': 'no result'}]
            continue
        yield util.read_json(path)
