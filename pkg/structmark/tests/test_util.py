import json
import logging
import os

import mock
import numpy as np
import testtools
import torch

from structmark import logutil
from structmark import util
from structmark.tests import base


class Labelled(object):
    def unique_label(self):
        return ('thing', 'banana')


class UtilTestCase(base.StructmarkTestCase):
    def test_json_lines_log(self):
        path = os.path.join(self.tempdir(), 'nested', 'log.jsonl')
        log = util.JsonLinesLog(path)
        self.assertEqual([], log.read())

        log.write({'epoch': 1, 'sr': 0.5})
        log.write({'epoch': 2, 'sr': 0.75})
        self.assertEqual([{'epoch': 1, 'sr': 0.5}, {'epoch': 2, 'sr': 0.75}],
                         log.read())

    def test_write_read_json(self):
        path = os.path.join(self.tempdir(), 'a', 'b.json')
        util.write_json(path, {'b': [1, 2], 'a': None})
        self.assertEqual({'a': None, 'b': [1, 2]}, util.read_json(path))

    def test_atomic_write_failure_leaves_nothing(self):
        d = self.tempdir()
        path = os.path.join(d, 'out.bin')

        def broken(f):
            f.write(b'partial')
            raise IOError('disk on fire')

        self.assertRaises(IOError, util.atomic_write, path, broken)
        self.assertEqual([], os.listdir(d))

    def test_seed_everything(self):
        util.seed_everything(5)
        a = (np.random.rand(), float(torch.rand(1)))
        util.seed_everything(5)
        b = (np.random.rand(), float(torch.rand(1)))
        self.assertEqual(a, b)

    def test_get_device_requested(self):
        self.set_flags(DEVICE='cpu')
        self.assertEqual(torch.device('cpu'), util.get_device())

    @mock.patch('torch.cuda.is_available', return_value=False)
    def test_get_device_default(self, mock_cuda):
        self.assertEqual(torch.device('cpu'), util.get_device())
        mock_cuda.assert_called()

    @mock.patch('structmark.util.LOG')
    def test_ignore_exception(self, mock_log):
        try:
            raise ValueError('banana')
        except ValueError as e:
            util.ignore_exception('tests', e)
        msg = mock_log.error.call_args[0][0]
        self.assertIn('Ignored error in tests: banana', msg)
        self.assertIn('Traceback', msg)

    @mock.patch('structmark.util.LOG')
    def test_recorded_operation(self, mock_log):
        with util.RecordedOperation('thinking', Labelled()) as op:
            pass
        mock_log.withObj.assert_called()
        self.assertTrue(op.duration >= 0.0)

    def test_run_record(self):
        self.set_flags(SEED=11)
        record = util.run_record('train')
        self.assertEqual('train', record['command'])
        self.assertEqual(11, record['config']['SEED'])
        self.assertIn('version', record)
        json.dumps(record)


class LogutilTestCase(base.StructmarkTestCase):
    def test_fields_accumulate(self):
        log, _ = logutil.setup('structmark.tests.fields')
        adapter = log.withStage('flip').withSpec('unet-sm/L2').withObj(
            Labelled()).withField('Epoch', 3)
        self.assertEqual({'stage': 'flip', 'spec': 'unet-sm/L2',
                          'thing': 'banana', 'epoch': 3}, adapter.extra[
            'extra_fields'])

    def test_fields_do_not_leak(self):
        log, _ = logutil.setup('structmark.tests.leak')
        parent = log.withStage('flip')
        parent.withField('epoch', 1)
        self.assertEqual({'stage': 'flip'}, parent.extra['extra_fields'])

    def test_handler_installed_once(self):
        _, first = logutil.setup('structmark.tests.once')
        _, second = logutil.setup('structmark.tests.once')
        self.assertIs(first, second)

    def test_set_log_level(self):
        self.set_flags(LOGLEVEL_TRAINING='warning')
        log, _ = logutil.setup('structmark.tests.level')
        logutil.set_log_level(log, 'training')
        self.assertEqual(logging.WARNING, log.logger.level)

    def test_set_log_level_bogus(self):
        self.set_flags(LOGLEVEL_TRAINING='banana')
        log, _ = logutil.setup('structmark.tests.bogus')
        with testtools.ExpectedException(ValueError):
            logutil.set_log_level(log, 'training')
