import mock

from structmark import config
from structmark import jobs
from structmark import util
from structmark.tests import base


def double(item, out_dir):
    return [{'value': item * 2}]


def explode(item, out_dir):
    raise ValueError('cell %d exploded' % item)


class JobsTestCase(base.StructmarkTestCase):
    def test_in_process_keeps_order(self):
        out = self.tempdir()
        self.assertEqual([[{'value': 2}], [{'value': 4}], [{'value': 6}]],
                         list(jobs.run_all(double, [1, 2, 3], out)))

    def test_names(self):
        self.assertEqual('structmark-attack', jobs.process_name('attack'))
        self.assertTrue(jobs.result_path('/tmp/x', 3).endswith(
            'attack/cells/0003.json'))

    @mock.patch('setproctitle.setproctitle')
    def test_handle_writes_result(self, mock_title):
        out = self.tempdir()
        jobs.handle(double, 5, out, 0, {'SEED': 7})
        self.assertEqual([{'value': 10}],
                         util.read_json(jobs.result_path(out, 0)))
        mock_title.assert_called_with('structmark-cell-0000')
        self.assertEqual(7, config.parsed.get('SEED'))

    @mock.patch('setproctitle.setproctitle')
    def test_handle_records_errors(self, mock_title):
        out = self.tempdir()
        jobs.handle(explode, 2, out, 1, {})
        rows = util.read_json(jobs.result_path(out, 1))
        self.assertEqual(1, rows[0]['cell'])
        self.assertIn('exploded', rows[0]['error'])

    def test_in_process_records_errors(self):
        out = self.tempdir()
        results = list(jobs.run_all(explode, [1, 2], out))
        self.assertEqual(2, len(results))
        for index, rows in enumerate(results):
            self.assertEqual(index, rows[0]['cell'])
            self.assertIn('cell %d exploded' % (index + 1), rows[0]['error'])
            self.assertEqual(
                rows, util.read_json(jobs.result_path(out, index)))

    def test_in_process_writes_results(self):
        out = self.tempdir()
        list(jobs.run_all(double, [4], out))
        self.assertEqual([{'value': 8}],
                         util.read_json(jobs.result_path(out, 0)))

    @mock.patch('setproctitle.setproctitle')
    def test_both_modes_agree_on_errors(self, mock_title):
        out = self.tempdir()
        in_process = list(jobs.run_all(explode, [3], out))[0]
        jobs.handle(explode, 3, out, 0, {})
        self.assertEqual(in_process,
                         util.read_json(jobs.result_path(out, 0)))
