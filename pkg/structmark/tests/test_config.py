import json
import os

import mock
import testtools

from structmark import config
from structmark import exceptions
from structmark.tests import base


class ConfigTestCase(base.StructmarkTestCase):
    @mock.patch.dict('os.environ', {'STRUCTMARK_STRUCTURE_SOURCE': 'canny'})
    def test_string_override(self):
        config.parsed.parse()
        self.assertTrue(isinstance(config.parsed.get('STRUCTURE_SOURCE'), str))
        self.assertEqual('canny', config.parsed.get('STRUCTURE_SOURCE'))

    @mock.patch.dict('os.environ', {'STRUCTMARK_COLOR_STEP': '30'})
    def test_int_override(self):
        config.parsed.parse()
        self.assertTrue(isinstance(config.parsed.get('COLOR_STEP'), int))
        self.assertEqual(30, config.parsed.get('COLOR_STEP'))

    @mock.patch.dict('os.environ', {'STRUCTMARK_ERROR_THRESHOLD': '12'})
    def test_float_override(self):
        config.parsed.parse()
        self.assertTrue(isinstance(config.parsed.get('ERROR_THRESHOLD'),
                                   float))
        self.assertEqual(12.0, config.parsed.get('ERROR_THRESHOLD'))

    @mock.patch.dict('os.environ',
                     {'STRUCTMARK_MIMIC_USE_AUGMENTATION': 'false'})
    def test_bool_override(self):
        config.parsed.parse()
        self.assertEqual(False, config.parsed.get('MIMIC_USE_AUGMENTATION'))

    @mock.patch.dict('os.environ', {'STRUCTMARK_CURRICULUM': '["flip"]'})
    def test_list_override(self):
        config.parsed.parse()
        self.assertEqual(['flip'], config.parsed.get('CURRICULUM'))

    @mock.patch.dict('os.environ', {'STRUCTMARK_COLOR_STEP': 'banana'})
    def test_bogus_override(self):
        self.assertRaises(ValueError, config.parsed.parse)

    @mock.patch.dict('os.environ', {'STRUCTMARK_BANANA': '1'})
    def test_unknown_environment_flag(self):
        self.assertRaises(exceptions.FlagException, config.parsed.parse)

    @mock.patch.dict('os.environ', {'STRUCTMARK_CURRICULUM': '{"a": 1}'})
    def test_wrong_container(self):
        self.assertRaises(exceptions.FlagException, config.parsed.parse)

    def test_experiment_file(self):
        path = os.path.join(self.tempdir(), 'experiment.json')
        with open(path, 'w') as f:
            f.write(json.dumps({'color_step': 25, 'seed': 7}))

        config.parsed.load(path)
        self.assertEqual(25, config.parsed.get('COLOR_STEP'))
        self.assertEqual(7, config.parsed.get('SEED'))
        self.assertEqual(path, config.parsed.experiment_path)

    @mock.patch.dict('os.environ', {'STRUCTMARK_SEED': '9'})
    def test_environment_beats_experiment_file(self):
        path = os.path.join(self.tempdir(), 'experiment.json')
        with open(path, 'w') as f:
            f.write(json.dumps({'seed': 7}))

        config.parsed.load(path)
        self.assertEqual(9, config.parsed.get('SEED'))

    def test_experiment_file_unknown_key(self):
        path = os.path.join(self.tempdir(), 'experiment.json')
        with open(path, 'w') as f:
            f.write(json.dumps({'banana': 1}))

        with testtools.ExpectedException(exceptions.FlagException):
            config.parsed.load(path)

    def test_experiment_file_not_json(self):
        path = os.path.join(self.tempdir(), 'experiment.json')
        with open(path, 'w') as f:
            f.write('not json')

        with testtools.ExpectedException(exceptions.FlagException):
            config.parsed.load(path)

    def test_set_and_dump(self):
        config.parsed.set('SEED', '3')
        self.assertEqual(3, config.parsed.get('SEED'))

        dumped = config.parsed.dump()
        dumped['SEED'] = 99
        self.assertEqual(3, config.parsed.get('SEED'))

        with testtools.ExpectedException(exceptions.FlagException):
            config.parsed.set('BANANA', 1)
