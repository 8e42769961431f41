# Copyright 2021 The structmark authors

import json
import os
from pbr.version import VersionInfo
import random
import sys
import tempfile
import time
import traceback

import numpy as np
import torch

from structmark import config
from structmark import logutil


LOG, _ = logutil.setup(__name__)


class RecordedOperation():
    def __init__(self, operation, relatedobject=None):
        self.operation = operation
        self.object = relatedobject

    def __enter__(self):
        self.start_time = time.time()
        self._log().info('Start %s', self.operation)
        return self

    def __exit__(self, *args):
        self.duration = time.time() - self.start_time
        self._log().withField('duration', self.duration).info(
            'Finish %s', self.operation)

    def _log(self):
        if not self.object:
            return LOG
        if isinstance(self.object, str):
            return LOG.withField('label', self.object)
        return LOG.withObj(self.object)


class JsonLinesLog(object):
    """Append-only JSON lines file, one record per call."""

    def __init__(self, path):
        self.path = path
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    def write(self, record):
        with open(self.path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def read(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path) as f:
            return [json.loads(line) for line in f if line.strip()]


def atomic_write(path, writer):
    """Write a file through writer(file_object) then rename it into place."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'wb') as f:
            writer(f)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, data):
    atomic_write(path, lambda f: f.write(
        json.dumps(data, indent=4, sort_keys=True).encode('utf-8')))


def read_json(path):
    with open(path) as f:
        return json.loads(f.read())


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def get_device():
    requested = config.parsed.get('DEVICE')
    if requested:
        return torch.device(requested)
    if torch.cuda.is_available():
        return torch.device('cuda')
    return torch.device('cpu')


def ignore_exception(processname, e):
    msg = '[Exception] Ignored error in %s: %s' % (processname, e)
    _, _, tb = sys.exc_info()
    if tb:
        msg += '\n%s' % traceback.format_exc()

    LOG.error(msg)


CACHED_VERSION = None


def get_version():
    global CACHED_VERSION

    if not CACHED_VERSION:
        try:
            CACHED_VERSION = VersionInfo('structmark').version_string()
        except Exception:
            CACHED_VERSION = 'unknown'
    return CACHED_VERSION


def run_record(command):
    return {
        'command': command,
        'version': get_version(),
        'config': config.parsed.dump(),
        'timestamp': time.time(),
    }
