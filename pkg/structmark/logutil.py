import copy
import logging
import os
from pylogrus import TextFormatter
from pylogrus.base import PyLogrusBase
import re
import setproctitle
import sys
import traceback

from structmark import config


# These classes are extensions of the work in https://github.com/vmig/pylogrus
class SMPyLogrus(logging.Logger, PyLogrusBase):

    def __init__(self, *args, **kwargs):
        extra = kwargs.pop('extra', None)
        self._extra_fields = extra or {}
        super(SMPyLogrus, self).__init__(*args, **kwargs)

    def withPrefix(self, prefix=None):
        return SMCustomAdapter(self, None, prefix)

    def withFields(self, fields=None):
        return SMCustomAdapter(self, fields)

    def withField(self, key, value):
        return SMCustomAdapter(self, {key: value})

    #
    # Convenience methods
    #
    def withObj(self, object):
        if not object:
            return SMCustomAdapter(self, {})
        try:
            label, value = object.unique_label()
        except Exception as e:
            raise Exception('Bad object - no unique_label() function: %s' % e)
        return SMCustomAdapter(self, {label: value})

    def withStage(self, stage):
        return SMCustomAdapter(self, {'stage': stage})

    def withSpec(self, spec):
        if not isinstance(spec, str):
            spec = spec.unique_label()[1]
        return SMCustomAdapter(self, {'spec': spec})

    def withImage(self, path):
        return SMCustomAdapter(self, {'image': path})


class SMCustomAdapter(logging.LoggerAdapter, PyLogrusBase):

    def __init__(self, logger, extra=None, prefix=None):
        """Logger modifier.

        :param logger: Logger instance
        :type logger: SMPyLogrus
        :param extra: Custom fields
        :type extra: dict | None
        :param prefix: Prefix of log message
        :type prefix: str | None
        """
        self._logger = logger
        self._extra = self._normalize(extra)
        self._prefix = prefix
        super(SMCustomAdapter, self).__init__(
            self._logger, {'extra_fields': self._extra, 'prefix': self._prefix})

    @staticmethod
    def _normalize(fields):
        return {k.lower(): v for k, v in fields.items()} if isinstance(fields, dict) else {}

    def _with(self, fields):
        extra = copy.deepcopy(self._extra)
        extra.update(self._normalize(fields))
        return SMCustomAdapter(self._logger, extra, self._prefix)

    def withFields(self, fields=None):
        return self._with(fields)

    def withField(self, key, value):
        return self._with({key: value})

    def withPrefix(self, prefix=None):
        return self if prefix is None else SMCustomAdapter(self._logger, self._extra, prefix)

    FILENAME_RE = re.compile('.*/(?:site|dist)-packages/structmark/(.*)')

    def process(self, msg, kwargs):
        msg = '%s[%s] %s' % (setproctitle.getproctitle(), os.getpid(), msg)
        kwargs["extra"] = self.extra

        if config.parsed.get('LOG_METHOD_TRACE'):
            # Determine the name of the calling method
            frame = traceback.extract_stack()[-4]
            filename = frame.filename
            f_match = self.FILENAME_RE.match(filename)
            if f_match:
                filename = f_match.group(1)
            self._extra['method'] = '%s:%s:%s()' % (
                filename, frame.lineno, frame.name)

        return msg, kwargs

    #
    # Convenience methods
    #
    def withObj(self, object):
        if not object:
            return self
        try:
            label, value = object.unique_label()
        except Exception as e:
            raise Exception(
                'Bad object - no unique_label() function: %s' % e)
        return self._with({label: value})

    def withStage(self, stage):
        return self._with({'stage': stage})

    def withSpec(self, spec):
        if not isinstance(spec, str):
            spec = spec.unique_label()[1]
        return self._with({'spec': spec})

    def withImage(self, path):
        return self._with({'image': path})


def set_log_level(log, area):
    # Check for configuration override
    level = config.parsed.get('LOGLEVEL_' + area.upper())
    if level:
        numeric_level = getattr(logging, level.upper(), None)
        if not isinstance(numeric_level, int):
            raise ValueError('Invalid log level: %s' % level)
    else:
        numeric_level = logging.INFO

    log.logger.setLevel(numeric_level)


def setup(name):
    logging.setLoggerClass(SMPyLogrus)

    # Set root log level - higher handlers can set their own filter level
    logging.root.setLevel(logging.DEBUG)
    log = logging.getLogger(name)

    handler = None
    if log.handlers:
        handler = log.handlers[0]
    else:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(TextFormatter(
            fmt='%(asctime)s %(levelname)s %(message)s', colorize=False))
        log.addHandler(handler)
        log.propagate = False

    return log.withPrefix(), handler
