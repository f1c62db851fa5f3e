from dataclasses import asdict, dataclass, fields, replace
from logging import getLogger
from os import path
from re import compile as re_compile

from sparsevd.utils.varlayers import (
        LOG_SIGMA2_INIT, MODES, TASKS, NoisePlan, VBDLayerParams)

VBD_SCOPES = ('all', 'hidden')
TRUE_VALUES = ('true', 'yes', 'on', '1')
FALSE_VALUES = ('false', 'no', 'off', '0')
CAMEL_CASE = re_compile(r"(?<=[a-z0-9])(?=[A-Z])")


# Exceptions
class ConfigError(Exception):
    '''Error class for configuration errors'''

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class TrainConfig:
    '''Run settings; defaults follow the desk-scale sentiment setup'''
    task: str = 'sentiment'
    mode: str = 'none'
    hidden_size: int = 32
    embed_size: int = 32
    seq_length: int = 20
    batch_size: int = 64
    learning_rate: float = 0.001
    epochs: int = 10
    clip_threshold: float = 0.1
    vbd_rate: float = 0.3
    vbd_scope: str = 'all'
    sparse_dense: bool = False
    weight_decay: float = 0.0
    seed: int = 0
    init_from: str = ''
    kl_scale: float = 1.0
    kl_warmup_epochs: int = 0
    log_sigma2_init: float = LOG_SIGMA2_INIT
    threshold: float = 3.0
    data: str = ''
    train_chars: int = 0
    early_stopping: bool = True
    wall_clock: bool = False
    label: str = ''

    def validate(self):
        '''Raises ConfigError naming the first broken invariant'''
        checks = (
            ('task', self.task in TASKS),
            ('mode', self.mode in MODES),
            ('vbd_scope', self.vbd_scope in VBD_SCOPES),
            ('hidden_size', self.hidden_size >= 1),
            ('embed_size', self.embed_size >= 1),
            ('seq_length', self.seq_length >= 1),
            ('batch_size', self.batch_size >= 1),
            ('learning_rate', self.learning_rate > 0),
            ('epochs', self.epochs >= 1),
            ('clip_threshold', self.clip_threshold > 0),
            ('vbd_rate', 0 <= self.vbd_rate < 1),
            ('weight_decay', self.weight_decay >= 0),
            ('seed', self.seed >= 0),
            ('kl_scale', self.kl_scale >= 0),
            ('kl_warmup_epochs', self.kl_warmup_epochs >= 0),
            ('train_chars', self.train_chars >= 0))
        for key, ok in checks:
            if not ok:
                raise ConfigError('Invalid value for {}: {!r}'.format(
                    key.upper(), getattr(self, key)), key=key.upper())
        return self

    def noise_plan(self):
        '''Layer-wise noise placement for this run'''
        if self.mode == 'none':
            return NoisePlan()
        input_rate = self.vbd_rate if self.vbd_scope == 'all' else 0.0
        vbd = VBDLayerParams(input_rate, self.vbd_rate)
        every_layer = self.vbd_scope == 'all'
        if self.mode == 'vbd':
            return NoisePlan(lstm='vbd',
                             head='vbd' if every_layer else 'none',
                             embedding=every_layer and
                             self.task == 'sentiment',
                             vbd=vbd)
        if self.sparse_dense:
            head = 'sparse-vd'
        else:
            head = 'vbd' if every_layer else 'none'
        return NoisePlan(lstm='sparse-vd', head=head,
                         embedding=every_layer and self.task == 'sentiment',
                         vbd=vbd)

    def kl_scale_at(self, epoch):
        '''KL multiplier for a 1-based epoch under linear warm-up'''
        if self.kl_warmup_epochs == 0:
            return self.kl_scale
        return self.kl_scale * min(1.0, epoch / self.kl_warmup_epochs)

    def to_text(self):
        '''Flat KEY = value echo that parse_config reads back'''
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, str):
                value = "'{}'".format(value)
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            else:
                value = repr(value)
            lines.append('{} = {}'.format(key.upper(), value))
        return '\n'.join(lines) + '\n'


FIELDS = {field.name: field for field in fields(TrainConfig)}


def normalize_key(key):
    '''Maps LEARNING_RATE, learning_rate and learningRate alike'''
    return CAMEL_CASE.sub('_', key.strip()).lower()


def convert_value(key, raw):
    '''Converts a raw string to the type of config field `key`'''
    name = normalize_key(key)
    if name not in FIELDS:
        raise ConfigError('Unknown config key: {}'.format(key.upper()),
                          key=key.upper())
    kind = FIELDS[name].type
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in '\'"':
        raw = raw[1:-1]
    try:
        if kind in (bool, 'bool'):
            if raw.lower() in TRUE_VALUES:
                return True
            if raw.lower() in FALSE_VALUES:
                return False
            raise ValueError(raw)
        if kind in (int, 'int'):
            return int(raw)
        if kind in (float, 'float'):
            return float(raw)
    except ValueError:
        raise ConfigError('Invalid value for {}: {!r}'.format(
            key.upper(), raw), key=key.upper())
    return raw


def strip_comment(line):
    '''Drops a trailing # comment that is not inside quotes'''
    quote = None
    for index, char in enumerate(line):
        if quote:
            if char == quote:
                quote = None
        elif char in '\'"':
            quote = char
        elif char == '#':
            return line[:index]
    return line


def parse_lines(lines):
    '''Returns {field: value} from KEY = value lines'''
    values = {}
    for number, line in enumerate(lines, start=1):
        line = strip_comment(line).strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError('Line {}: expected KEY = value'.format(number))
        key, raw = line.split('=', 1)
        values[normalize_key(key)] = convert_value(key.strip(), raw)
    return values


def parse_config(filename=None, overrides=(), logger=getLogger()):
    '''Builds a validated TrainConfig from a file plus key=value overrides'''
    values = {}
    if filename:
        if not path.isfile(filename):
            raise ConfigError('Config file not found: {}'.format(filename))
        with open(filename) as file:
            values.update(parse_lines(file.readlines()))
        logger.info('using configuration settings from {}'.format(filename))

    values.update(parse_lines(overrides))
    config = replace(TrainConfig(), **values)
    return config.validate()
