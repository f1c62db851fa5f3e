from json import dumps, loads, JSONDecodeError
from logging import getLogger
from os import path

METRIC_FIELDS = ('epoch', 'trainLoss', 'validQuality', 'testQuality',
                 'validQualityPruned', 'testQualityPruned', 'sparsityX',
                 'sparsityH', 'sparsityY', 'klScale', 'label', 'wallClock')
REQUIRED_FIELDS = ('epoch', 'trainLoss', 'validQuality', 'testQuality')


# Exceptions
class MetricsError(Exception):
    '''Error class for malformed metrics files'''

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


def format_record(record):
    '''One metrics line, keys sorted so equal runs give equal bytes'''
    return dumps({key: record.get(key) for key in METRIC_FIELDS},
                 sort_keys=True) + '\n'


def parse_record(line, number=None):
    '''Returns the record of a metrics line'''
    try:
        record = loads(line)
    except JSONDecodeError as e:
        raise MetricsError('line {}: {}'.format(number, e.msg), line=number)
    if not isinstance(record, dict):
        raise MetricsError('line {}: not a record'.format(number),
                           line=number)
    missing = [key for key in REQUIRED_FIELDS if key not in record]
    if missing:
        raise MetricsError('line {}: missing {}'.format(
            number, ', '.join(missing)), line=number)
    if not isinstance(record['epoch'], int):
        raise MetricsError('line {}: epoch must be an integer'.format(
            number), line=number)
    return record


def read_metrics(filename, logger=getLogger()):
    '''Returns the records of a metrics file'''
    if not path.isfile(filename):
        raise MetricsError('File not found: {}'.format(filename))

    records = []
    with open(filename) as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            records.append(parse_record(line, number))

    if not records:
        logger.info('empty metrics file: {}'.format(filename))
        raise MetricsError('No metrics records in {}'.format(filename))

    return records


def get_label(records, filename):
    '''Series label: the records' label, else the run directory name'''
    for record in records:
        if record.get('label'):
            return record['label']
    return path.basename(path.dirname(path.abspath(filename)))
