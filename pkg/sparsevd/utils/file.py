from json import dumps, loads
from logging import getLogger
from os import makedirs, path
from zipfile import BadZipFile

import numpy as np

FORMAT_VERSION = 1
META_KEY = '__meta__'
DIR_MODE = 0o770
SPLITS = ('train', 'valid', 'test')


# Exceptions
class ContainerError(Exception):
    '''Error class for unreadable checkpoints and exports'''
    pass


def get_split_path(prefix, split, ext):
    '''Returns <prefix>.<split>.<ext>'''

    return '.'.join([prefix, split, ext])


def make_dir(dir_path, logger=getLogger()):
    '''Creates the output directory if needed and returns it'''

    makedirs(dir_path, mode=DIR_MODE, exist_ok=True)
    logger.debug('output directory: {}'.format(dir_path))
    return dir_path


def save_container(filename, arrays, meta, logger=getLogger()):
    '''Save named arrays plus a JSON header and returns the path.

    The container is an uncompressed .npz archive; the header records the
    format version, shapes and whatever the caller adds.'''

    header = dict(meta)
    header['format_version'] = FORMAT_VERSION
    header['shapes'] = {name: list(np.shape(value))
                        for name, value in arrays.items()}

    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload[META_KEY] = np.array(dumps(header, sort_keys=True))

    with open(filename, 'wb') as file:
        np.savez(file, **payload)

    logger.info('container saved at {}'.format(filename))
    return filename


def load_container(filename, logger=getLogger()):
    '''Returns (arrays, meta) from a container written by save_container'''

    if not path.isfile(filename):
        logger.error('container not found: {}'.format(filename))
        raise ContainerError('File not found: {}'.format(filename))

    try:
        with np.load(filename, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (BadZipFile, OSError, ValueError) as e:
        logger.error('can not read container {}: {}'.format(filename, e))
        raise ContainerError('Can not read container: {}'.format(filename))

    if META_KEY not in arrays:
        raise ContainerError('Container has no header: {}'.format(filename))
    meta = loads(str(arrays.pop(META_KEY)))

    if meta.get('format_version') != FORMAT_VERSION:
        raise ContainerError('Unsupported container format: {}'.format(
            meta.get('format_version')))

    return (arrays, meta)


def write_text(filename, text):
    '''Writes text to file and returns path'''

    with open(filename, 'w') as file:
        file.write(text)

    return filename


def write_json(filename, data):
    '''Writes a JSON document and returns path'''

    return write_text(filename, dumps(data, indent=2, sort_keys=True) + '\n')


def write_manifest(filename, manifest, logger=getLogger()):
    '''Writes a run manifest once every artifact it names exists'''

    missing = [artifact for artifact in manifest['artifacts'].values()
               if not path.exists(artifact)]
    if missing:
        logger.error('manifest artifacts missing: {}'.format(missing))
        raise ContainerError('Missing artifacts: {}'.format(
            ', '.join(missing)))

    write_json(filename, manifest)
    logger.info('manifest saved at {}'.format(filename))
    return filename
