from logging import (
        basicConfig, getLogger, DEBUG, ERROR as LOG_ERROR, INFO)
from os import environ, getenv

from sentry_sdk import init as sentry_init
from sentry_sdk.integrations.logging import LoggingIntegration

__version__ = '0.1.0'

THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS',
                    'MKL_NUM_THREADS')
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# must run before numpy loads BLAS
if getenv('SPARSEVD_SINGLE_THREAD'):
    for variable in THREAD_VARIABLES:
        environ[variable] = '1'


def configure(verbose=False):
    '''Sets up logging and, when SENTRY_DSN is set, Sentry.
    Returns the package logger.'''
    basicConfig(format=LOG_FORMAT)
    logger = getLogger('sparsevd')
    logger.setLevel(DEBUG if verbose else INFO)

    SENTRY_DSN = getenv('SENTRY_DSN')

    if getenv('SPARSEVD_SINGLE_THREAD'):
        logger.info('Using single-threaded BLAS.')

    if SENTRY_DSN:
        sentry_init(
                dsn=SENTRY_DSN,
                integrations=[
                    LoggingIntegration(
                        level=LOG_ERROR,
                        event_level=LOG_ERROR)],
                traces_sample_rate=1.0)
        logger.debug('Sentry is enabled.')
    else:
        logger.debug('Sentry is disabled.')

    return logger
