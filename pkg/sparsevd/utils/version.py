from importlib.metadata import (
        version as package_version, PackageNotFoundError)
from logging import getLogger

from numpy import __version__ as numpy_version
from scipy import __version__ as scipy_version

from sparsevd import __version__ as sparsevd_version


def get_numpy_version():
    '''Return numpy version'''

    return numpy_version


def get_scipy_version():
    '''Return scipy version'''

    return scipy_version


def get_sparsevd_version():
    '''Return sparsevd version'''

    return sparsevd_version


def get_click_version(logger=getLogger()):
    '''Return click version'''

    try:
        return package_version('click')
    except PackageNotFoundError:  # pragma: no cover
        logger.info('click version not available')
        return None


def get_versions():
    '''Return versions recorded in run manifests'''

    return {'numpy': get_numpy_version(),
            'scipy': get_scipy_version(),
            'click': get_click_version(),
            'sparsevd': get_sparsevd_version()}
