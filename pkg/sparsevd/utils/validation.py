from logging import getLogger

import numpy as np
from decorator import decorator


# Exceptions
class DivergenceError(Exception):
    '''Error class for NaN/Inf losses and gradients'''

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def is_finite(value):
    values = getattr(value, 'values', value)
    return bool(np.isfinite(values).all())


@decorator
def check_finite(f, *args, **kwargs):
    '''Raises DivergenceError when the loss returned by `f` is not finite.
    The loss is the result, or its first item for tuple results.'''
    logger = kwargs.get('logger') or getLogger()

    result = f(*args, **kwargs)
    loss = result[0] if isinstance(result, tuple) else result

    if not is_finite(loss):
        logger.error('{} returned a non-finite loss'.format(f.__name__))
        raise DivergenceError('non-finite loss in {}'.format(f.__name__))

    return result


def check_gradients(grads, logger=getLogger()):
    '''Raises DivergenceError naming every gradient with NaN/Inf'''
    broken = sorted(name for name, grad in grads.items()
                    if not is_finite(grad))
    if broken:
        logger.error('non-finite gradients: {}'.format(', '.join(broken)))
        raise DivergenceError('non-finite gradients: {}'.format(
            ', '.join(broken)))
    return grads
