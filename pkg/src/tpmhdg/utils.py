""" Helper Functions
"""
import logging
import os

from joblib import effective_n_jobs

THREADS_ENV = 'TPMHDG_THREADS'


def make_folders(output):
    if output != '':
        """ Create folder """
        os.makedirs(output, exist_ok=True)


def get_n_jobs(default=1):
    """ Worker count for thread pools, capped by TPMHDG_THREADS. """
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return effective_n_jobs(default)
    try:
        n_jobs = int(value)
    except ValueError:
        logging.warning('ignoring {}={!r}: not an integer'.format(THREADS_ENV, value))
        return effective_n_jobs(default)
    return max(1, effective_n_jobs(n_jobs))


def key_value_lines(values):
    """ key=value lines; floats in scientific notation. """
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            lines.append('{}={:.6e}'.format(key, value))
        else:
            lines.append('{}={}'.format(key, value))
    return '\n'.join(lines)
