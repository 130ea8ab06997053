import hashlib
import logging
import os

import numpy as np

# Stream tags keep independent random streams apart for the same (agent, episode, step) key.
STREAM_START = 1
STREAM_TRANSITION = 2
STREAM_SCALARIZATION = 3
STREAM_BAYES = 4


class MyLogger:
    """
    Fallback logger used when enable_logging is not set. Informational messages are dropped so long simulations
    stay quiet; warnings and errors are printed.
    """

    @staticmethod
    def info(*args, **kwargs):
        pass

    @staticmethod
    def debug(*args, **kwargs):
        pass


MyLogger.warning = print
MyLogger.error = print


def get_logger(name='Coop-LSVI'):
    """
    Selects the logger for a run based on the enable_logging environment variable.
    :param name: Name of the standard library logger when logging is enabled
    :return: A logging.Logger or a MyLogger instance
    """
    if os.getenv('enable_logging', 'false').lower() == 'true':
        logger = logging.getLogger(name)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
            logger.addHandler(handler)
        logger.setLevel(logging.INFO)
        return logger
    return MyLogger()


def keyed_rng(seed, stream, *key):
    """
    Returns a generator that depends only on the master seed, the stream tag and the key. Any execution order of
    agents or episodes therefore draws identical numbers.
    :param seed: Master seed of the run
    :param stream: One of the STREAM_* tags
    :param key: Non-negative integers such as (agent, episode, step)
    """
    entropy = [int(seed), int(stream)] + [int(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sample_categorical(probabilities, rng):
    """
    Inverse-CDF draw from a finite distribution.
    :param probabilities: 1-d array summing to one
    :param rng: numpy Generator
    :return: Index of the drawn outcome
    """
    cdf = np.cumsum(probabilities)
    u = rng.random() * cdf[-1]
    index = int(np.searchsorted(cdf, u, side='right'))
    return min(index, len(probabilities) - 1)


def array_digest(*arrays):
    """
    sha256 digest over the raw bytes of the given arrays; equal digests mean bitwise-equal contents.
    """
    sha = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        sha.update(str(array.shape).encode())
        sha.update(array.tobytes())
    return sha.hexdigest()
